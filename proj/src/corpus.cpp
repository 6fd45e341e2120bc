#include "convmem/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace convmem::corpus {
namespace {

using nlohmann::ordered_json;

constexpr int kFactSlots = 6;
constexpr int kAdjacentSlots = 6;
constexpr int kPretrainTextCount = 30;

const std::vector<std::string>& value_adj_bank() {
  static const std::vector<std::string> bank = {
      "brisk",  "coarse", "dense",   "eager", "faint", "grand",  "hasty", "jagged",
      "keen",   "lofty",  "mellow",  "narrow", "opaque", "pale",  "quaint", "rapid",
      "solemn", "tidy",   "upright", "vivid", "woven", "zesty",  "ancient", "broad",
      "calm",   "deep",   "even",    "firm",  "gentle", "hollow", "idle",  "joint",
      "kind",   "loose",  "mild",    "neat",  "oval",  "plain",  "round", "sleek"};
  return bank;
}

const std::vector<std::string>& value_noun_bank() {
  static const std::vector<std::string> bank = {
      "filament", "lattice", "ribbon",  "plume",   "shard",   "veneer",   "crest",
      "groove",   "fiber",   "petal",   "prism",   "husk",    "kernel",   "strand",
      "facet",    "sprig",   "tuft",    "flake",   "bead",    "coil",     "sliver",
      "wisp",     "mote",    "fleck",   "frond",   "tendril", "stipple",  "glaze",
      "patina",   "varnish", "enamel",  "resin",   "pigment", "dye",      "lacquer",
      "gild",     "sheen",   "luster",  "gloss",   "polish",  "grain",    "weave",
      "braid",    "knot",    "mesh",    "gauze",   "felt",    "twill",    "serge",
      "denim",    "burlap",  "canvas",  "muslin",  "taffeta", "velvet",   "corduroy",
      "flannel",  "tweed",   "chintz",  "damask",  "brocade", "chiffon",  "organza",
      "satin",    "crepe",   "linen",   "hemp",    "jute",    "sisal",    "raffia",
      "wicker",   "rattan",  "bamboo",  "cork",    "ebony",   "teak",     "walnut",
      "cedar",    "spruce",  "alder"};
  return bank;
}

// Placeholders: {attr} {topic} {value} {adj}. Text is authored in canonical
// spacing (punctuation as separate space-delimited tokens) so tokenizer
// round trips are exact.
std::string subst(std::string tmpl, const std::string& attr, const std::string& topic,
                  const std::string& value, const std::string& adj) {
  auto replace_all = [&tmpl](const std::string& key, const std::string& with) {
    size_t pos = 0;
    while ((pos = tmpl.find(key, pos)) != std::string::npos) {
      tmpl.replace(pos, key.size(), with);
      pos += with.size();
    }
  };
  replace_all("{attr}", attr);
  replace_all("{topic}", topic);
  replace_all("{value}", value);
  replace_all("{adj}", adj);
  return tmpl;
}

const std::vector<std::string>& prompt_templates() {
  static const std::vector<std::string> t = {
      "Please tell me about {topic} .",
      "I would like to hear about {topic} .",
      "Can you walk me through {topic} ?"};
  return t;
}

const std::vector<std::string>& intro_templates() {
  static const std::vector<std::string> t = {
      "Certainly , there is plenty to say about {topic} .",
      "Of course , {topic} has several parts worth covering .",
      "Happy to , here is an overview of {topic} ."};
  return t;
}

const std::vector<std::string>& fact_templates() {
  static const std::vector<std::string> t = {
      "The {attr} is {value} .",
      "Its {attr} is {value} .",
      "For the {attr} it lists {value} ."};
  return t;
}

constexpr const char* kSummaryHead = "Summary : the user asked about {topic} .";
constexpr const char* kSummaryFact = "It mentioned the {attr} , {value} .";

// Everything up to and including the first sentence-final mark.
std::string first_sentence(const std::string& text) {
  size_t cut = text.find_first_of(".?");
  return cut == std::string::npos ? text : text.substr(0, cut + 1);
}

struct QaTemplates {
  std::vector<std::string> pos_closed_q, pos_closed_a;
  std::vector<std::string> pos_open_q, pos_open_a;
  std::vector<std::string> neg_closed_q, neg_closed_a;
  std::vector<std::string> neg_open_q, neg_open_a;
  std::string paraphrase_suffix;
};

const QaTemplates& templates_for(GeneratorFamily family) {
  static const QaTemplates in_dist = {
      {"Did we discuss the {attr} of {topic} ?"},
      {"Yes , we discussed the {attr} of {topic} ."},
      {"What did we discuss about the {attr} of {topic} ?"},
      {"We discussed that the {attr} of {topic} is {value} ."},
      {"Did we discuss {adj} ?"},
      {"No , we have not discussed {adj} ."},
      {"What did we discuss about {adj} ?"},
      {"We did not discuss {adj} ."},
      "at any point"};
  static const QaTemplates out_of_dist = {
      {"Did we discuss anything regarding the {attr} of {topic} ?",
       "Did we discuss the matter of the {attr} of {topic} ?"},
      {"Yes , that came up when we went over the {attr} of {topic} .",
       "Yes , the {attr} of {topic} was part of our exchange ."},
      {"What did we discuss about the {attr} of {topic} back then ?",
       "What did we discuss about the {attr} of {topic} when it came up ?"},
      {"Back then we noted that the {attr} of {topic} is {value} .",
       "When it came up we noted that the {attr} of {topic} is {value} ."},
      {"Did we discuss matters of {adj} ?", "Did we discuss the area of {adj} ?"},
      {"No , matters of {adj} never came up .",
       "No , the area of {adj} never came up ."},
      {"What did we discuss about matters of {adj} ?",
       "What did we discuss about the area of {adj} ?"},
      {"Nothing came up about matters of {adj} .",
       "Nothing came up about the area of {adj} ."},
      "in an earlier session"};
  return family == GeneratorFamily::InDist ? in_dist : out_of_dist;
}

// Inserts the family's suffix before the terminal question mark.
std::string paraphrase_question(const std::string& question, GeneratorFamily family) {
  const std::string& suffix = templates_for(family).paraphrase_suffix;
  if (question.size() >= 2 && question.compare(question.size() - 2, 2, " ?") == 0)
    return question.substr(0, question.size() - 2) + " " + suffix + " ?";
  return question + " " + suffix;
}

int ood_variant_index(uint64_t seed, int conv_id, int slot, int type_code) {
  return static_cast<int>(mix_seed(seed, static_cast<uint64_t>(conv_id),
                                   static_cast<uint64_t>(slot * 16 + type_code)) &
                          1);
}

enum TypeCode { kPosClosed = 0, kPosOpen = 1, kNegClosed = 2, kNegOpen = 3 };

QASample render_sample(const Conversation& conv, GeneratorFamily family, int type_code,
                       int slot, int variant, bool paraphrase) {
  const QaTemplates& t = templates_for(family);
  auto pick = [variant](const std::vector<std::string>& bank) {
    return bank[static_cast<size_t>(variant) % bank.size()];
  };
  QASample s;
  s.conv_id = conv.id;
  s.slot_index = slot;
  s.paraphrase = paraphrase;
  s.split = Split::Train;
  if (type_code == kPosClosed || type_code == kPosOpen) {
    const FactSlot& fs = conv.fact_slots.at(static_cast<size_t>(slot));
    s.polarity = Polarity::Positive;
    s.form = type_code == kPosClosed ? Form::Closed : Form::Open;
    const std::string& q = pick(type_code == kPosClosed ? t.pos_closed_q : t.pos_open_q);
    const std::string& a = pick(type_code == kPosClosed ? t.pos_closed_a : t.pos_open_a);
    s.question = subst(q, fs.attribute, conv.topic, fs.value, "");
    s.answer = subst(a, fs.attribute, conv.topic, fs.value, "");
  } else {
    const std::string& adj = conv.adjacent.at(static_cast<size_t>(slot));
    s.polarity = Polarity::Negative;
    s.form = type_code == kNegClosed ? Form::Closed : Form::Open;
    const std::string& q = pick(type_code == kNegClosed ? t.neg_closed_q : t.neg_open_q);
    const std::string& a = pick(type_code == kNegClosed ? t.neg_closed_a : t.neg_open_a);
    s.question = subst(q, "", "", "", adj);
    s.answer = subst(a, "", "", "", adj);
  }
  if (paraphrase) s.question = paraphrase_question(s.question, family);
  return s;
}

std::string normalize_ws(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_space = true;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      if (!in_space && !out.empty()) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(c);
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && s.compare(0, prefix.size(), prefix) == 0;
}

Conversation build_conversation(int id, const std::string& subject, const CorpusConfig& config) {
  Rng rng(mix_seed(config.seed, 1000 + static_cast<uint64_t>(id)));
  Conversation conv;
  conv.id = id;
  conv.subject = subject;
  const auto& aspects = aspect_bank();
  conv.topic_aspect = aspects[rng.below(aspects.size())];
  conv.topic = subject + " " + conv.topic_aspect;

  std::vector<std::string> others;
  for (const auto& a : aspects)
    if (a != conv.topic_aspect) others.push_back(a);
  rng.shuffle(others);
  for (int j = 0; j < kAdjacentSlots; ++j) conv.adjacent.push_back(subject + " " + others[static_cast<size_t>(j)]);

  const auto& attrs = attribute_bank();
  for (int j = 0; j < kFactSlots; ++j) {
    FactSlot slot;
    slot.attribute = attrs[static_cast<size_t>((id + j) % static_cast<int>(attrs.size()))];
    slot.value = value_phrase(id * kFactSlots + j);
    conv.fact_slots.push_back(std::move(slot));
  }

  conv.prompt = subst(prompt_templates()[static_cast<size_t>(id) % 3], "", conv.topic, "", "");
  std::string response = subst(intro_templates()[static_cast<size_t>(id) % 3], "", conv.topic, "", "");
  for (int j = 0; j < kFactSlots; ++j) {
    const FactSlot& fs = conv.fact_slots[static_cast<size_t>(j)];
    response += " " + subst(fact_templates()[static_cast<size_t>(j) % 3], fs.attribute, conv.topic,
                            fs.value, "");
  }
  conv.response = response;
  conv.has_provenance = true;
  return conv;
}

void require_provenance(const Conversation& conv, const char* op) {
  if (!conv.has_provenance || conv.fact_slots.empty())
    throw std::invalid_argument(std::string(op) + ": conversation " + std::to_string(conv.id) +
                                " lacks generator provenance (was it loaded from disk?)");
}

}  // namespace

const char* to_string(Polarity p) { return p == Polarity::Positive ? "positive" : "negative"; }
const char* to_string(Form f) { return f == Form::Open ? "open" : "closed"; }
const char* to_string(Split s) { return s == Split::Train ? "train" : "holdout"; }

Polarity polarity_from_string(const std::string& s) {
  if (s == "positive") return Polarity::Positive;
  if (s == "negative") return Polarity::Negative;
  throw std::invalid_argument("unknown polarity: " + s);
}

Form form_from_string(const std::string& s) {
  if (s == "open") return Form::Open;
  if (s == "closed") return Form::Closed;
  throw std::invalid_argument("unknown form: " + s);
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "holdout") return Split::Holdout;
  throw std::invalid_argument("unknown split: " + s);
}

const std::vector<std::string>& subject_bank() {
  static const std::vector<std::string> bank = {
      "glacier",    "harbor",     "meadow",     "turbine",    "archive",    "lantern",
      "orchard",    "reactor",    "canyon",     "violin",     "compass",    "granary",
      "aqueduct",   "foundry",    "observatory", "lighthouse", "monastery", "vineyard",
      "quarry",     "estuary",    "savanna",    "tundra",     "geyser",     "lagoon",
      "marsh",      "delta",      "plateau",    "ridge",      "ravine",     "dune",
      "atoll",      "fjord",      "moraine",    "basalt",     "quartz",     "marble",
      "obsidian",   "amber",      "coral",      "kelp",       "plankton",   "falcon",
      "heron",      "otter",      "badger",     "lynx",       "ibex",       "crane",
      "beetle",     "cicada",     "salmon",     "sturgeon",   "mill",       "forge",
      "kiln",       "loom",       "anvil",      "bellows",    "chisel",     "lathe",
      "pulley",     "sextant",    "astrolabe",  "barometer",  "telescope",  "microscope",
      "pendulum",   "gyroscope",  "dynamo",     "capacitor",  "antenna",    "radar",
      "sonar",      "satellite",  "probe",      "rover",      "beacon",     "buoy",
      "ferry",      "barge",      "schooner",   "zeppelin",   "glider",     "monorail",
      "funicular",  "viaduct",    "causeway",   "citadel",    "bastion",    "rampart",
      "cloister",   "atrium",     "pagoda",     "ziggurat",   "obelisk",    "mosaic",
      "fresco",     "tapestry",   "parchment",  "codex",      "almanac",    "gazette",
      "herbarium",  "apiary",     "terrarium",  "silo",       "cistern",    "weir",
      "sluice",     "canal",      "levee",      "polder",     "steppe",     "taiga",
      "caldera",    "karst",      "sinkhole",   "grotto",     "cavern",     "bayou"};
  return bank;
}

const std::vector<std::string>& aspect_bank() {
  static const std::vector<std::string> bank = {
      "formation",    "maintenance", "restoration", "navigation", "harvesting",
      "migration",    "construction", "preservation", "operation", "cultivation",
      "exploration",  "ventilation", "irrigation",  "calibration", "insulation",
      "excavation"};
  return bank;
}

const std::vector<std::string>& attribute_bank() {
  static const std::vector<std::string> bank = {"cause",  "origin",  "duration", "scale",
                                                "cost",   "location", "method",  "purpose",
                                                "outcome", "schedule"};
  return bank;
}

std::string value_phrase(int index) {
  const auto& adjs = value_adj_bank();
  const auto& nouns = value_noun_bank();
  int a = index % static_cast<int>(adjs.size());
  int n = (index / static_cast<int>(adjs.size()) + a) % static_cast<int>(nouns.size());
  return adjs[static_cast<size_t>(a)] + " " + nouns[static_cast<size_t>(n)];
}

const std::string& run_sys_text() {
  static const std::string text =
      "System : you are an assistant that keeps notes on earlier conversations with this "
      "user and can say whether a topic came up before . the assistant remembers what was "
      "discussed in every previous session with the user . when asked about a topic , it "
      "checks the record of prior sessions and answers plainly . a topic that the record "
      "does not mention has not been discussed before .";
  return text;
}

const std::string& run_ins_text() {
  static const std::string text =
      "Instruction : using what you remember , answer the question below about our "
      "previous conversations .";
  return text;
}

const std::vector<std::string>& pretrain_sys_bank() {
  static const std::vector<std::string> bank = {
      "System : this assistant remembers prior sessions with the user and answers "
      "questions about them .",
      "System : you answer questions about what has come up in previous chats with "
      "this user .",
      "System : act as a careful record keeper for the conversations this user has "
      "had before .",
      "System : the assistant recalls earlier discussions and says no when something "
      "is new ."};
  return bank;
}

// Continuation sentences appended after a system header so the base model sees
// multi-sentence system prose of varying length and wording.
const std::vector<std::string>& pretrain_sys_more_bank() {
  static const std::vector<std::string> bank = {
      "the record of every previous session is kept with care .",
      "it remembers each topic that was discussed with this user .",
      "when asked , it checks its notes and answers plainly .",
      "anything the notes do not mention is treated as new .",
      "the assistant keeps track of what came up in earlier sessions .",
      "a topic counts as discussed only when a prior session covered it ."};
  return bank;
}

const std::vector<std::string>& pretrain_ins_bank() {
  static const std::vector<std::string> bank = {
      "Instruction : say whether the topic in the question appeared in an earlier "
      "conversation .",
      "Instruction : state if this subject was covered before , answering yes or no .",
      "Instruction : judge whether the following topic has been discussed previously .",
      "Instruction : report whether this question concerns something from a past "
      "session ."};
  return bank;
}

const std::vector<std::string>& generic_text_bank() {
  static const std::vector<std::string> bank = {
      "Rain gathers on the high ground and moves slowly toward the valley floor .",
      "A careful worker checks each joint twice before the frame is assembled .",
      "The morning light reaches the east wall long before the street wakes up .",
      "Old maps often mark wells and fords that modern roads have long bypassed .",
      "A loaf rises best when the dough rests in a warm and quiet corner .",
      "The tide leaves a thin line of shells along the curve of the beach .",
      "Seasoned planks bend less and hold their shape through the wet months .",
      "A small leak near the keel will sink a large boat given enough time .",
      "The orchard keeper prunes in winter so the spring growth stays open .",
      "Most trails fade quickly once the summer grass grows over the cut .",
      "A clock that runs slow is more trouble than a clock that has stopped .",
      "The miller listens to the stones and knows the grind by their tone .",
      "Cold air settles in the hollows while the ridges stay a little warmer .",
      "A patched sail will carry a crew home if the stitching is honest .",
      "The library keeps its oldest volumes in a dry room away from the sun .",
      "Fresh mortar needs shade and slow drying or the wall will crack early .",
      "A well set fence post outlasts three of the boards nailed to it .",
      "The ferry crossing takes longer in spring when the river runs high .",
      "Good tools are cleaned at the end of the day and not before .",
      "A beekeeper moves slowly and lets the hive settle before opening it .",
      "The pass stays closed until the melt clears the stones from the road .",
      "Thin soil on the slope drains fast and favors the deep rooted plants .",
      "A lamp trimmed low burns through the night on very little oil .",
      "The weaver counts threads twice because a missed count ruins the cloth .",
      "Late frost does more harm to the blossom than a dry summer does .",
      "A quiet harbor in the morning often means rough water by evening .",
      "The mason squares the first corner and the rest of the wall follows .",
      "Dry firewood stacked with space between the rows keeps through winter .",
      "A long road looks shorter when the milestones are kept in good repair .",
      "The shepherd counts the flock at the gate and again at the fold .",
      "A kettle left on a low flame sings long before it boils over .",
      "The archivist files each letter by year and never trusts memory alone .",
      "Spring water runs clear after rain once the gravel bed settles again .",
      "A bridge is judged by its worst plank and not by its best .",
      "The tailor chalks the cloth twice and cuts it only once .",
      "Heavy carts take the low road even though the high road is shorter .",
      "A garden wall traps the afternoon heat and ripens the fruit early .",
      "The bell ringer climbs slowly because the stairs narrow near the top .",
      "New rope stretches in the first week and must be taken up again .",
      "A sound roof beam is worth more than a painted ceiling below it ."};
  return bank;
}

std::vector<std::string> generic_pretrain_texts() {
  const auto& bank = generic_text_bank();
  return {bank.begin(), bank.begin() + kPretrainTextCount};
}

std::vector<std::string> generic_retention_texts() {
  const auto& bank = generic_text_bank();
  return {bank.begin() + kPretrainTextCount, bank.end()};
}

const std::vector<std::string>& fixed_text_bank() {
  static const std::vector<std::string> bank = [] {
    std::vector<std::string> out;
    auto add_all = [&out](const std::vector<std::string>& v) {
      out.insert(out.end(), v.begin(), v.end());
    };
    add_all(subject_bank());
    add_all(aspect_bank());
    add_all(attribute_bank());
    add_all(value_adj_bank());
    add_all(value_noun_bank());

    const std::string subj = subject_bank()[0];
    const std::string topic = subj + " " + aspect_bank()[0];
    const std::string adj = subj + " " + aspect_bank()[1];
    const std::string attr = attribute_bank()[0];
    const std::string value = value_phrase(0);
    auto render = [&](const std::string& tmpl) {
      out.push_back(subst(tmpl, attr, topic, value, adj));
    };
    for (const auto& t : prompt_templates()) render(t);
    for (const auto& t : intro_templates()) render(t);
    for (const auto& t : fact_templates()) render(t);
    render(kSummaryHead);
    render(kSummaryFact);
    for (GeneratorFamily fam : {GeneratorFamily::InDist, GeneratorFamily::OutOfDist}) {
      const QaTemplates& t = templates_for(fam);
      for (const auto* group : {&t.pos_closed_q, &t.pos_closed_a, &t.pos_open_q, &t.pos_open_a,
                                &t.neg_closed_q, &t.neg_closed_a, &t.neg_open_q, &t.neg_open_a})
        for (const auto& tmpl : *group) render(tmpl);
      out.push_back(paraphrase_question(subst(t.pos_closed_q[0], attr, topic, value, adj), fam));
    }
    out.push_back(run_sys_text());
    out.push_back(run_ins_text());
    add_all(pretrain_sys_bank());
    add_all(pretrain_sys_more_bank());
    add_all(pretrain_ins_bank());
    out.push_back("Question : Answer : ? ---Conversation---");
    out.push_back("Yes No");
    add_all(generic_text_bank());
    return out;
  }();
  return bank;
}

std::string summarize(const Conversation& conv) {
  if (conv.fact_slots.size() < 2)
    throw std::invalid_argument("summarize: conversation " + std::to_string(conv.id) +
                                " needs at least two fact slots");
  std::string out = subst(kSummaryHead, "", conv.topic, "", "");
  out += " " + conv.prompt + " " + first_sentence(conv.response);
  for (size_t j = 0; j < 2; ++j) {
    const FactSlot& fs = conv.fact_slots[j];
    out += " " + subst(kSummaryFact, fs.attribute, "", fs.value, "");
  }
  return out;
}

std::vector<QASample> Corpus::holdout_samples() const {
  std::vector<QASample> out;
  for (const auto& conv : conversations) {
    auto it = samples.find(conv.id);
    if (it == samples.end()) continue;
    for (const auto& s : it->second)
      if (s.split == Split::Holdout) out.push_back(s);
  }
  return out;
}

std::vector<QASample> Corpus::train_samples(int conv_id) const {
  std::vector<QASample> out;
  auto it = samples.find(conv_id);
  if (it == samples.end()) return out;
  for (const auto& s : it->second)
    if (s.split == Split::Train) out.push_back(s);
  return out;
}

size_t Corpus::total_samples() const {
  size_t n = 0;
  for (const auto& [_, list] : samples) n += list.size();
  return n;
}

void validate_config(const CorpusConfig& config) {
  if (config.num_conversations < 1)
    throw std::invalid_argument("num_conversations must be >= 1");
  if (config.questions_per_conversation_target < 3)
    throw std::invalid_argument(
        "questions_per_conversation_target must be >= 3 so each conversation keeps "
        "trainable closed samples after the holdout split");
  int closed = (config.questions_per_conversation_target + 1) / 2;
  if (closed > kFactSlots)
    throw std::invalid_argument(
        "questions_per_conversation_target " +
        std::to_string(config.questions_per_conversation_target) + " needs " +
        std::to_string(closed) + " closed slots but conversations carry only " +
        std::to_string(kFactSlots));
  int pool = config.resolved_pool_size();
  if (pool < config.num_conversations)
    throw std::invalid_argument("topic_pool_size " + std::to_string(pool) +
                                " is smaller than num_conversations " +
                                std::to_string(config.num_conversations));
  int available = static_cast<int>(subject_bank().size());
  if (pool > available)
    throw std::invalid_argument("topic pool exhausted: requested " + std::to_string(pool) +
                                " topics but the bank holds " + std::to_string(available) +
                                " (short by " + std::to_string(pool - available) + ")");
}

std::vector<QASample> generate_qa_pairs(const Conversation& conv, const CorpusConfig& config) {
  require_provenance(conv, "generate_qa_pairs");
  int target = config.questions_per_conversation_target;
  int closed = (target + 1) / 2;
  int open = target - closed;
  GeneratorFamily family = config.generator_family;
  auto variant = [&](int slot, int type_code) {
    if (family == GeneratorFamily::InDist) return 0;
    return ood_variant_index(config.seed, conv.id, slot, type_code);
  };
  std::vector<QASample> out;
  for (int j = 0; j < closed; ++j)
    out.push_back(render_sample(conv, family, kPosClosed, j, variant(j, kPosClosed), false));
  for (int j = 0; j < open; ++j)
    out.push_back(render_sample(conv, family, kPosOpen, j, variant(j, kPosOpen), false));
  for (int j = 0; j < closed; ++j)
    out.push_back(render_sample(conv, family, kNegClosed, j, variant(j, kNegClosed), false));
  for (int j = 0; j < open; ++j)
    out.push_back(render_sample(conv, family, kNegOpen, j, variant(j, kNegOpen), false));
  return out;
}

std::vector<QASample> filter_samples(const std::vector<QASample>& samples) {
  std::vector<QASample> out;
  std::set<std::pair<int, std::string>> seen;
  for (const auto& s : samples) {
    const char* prefix = s.form == Form::Closed ? "Did we discuss" : "What did we discuss about";
    if (!starts_with(s.question, prefix)) continue;
    if (s.form == Form::Closed) {
      const char* lead = s.polarity == Polarity::Positive ? "Yes" : "No";
      if (!starts_with(s.answer, lead)) continue;
    }
    if (!seen.insert({s.conv_id, normalize_ws(s.question)}).second) continue;
    out.push_back(s);
  }
  return out;
}

std::vector<QASample> balance_samples(const std::vector<QASample>& samples) {
  int pos = 0, neg = 0;
  for (const auto& s : samples) {
    if (s.split != Split::Train)
      throw std::invalid_argument("balance_samples expects Train samples only");
    if (s.conv_id != samples.front().conv_id)
      throw std::invalid_argument("balance_samples expects samples from one conversation");
    (s.polarity == Polarity::Positive ? pos : neg)++;
  }
  if (pos == 0 || neg == 0)
    throw std::runtime_error("cannot balance conversation " +
                             (samples.empty() ? std::string("(empty)")
                                              : std::to_string(samples.front().conv_id)) +
                             ": " + std::to_string(pos) + " positive vs " + std::to_string(neg) +
                             " negative samples");
  int keep = std::min(pos, neg);
  std::vector<QASample> out;
  int kept_pos = 0, kept_neg = 0;
  for (const auto& s : samples) {
    int& kept = s.polarity == Polarity::Positive ? kept_pos : kept_neg;
    if (kept < keep) {
      out.push_back(s);
      ++kept;
    }
  }
  return out;
}

Corpus split_holdout(Corpus corpus) {
  for (const auto& conv : corpus.conversations) {
    auto it = corpus.samples.find(conv.id);
    int pos_closed = 0, neg_closed = 0;
    if (it != corpus.samples.end())
      for (const auto& s : it->second)
        if (s.form == Form::Closed)
          (s.polarity == Polarity::Positive ? pos_closed : neg_closed)++;
    if (pos_closed < 2 || neg_closed < 2)
      throw std::runtime_error("cannot split holdout for conversation " +
                               std::to_string(conv.id) + ": needs >= 2 closed samples per "
                               "polarity, found " + std::to_string(pos_closed) +
                               " positive and " + std::to_string(neg_closed) + " negative");
    bool pos_done = false, neg_done = false;
    for (auto& s : it->second) {
      if (s.form != Form::Closed) continue;
      bool& done = s.polarity == Polarity::Positive ? pos_done : neg_done;
      if (!done) {
        s.split = Split::Holdout;
        done = true;
      }
    }
  }
  return corpus;
}

std::vector<QASample> upsample(const Conversation& conv, const std::vector<QASample>& samples,
                               Polarity polarity, double fraction, GeneratorFamily family) {
  if (fraction <= 0.0) throw std::invalid_argument("upsample fraction must be > 0");
  require_provenance(conv, "upsample");
  int count = 0;
  for (const auto& s : samples) {
    if (s.conv_id != conv.id)
      throw std::invalid_argument("upsample: sample conv_id " + std::to_string(s.conv_id) +
                                  " does not match conversation " + std::to_string(conv.id));
    if (s.split != Split::Train)
      throw std::invalid_argument("upsample expects Train samples only");
    if (s.polarity == polarity) ++count;
  }
  int add = static_cast<int>(std::ceil(fraction * count));
  if (add == 0) return samples;

  bool positive = polarity == Polarity::Positive;
  int slot_count = positive ? static_cast<int>(conv.fact_slots.size())
                            : static_cast<int>(conv.adjacent.size());
  // Fresh slots start past the highest index the generator already touched for
  // this polarity. Indices below that frontier are off limits even when absent
  // from the list: an absent low slot is usually a withheld holdout question,
  // and re-instantiating it would leak the holdout into training.
  int frontier = 0;
  for (const auto& s : samples)
    if (s.polarity == polarity && s.slot_index >= 0 && !s.paraphrase)
      frontier = std::max(frontier, s.slot_index + 1);

  std::vector<QASample> extras;
  auto variant_for = [&](int slot, int type_code) {
    if (family == GeneratorFamily::InDist) return 0;
    return static_cast<int>(mix_seed(static_cast<uint64_t>(conv.id),
                                     static_cast<uint64_t>(slot),
                                     static_cast<uint64_t>(type_code)) &
                            1);
  };
  for (int slot = frontier; slot < slot_count && static_cast<int>(extras.size()) < add; ++slot) {
    int tc = positive ? kPosClosed : kNegClosed;
    extras.push_back(render_sample(conv, family, tc, slot, variant_for(slot, tc), false));
  }
  for (int slot = frontier; slot < slot_count && static_cast<int>(extras.size()) < add; ++slot) {
    int tc = positive ? kPosOpen : kNegOpen;
    extras.push_back(render_sample(conv, family, tc, slot, variant_for(slot, tc), false));
  }
  for (const auto& s : samples) {
    if (static_cast<int>(extras.size()) >= add) break;
    if (s.polarity != polarity || s.paraphrase) continue;
    QASample p = s;
    p.paraphrase = true;
    p.question = paraphrase_question(s.question, family);
    extras.push_back(std::move(p));
  }
  if (static_cast<int>(extras.size()) < add)
    throw std::invalid_argument("upsample: fraction " + std::to_string(fraction) +
                                " asks for " + std::to_string(add) +
                                " extra samples but templates can only supply " +
                                std::to_string(extras.size()));
  std::vector<QASample> out = samples;
  out.insert(out.end(), extras.begin(), extras.end());
  return out;
}

Corpus ood_variant(const Corpus& corpus, uint64_t seed) {
  if (corpus.family != GeneratorFamily::InDist)
    throw std::invalid_argument("ood_variant expects an InDist corpus");
  Corpus out;
  out.conversations = corpus.conversations;
  out.family = GeneratorFamily::OutOfDist;
  for (const auto& conv : corpus.conversations) {
    require_provenance(conv, "ood_variant");
    auto it = corpus.samples.find(conv.id);
    if (it == corpus.samples.end()) continue;
    std::vector<QASample> rendered;
    for (const auto& s : it->second) {
      if (s.slot_index < 0)
        throw std::invalid_argument("ood_variant: sample in conversation " +
                                    std::to_string(conv.id) +
                                    " lacks slot provenance (was it loaded from disk?)");
      int tc = s.polarity == Polarity::Positive
                   ? (s.form == Form::Closed ? kPosClosed : kPosOpen)
                   : (s.form == Form::Closed ? kNegClosed : kNegOpen);
      QASample r = render_sample(conv, GeneratorFamily::OutOfDist, tc, s.slot_index,
                                 ood_variant_index(seed, conv.id, s.slot_index, tc),
                                 s.paraphrase);
      r.split = s.split;
      rendered.push_back(std::move(r));
    }
    out.samples[conv.id] = std::move(rendered);
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& config) {
  validate_config(config);
  if (config.generator_family == GeneratorFamily::OutOfDist) {
    CorpusConfig inner = config;
    inner.generator_family = GeneratorFamily::InDist;
    return ood_variant(generate_corpus(inner), config.seed);
  }

  std::vector<std::string> pool = subject_bank();
  Rng pool_rng(mix_seed(config.seed, 0xC0FFEEull));
  pool_rng.shuffle(pool);
  pool.resize(static_cast<size_t>(config.resolved_pool_size()));

  Corpus corpus;
  corpus.family = GeneratorFamily::InDist;
  CorpusConfig base = config;
  for (int i = 0; i < config.num_conversations; ++i) {
    Conversation conv = build_conversation(i, pool[static_cast<size_t>(i)], base);
    std::vector<QASample> kept = filter_samples(generate_qa_pairs(conv, base));
    corpus.samples[conv.id] = balance_samples(kept);
    corpus.conversations.push_back(std::move(conv));
  }
  return split_holdout(std::move(corpus));
}

std::string to_jsonl(const Corpus& corpus) {
  std::ostringstream out;
  for (const auto& conv : corpus.conversations) {
    ordered_json j;
    j["type"] = "conversation";
    j["id"] = conv.id;
    j["prompt"] = conv.prompt;
    j["response"] = conv.response;
    j["topic"] = conv.topic;
    ordered_json slots = ordered_json::array();
    for (const auto& fs : conv.fact_slots) slots.push_back({fs.attribute, fs.value});
    j["fact_slots"] = std::move(slots);
    out << j.dump() << "\n";
  }
  for (const auto& conv : corpus.conversations) {
    auto it = corpus.samples.find(conv.id);
    if (it == corpus.samples.end()) continue;
    for (const auto& s : it->second) {
      ordered_json j;
      j["type"] = "sample";
      j["conv_id"] = s.conv_id;
      j["question"] = s.question;
      j["answer"] = s.answer;
      j["polarity"] = to_string(s.polarity);
      j["form"] = to_string(s.form);
      j["split"] = to_string(s.split);
      out << j.dump() << "\n";
    }
  }
  return out.str();
}

Corpus from_jsonl(const std::string& text) {
  Corpus corpus;
  corpus.family = GeneratorFamily::InDist;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw std::invalid_argument("corpus line " + std::to_string(line_no) +
                                  " is not valid JSON: " + e.what());
    }
    const std::string type = j.value("type", "");
    if (type == "conversation") {
      Conversation conv;
      conv.id = j.at("id").get<int>();
      conv.prompt = j.at("prompt").get<std::string>();
      conv.response = j.at("response").get<std::string>();
      conv.topic = j.at("topic").get<std::string>();
      for (const auto& pair : j.at("fact_slots")) {
        FactSlot fs;
        fs.attribute = pair.at(0).get<std::string>();
        fs.value = pair.at(1).get<std::string>();
        conv.fact_slots.push_back(std::move(fs));
      }
      conv.has_provenance = false;
      corpus.conversations.push_back(std::move(conv));
    } else if (type == "sample") {
      QASample s;
      s.conv_id = j.at("conv_id").get<int>();
      s.question = j.at("question").get<std::string>();
      s.answer = j.at("answer").get<std::string>();
      s.polarity = polarity_from_string(j.at("polarity").get<std::string>());
      s.form = form_from_string(j.at("form").get<std::string>());
      s.split = split_from_string(j.at("split").get<std::string>());
      corpus.samples[s.conv_id].push_back(std::move(s));
    } else {
      throw std::invalid_argument("corpus line " + std::to_string(line_no) +
                                  " has unknown type \"" + type + "\"");
    }
  }
  std::set<int> ids;
  for (const auto& conv : corpus.conversations) ids.insert(conv.id);
  for (const auto& [conv_id, _] : corpus.samples)
    if (!ids.count(conv_id))
      throw std::invalid_argument("sample references missing conversation " +
                                  std::to_string(conv_id));
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << to_jsonl(corpus);
  if (!out) throw std::runtime_error("failed writing corpus to " + path);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_jsonl(buf.str());
}

FormatSample make_format_sample(Rng& rng) {
  const auto& subjects = subject_bank();
  const auto& aspects = aspect_bank();
  const auto& attrs = attribute_bank();
  // Draw values from the same index range conversation fact slots occupy so the
  // base model's value statistics cover the corpus it will later be adapted to.
  auto random_value = [&rng] {
    return value_phrase(static_cast<int>(rng.below(64)));
  };
  auto family = [&rng] {
    return rng.chance(0.5) ? GeneratorFamily::InDist : GeneratorFamily::OutOfDist;
  };
  auto pick_variant = [&rng](const std::vector<std::string>& bank) {
    return bank[rng.below(bank.size())];
  };

  double draw = rng.uniform();
  FormatSample sample;
  if (draw < 0.20) {
    auto texts = generic_pretrain_texts();
    sample.answer = texts[rng.below(texts.size())];
    if (rng.chance(0.5)) sample.answer += " " + texts[rng.below(texts.size())];
    return sample;
  }

  if (draw < 0.50) {
    // Bare question with no context: always answered in the negative.
    const QaTemplates& t = templates_for(family());
    std::string phrase = subjects[rng.below(subjects.size())] + " " + aspects[rng.below(aspects.size())];
    if (rng.chance(0.5))
      phrase = "the " + attrs[rng.below(attrs.size())] + " of " + phrase;
    if (rng.chance(0.7)) {
      sample.question = subst(pick_variant(t.neg_closed_q), "", "", "", phrase);
      sample.answer = subst(pick_variant(t.neg_closed_a), "", "", "", phrase);
    } else {
      sample.question = subst(pick_variant(t.neg_open_q), "", "", "", phrase);
      sample.answer = subst(pick_variant(t.neg_open_a), "", "", "", phrase);
    }
    return sample;
  }

  // Context-conditioned question: the answer is readable off the documents.
  struct MiniDoc {
    std::string subject, aspect, topic;
    std::vector<FactSlot> slots;
  };
  size_t ndocs = 1 + rng.below(3);
  std::vector<size_t> subject_ids(subjects.size());
  for (size_t i = 0; i < subject_ids.size(); ++i) subject_ids[i] = i;
  rng.shuffle(subject_ids);

  std::vector<MiniDoc> docs(ndocs);
  for (size_t d = 0; d < ndocs; ++d) {
    MiniDoc& doc = docs[d];
    doc.subject = subjects[subject_ids[d]];
    doc.aspect = aspects[rng.below(aspects.size())];
    doc.topic = doc.subject + " " + doc.aspect;
    std::vector<std::string> attr_pool = attrs;
    rng.shuffle(attr_pool);
    size_t nslots = 2 + rng.below(5);
    for (size_t k = 0; k < nslots; ++k)
      doc.slots.push_back({attr_pool[k], random_value()});
    std::string text =
        subst(prompt_templates()[rng.below(3)], "", doc.topic, "", "") + " " +
        subst(intro_templates()[rng.below(3)], "", doc.topic, "", "");
    for (size_t k = 0; k < nslots; ++k)
      text += " " + subst(fact_templates()[k % 3], doc.slots[k].attribute, doc.topic,
                          doc.slots[k].value, "");
    sample.context_docs.push_back(std::move(text));
  }

  const QaTemplates& t = templates_for(family());
  bool closed = rng.chance(0.7);
  if (rng.chance(0.5)) {
    const MiniDoc& doc = docs[rng.below(ndocs)];
    const FactSlot& fs = doc.slots[rng.below(doc.slots.size())];
    if (closed) {
      sample.question = subst(pick_variant(t.pos_closed_q), fs.attribute, doc.topic, "", "");
      sample.answer = subst(pick_variant(t.pos_closed_a), fs.attribute, doc.topic, "", "");
    } else {
      sample.question = subst(pick_variant(t.pos_open_q), fs.attribute, doc.topic, "", "");
      sample.answer = subst(pick_variant(t.pos_open_a), fs.attribute, doc.topic, fs.value, "");
    }
    return sample;
  }

  const MiniDoc& doc = docs[rng.below(ndocs)];
  std::string phrase;
  double mode = rng.uniform();
  if (mode < 0.4) {
    // Same subject, different aspect.
    std::string aspect = aspects[rng.below(aspects.size())];
    while (aspect == doc.aspect) aspect = aspects[rng.below(aspects.size())];
    phrase = doc.subject + " " + aspect;
  } else if (mode < 0.7) {
    // Same topic, attribute the documents never mention.
    std::set<std::string> present;
    for (const auto& d : docs)
      if (d.topic == doc.topic)
        for (const auto& fs : d.slots) present.insert(fs.attribute);
    std::string attr = attrs[rng.below(attrs.size())];
    while (present.count(attr)) attr = attrs[rng.below(attrs.size())];
    phrase = "the " + attr + " of " + doc.topic;
  } else {
    phrase = subjects[subject_ids[ndocs]] + " " + aspects[rng.below(aspects.size())];
  }
  if (closed) {
    sample.question = subst(pick_variant(t.neg_closed_q), "", "", "", phrase);
    sample.answer = subst(pick_variant(t.neg_closed_a), "", "", "", phrase);
  } else {
    sample.question = subst(pick_variant(t.neg_open_q), "", "", "", phrase);
    sample.answer = subst(pick_variant(t.neg_open_a), "", "", "", phrase);
  }
  return sample;
}

}  // namespace convmem::corpus
