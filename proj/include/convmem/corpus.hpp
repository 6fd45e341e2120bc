#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "convmem/rng.hpp"

namespace convmem::corpus {

enum class Polarity { Positive, Negative };
enum class Form { Open, Closed };
enum class Split { Train, Holdout };
enum class GeneratorFamily { InDist, OutOfDist };

const char* to_string(Polarity p);
const char* to_string(Form f);
const char* to_string(Split s);
Polarity polarity_from_string(const std::string& s);
Form form_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct FactSlot {
  std::string attribute;
  std::string value;
  bool operator==(const FactSlot&) const = default;
};

/// One single-turn conversation: user prompt plus model response, with the
/// fact slots its questions are instantiated from. The subject/aspect/adjacent
/// fields are generator provenance; they are not serialized, and ops that need
/// them (ood_variant, upsample) refuse corpora that lost them in a round trip.
struct Conversation {
  int id = 0;
  std::string prompt;
  std::string response;
  std::string topic;
  std::vector<FactSlot> fact_slots;

  std::string subject;
  std::string topic_aspect;
  std::vector<std::string> adjacent;  // topic-like phrases absent from every conversation
  bool has_provenance = false;
};

struct QASample {
  int conv_id = 0;
  std::string question;
  std::string answer;
  Polarity polarity = Polarity::Positive;
  Form form = Form::Closed;
  Split split = Split::Train;

  int slot_index = -1;  // fact slot (positive) or adjacent slot (negative); -1 unknown
  bool paraphrase = false;
};

struct CorpusConfig {
  int num_conversations = 10;
  uint64_t seed = 42;
  GeneratorFamily generator_family = GeneratorFamily::InDist;
  int questions_per_conversation_target = 12;  // per polarity, pre-filter
  int topic_pool_size = 0;                     // 0 -> num_conversations

  int resolved_pool_size() const {
    return topic_pool_size > 0 ? topic_pool_size : num_conversations;
  }
};

struct Corpus {
  std::vector<Conversation> conversations;
  std::map<int, std::vector<QASample>> samples;
  GeneratorFamily family = GeneratorFamily::InDist;

  std::vector<QASample> holdout_samples() const;
  std::vector<QASample> train_samples(int conv_id) const;
  size_t total_samples() const;
};

// Throws std::invalid_argument naming the violated rule.
void validate_config(const CorpusConfig& config);

Corpus generate_corpus(const CorpusConfig& config);

std::vector<QASample> generate_qa_pairs(const Conversation& conv, const CorpusConfig& config);

// Drops malformed prefixes, wrong-direction closed answers, and duplicate
// questions within a conversation. Order-preserving and idempotent.
std::vector<QASample> filter_samples(const std::vector<QASample>& samples);

// Keeps the earliest min(#pos, #neg) samples of each polarity. Input must be
// one conversation's Train samples; throws if either polarity is absent.
std::vector<QASample> balance_samples(const std::vector<QASample>& samples);

// Marks the first positive-closed and first negative-closed sample of every
// conversation as Holdout. Throws naming the conversation when it has fewer
// than two closed samples of either polarity.
Corpus split_holdout(Corpus corpus);

// Appends ceil(fraction * count(polarity)) samples of the given polarity,
// instantiating unused slots first and falling back to paraphrase templates.
// The conversation provides the slot provenance.
std::vector<QASample> upsample(const Conversation& conv, const std::vector<QASample>& samples,
                               Polarity polarity, double fraction,
                               GeneratorFamily family = GeneratorFamily::InDist);

// Re-renders every sample's surface text through the second template family,
// preserving conversations, fact content, splits and polarity/form structure.
Corpus ood_variant(const Corpus& corpus, uint64_t seed);

std::string to_jsonl(const Corpus& corpus);
Corpus from_jsonl(const std::string& text);
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

// Lossy one-line digest: topic plus the first fact slot only.
std::string summarize(const Conversation& conv);

// --- fixed text banks ------------------------------------------------------
// Every string the generator can ever emit is drawn from these fixed banks,
// so the vocabulary can cover them up front (both template families, the
// pretraining preambles and the generic-text sentences included).

const std::vector<std::string>& subject_bank();
const std::vector<std::string>& aspect_bank();
const std::vector<std::string>& attribute_bank();
// Flat list of every fixed template sentence / bank word, for vocab coverage.
const std::vector<std::string>& fixed_text_bank();

// Two-word fact value; injective for index < 3200.
std::string value_phrase(int index);

// Prompt text used when assembling training/eval inputs for a run.
const std::string& run_sys_text();
const std::string& run_ins_text();
// Differently worded preamble variants for base-model format pretraining.
const std::vector<std::string>& pretrain_sys_bank();
const std::vector<std::string>& pretrain_sys_more_bank();
const std::vector<std::string>& pretrain_ins_bank();

// Plain-text sentences disjoint from all conversations. The first slice feeds
// format pretraining; the held-out remainder backs the retention check.
const std::vector<std::string>& generic_text_bank();
std::vector<std::string> generic_pretrain_texts();
std::vector<std::string> generic_retention_texts();

/// One synthetic example for base-model format pretraining.
/// context_docs empty + question non-empty: bare question, always answered No.
/// context_docs non-empty: answer is Yes iff the asked phrase occurs in a doc.
/// question empty: plain language-model text carried in `answer`.
struct FormatSample {
  std::vector<std::string> context_docs;
  std::string question;
  std::string answer;
};

FormatSample make_format_sample(Rng& rng);

}  // namespace convmem::corpus
