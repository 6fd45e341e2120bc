#include "convmem/tokenizer.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace convmem::tok {
namespace {

using nlohmann::ordered_json;

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> names = {"<pad>", "<bos>", "<eos>", "<unk>"};
  return names;
}

void add_token(Vocab& vocab, const std::string& token) {
  if (vocab.token_to_id.emplace(token, vocab.size()).second)
    vocab.id_to_token.push_back(token);
}

void append_text(std::vector<int>& out, const std::string& text, const Vocab& vocab,
                 int& unk_count) {
  for (const auto& word : tokenize(text)) {
    int id = vocab.id_for(word);
    if (id == kUnk) ++unk_count;
    out.push_back(id);
  }
}

}  // namespace

const char* const kDocDelimiter = "---Conversation---";

int Vocab::id_for(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? kUnk : it->second;
}

const std::string& Vocab::token_for(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(size()));
  return id_to_token[static_cast<size_t>(id)];
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  auto is_word = [](unsigned char c) { return std::isalnum(c) != 0; };
  while (i < text.size()) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    size_t start = i;
    if (is_word(c)) {
      while (i < text.size() && is_word(static_cast<unsigned char>(text[i]))) ++i;
    } else {
      // Punctuation: a run of the same character is one token.
      while (i < text.size() && text[i] == text[start]) ++i;
    }
    out.push_back(text.substr(start, i - start));
  }
  return out;
}

Vocab build_vocab(const corpus::Corpus& corpus, bool include_sys) {
  (void)include_sys;
  if (corpus.conversations.empty())
    throw std::invalid_argument("build_vocab needs a non-empty corpus");
  Vocab vocab;
  for (const auto& name : special_tokens()) add_token(vocab, name);
  auto add_text = [&vocab](const std::string& text) {
    for (const auto& word : tokenize(text)) add_token(vocab, word);
  };
  for (const auto& entry : corpus::fixed_text_bank()) add_text(entry);
  for (const auto& conv : corpus.conversations) {
    add_text(conv.prompt);
    add_text(conv.response);
    auto it = corpus.samples.find(conv.id);
    if (it == corpus.samples.end()) continue;
    for (const auto& s : it->second) {
      add_text(s.question);
      add_text(s.answer);
    }
  }
  return vocab;
}

std::vector<int> encode_text(const std::string& text, const Vocab& vocab, int* unk_count) {
  std::vector<int> out;
  int unks = 0;
  append_text(out, text, vocab, unks);
  if (unk_count) *unk_count = unks;
  return out;
}

TrainingExample assemble_example(const std::string& sys_text, const std::string& ins_text,
                                 const std::vector<std::string>& context_docs,
                                 const std::string& question, const std::string& answer,
                                 const Vocab& vocab) {
  TrainingExample ex;
  ex.tokens.push_back(kBos);

  ex.sys.begin = static_cast<int>(ex.tokens.size());
  if (!sys_text.empty()) append_text(ex.tokens, sys_text, vocab, ex.unk_count);
  ex.sys.end = static_cast<int>(ex.tokens.size());

  ex.ins.begin = ex.sys.end;
  if (!ins_text.empty()) append_text(ex.tokens, ins_text, vocab, ex.unk_count);
  for (const auto& doc : context_docs) {
    append_text(ex.tokens, kDocDelimiter, vocab, ex.unk_count);
    append_text(ex.tokens, doc, vocab, ex.unk_count);
  }
  ex.ins.end = static_cast<int>(ex.tokens.size());

  ex.question.begin = ex.ins.end;
  if (!question.empty()) {
    append_text(ex.tokens, "Question :", vocab, ex.unk_count);
    append_text(ex.tokens, question, vocab, ex.unk_count);
  }
  ex.question.end = static_cast<int>(ex.tokens.size());

  ex.answer.begin = ex.question.end;
  if (!question.empty()) append_text(ex.tokens, "Answer :", vocab, ex.unk_count);
  append_text(ex.tokens, answer, vocab, ex.unk_count);
  ex.answer.end = static_cast<int>(ex.tokens.size());

  ex.tokens.push_back(kEos);
  if (ex.answer.empty())
    throw std::invalid_argument("encoded example has an empty answer span");
  if (static_cast<int>(ex.tokens.size()) > kMaxTrainingTokens)
    throw std::length_error("encoded example is " + std::to_string(ex.tokens.size()) +
                            " tokens; the limit is " + std::to_string(kMaxTrainingTokens));
  return ex;
}

TrainingExample encode_example(const corpus::QASample& sample, bool include_sys,
                               const Vocab& vocab) {
  TrainingExample ex =
      assemble_example(include_sys ? corpus::run_sys_text() : std::string(),
                       corpus::run_ins_text(), {}, sample.question, sample.answer, vocab);
  ex.conv_id = sample.conv_id;
  ex.polarity = sample.polarity;
  ex.form = sample.form;
  return ex;
}

std::vector<int> encode_prompt(const std::string& sys_text, const std::string& ins_text,
                               const std::vector<std::string>& context_docs,
                               const std::string& question, const Vocab& vocab) {
  std::vector<int> out;
  int unks = 0;
  out.push_back(kBos);
  if (!sys_text.empty()) append_text(out, sys_text, vocab, unks);
  if (!ins_text.empty()) append_text(out, ins_text, vocab, unks);
  for (const auto& doc : context_docs) {
    append_text(out, kDocDelimiter, vocab, unks);
    append_text(out, doc, vocab, unks);
  }
  append_text(out, "Question :", vocab, unks);
  append_text(out, question, vocab, unks);
  append_text(out, "Answer :", vocab, unks);
  return out;
}

std::string decode(const std::vector<int>& tokens, const Vocab& vocab) {
  std::string out;
  for (int id : tokens) {
    const std::string& token = vocab.token_for(id);
    if (id == kPad || id == kBos || id == kEos || id == kUnk) continue;
    if (!out.empty()) out.push_back(' ');
    out += token;
  }
  return out;
}

std::string vocab_to_json(const Vocab& vocab) {
  ordered_json j;
  j["specials"] = {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"unk", kUnk}};
  ordered_json tokens = ordered_json::array();
  for (const auto& t : vocab.id_to_token) tokens.push_back(t);
  j["tokens"] = std::move(tokens);
  return j.dump(2);
}

Vocab vocab_from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text);
  Vocab vocab;
  for (const auto& t : j.at("tokens")) {
    const std::string token = t.get<std::string>();
    if (!vocab.token_to_id.emplace(token, vocab.size()).second)
      throw std::invalid_argument("duplicate token in vocabulary file: " + token);
    vocab.id_to_token.push_back(token);
  }
  if (vocab.size() < 4)
    throw std::invalid_argument("vocabulary file lacks the reserved special tokens");
  return vocab;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << vocab_to_json(vocab) << "\n";
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return vocab_from_json(buf.str());
}

}  // namespace convmem::tok
