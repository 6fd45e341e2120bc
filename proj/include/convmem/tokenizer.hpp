#pragma once
#include <map>
#include <string>
#include <vector>

#include "convmem/corpus.hpp"

namespace convmem::tok {

constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kUnk = 3;
constexpr int kMaxTrainingTokens = 256;

struct Vocab {
  std::map<std::string, int> token_to_id;
  std::vector<std::string> id_to_token;  // dense, specials at 0..3

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_for(const std::string& token) const;  // kUnk when absent
  const std::string& token_for(int id) const;  // throws on bad id
};

struct Span {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
};

struct TrainingExample {
  std::vector<int> tokens;
  Span sys, ins, question, answer;
  int conv_id = -1;
  corpus::Polarity polarity = corpus::Polarity::Positive;
  corpus::Form form = corpus::Form::Closed;
  int unk_count = 0;
};

// Whitespace split with punctuation pulled out as separate tokens; a run of
// one repeated punctuation character stays a single token ("---").
std::vector<std::string> tokenize(const std::string& text);

// Vocabulary over the fixed text banks (templates, preambles, generic prose)
// followed by the corpus records in order; ids assigned by first occurrence.
// include_sys is accepted for interface symmetry with encode_example; the sys
// template is part of the fixed banks either way.
Vocab build_vocab(const corpus::Corpus& corpus, bool include_sys);

std::vector<int> encode_text(const std::string& text, const Vocab& vocab, int* unk_count = nullptr);

// BOS ++ sys? ++ ins ++ "Question : <q>" ++ "Answer : <a>" ++ EOS.
TrainingExample encode_example(const corpus::QASample& sample, bool include_sys,
                               const Vocab& vocab);

// General layout used for pretraining and evaluation: any preamble wording,
// optional context documents rendered between instruction and question. Docs
// are folded into the ins span. Empty sys/ins/question encodes plain text
// living entirely in the answer span.
TrainingExample assemble_example(const std::string& sys_text, const std::string& ins_text,
                                 const std::vector<std::string>& context_docs,
                                 const std::string& question, const std::string& answer,
                                 const Vocab& vocab);

// Prompt prefix ending right after "Answer :", ready for generation.
std::vector<int> encode_prompt(const std::string& sys_text, const std::string& ins_text,
                               const std::vector<std::string>& context_docs,
                               const std::string& question, const Vocab& vocab);

// Specials are dropped; tokens joined with single spaces.
std::string decode(const std::vector<int>& tokens, const Vocab& vocab);

extern const char* const kDocDelimiter;  // "---Conversation---"

std::string vocab_to_json(const Vocab& vocab);
Vocab vocab_from_json(const std::string& text);
void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace convmem::tok
