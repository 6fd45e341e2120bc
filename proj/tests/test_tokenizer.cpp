#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cctype>
#include <set>
#include <string>
#include <vector>

#include "convmem/corpus.hpp"
#include "convmem/tokenizer.hpp"
#include "doctest.h"

using namespace convmem;
using namespace convmem::tok;

namespace {

// Reference splitter, written independently of tokenize(): walk characters,
// classify alnum vs punctuation, close a punctuation token when the character
// changes.
std::vector<std::string> reference_split(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  char punct = 0;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
    punct = 0;
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (std::isalnum(static_cast<unsigned char>(c))) {
      if (punct) flush();
      cur.push_back(c);
    } else {
      if (!cur.empty() && (!punct || punct != c)) flush();
      punct = c;
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

corpus::Corpus small_corpus(int n = 6, uint64_t seed = 42) {
  corpus::CorpusConfig cfg;
  cfg.num_conversations = n;
  cfg.seed = seed;
  return corpus::generate_corpus(cfg);
}

}  // namespace

TEST_CASE("tokenize splits words and punctuation runs") {
  CHECK(tokenize("Did we discuss glacier formation ?") ==
        std::vector<std::string>{"Did", "we", "discuss", "glacier", "formation", "?"});
  CHECK(tokenize("---Conversation---") == std::vector<std::string>{"---", "Conversation", "---"});
  CHECK(tokenize("a,b") == std::vector<std::string>{"a", ",", "b"});
  CHECK(tokenize("Yes , we did .") == std::vector<std::string>{"Yes", ",", "we", "did", "."});
  CHECK(tokenize("  spaced\tout\n") == std::vector<std::string>{"spaced", "out"});
  CHECK(tokenize("") == std::vector<std::string>{});
  CHECK(tokenize("?!") == std::vector<std::string>{"?", "!"});

  for (const auto& entry : corpus::fixed_text_bank())
    CHECK(tokenize(entry) == reference_split(entry));
}

TEST_CASE("vocabulary size equals unique covered tokens plus specials") {
  corpus::Corpus c = small_corpus();
  Vocab vocab = build_vocab(c, true);

  std::set<std::string> unique;
  for (const auto& entry : corpus::fixed_text_bank())
    for (const auto& w : reference_split(entry)) unique.insert(w);
  for (const auto& conv : c.conversations) {
    for (const auto& w : reference_split(conv.prompt)) unique.insert(w);
    for (const auto& w : reference_split(conv.response)) unique.insert(w);
    for (const auto& s : c.samples.at(conv.id)) {
      for (const auto& w : reference_split(s.question)) unique.insert(w);
      for (const auto& w : reference_split(s.answer)) unique.insert(w);
    }
  }
  CHECK(vocab.size() == static_cast<int>(unique.size()) + 4);

  for (const auto& w : unique) CHECK(vocab.id_for(w) != kUnk);
  for (int id = 0; id < vocab.size(); ++id)
    CHECK(vocab.id_for(vocab.token_for(id)) == id);
}

TEST_CASE("vocabulary building is deterministic and include_sys-stable") {
  corpus::Corpus c = small_corpus();
  Vocab a = build_vocab(c, true);
  Vocab b = build_vocab(c, true);
  Vocab without = build_vocab(c, false);
  CHECK(a.id_to_token == b.id_to_token);
  CHECK(a.id_to_token == without.id_to_token);
  CHECK(a.token_for(kPad) == "<pad>");
  CHECK(a.token_for(kBos) == "<bos>");
  CHECK(a.token_for(kEos) == "<eos>");
  CHECK(a.token_for(kUnk) == "<unk>");

  CHECK_THROWS_AS(build_vocab(corpus::Corpus{}, true), std::invalid_argument);
}

TEST_CASE("encode_example lays out segments in order") {
  corpus::Corpus c = small_corpus();
  Vocab vocab = build_vocab(c, true);
  const auto& samples = c.samples.at(0);

  for (bool with_sys : {true, false}) {
    for (const auto& s : samples) {
      TrainingExample ex = encode_example(s, with_sys, vocab);
      CHECK(ex.conv_id == s.conv_id);
      CHECK(ex.polarity == s.polarity);
      CHECK(ex.form == s.form);
      CHECK(ex.unk_count == 0);
      REQUIRE(!ex.tokens.empty());
      CHECK(ex.tokens.front() == kBos);
      CHECK(ex.tokens.back() == kEos);

      CHECK(ex.sys.begin == 1);
      CHECK(ex.sys.end == ex.ins.begin);
      CHECK(ex.ins.end == ex.question.begin);
      CHECK(ex.question.end == ex.answer.begin);
      CHECK(ex.answer.end == static_cast<int>(ex.tokens.size()) - 1);
      CHECK(!ex.answer.empty());
      if (with_sys)
        CHECK(!ex.sys.empty());
      else
        CHECK(ex.sys.size() == 0);

      std::string expected;
      if (with_sys) expected = corpus::run_sys_text() + " ";
      expected += corpus::run_ins_text() + " Question : " + s.question + " Answer : " + s.answer;
      CHECK(decode(ex.tokens, vocab) == expected);

      CHECK(vocab.token_for(ex.tokens[static_cast<size_t>(ex.question.begin)]) == "Question");
      CHECK(vocab.token_for(ex.tokens[static_cast<size_t>(ex.answer.begin)]) == "Answer");
      if (s.form == corpus::Form::Closed) {
        const std::string& lead =
            vocab.token_for(ex.tokens[static_cast<size_t>(ex.answer.begin) + 2]);
        CHECK(lead == (s.polarity == corpus::Polarity::Positive ? "Yes" : "No"));
      }
    }
  }
}

TEST_CASE("span partition covers every example of a corpus") {
  corpus::Corpus c = small_corpus(10, 7);
  Vocab vocab = build_vocab(c, true);
  int checked = 0;
  for (const auto& conv : c.conversations)
    for (const auto& s : c.samples.at(conv.id)) {
      TrainingExample ex = encode_example(s, true, vocab);
      int covered = ex.sys.size() + ex.ins.size() + ex.question.size() + ex.answer.size();
      CHECK(covered == static_cast<int>(ex.tokens.size()) - 2);
      CHECK(static_cast<int>(ex.tokens.size()) <= kMaxTrainingTokens);
      ++checked;
    }
  CHECK(checked > 100);
}

TEST_CASE("assemble_example handles context documents and plain text") {
  corpus::Corpus c = small_corpus();
  Vocab vocab = build_vocab(c, true);

  std::vector<std::string> docs = {c.conversations[0].prompt + " " + c.conversations[0].response};
  TrainingExample ex = assemble_example("", corpus::run_ins_text(), docs,
                                        "Did we discuss glacier formation ?", "No , we have not .",
                                        vocab);
  CHECK(ex.sys.empty());
  std::string text = decode(ex.tokens, vocab);
  CHECK(text.find("--- Conversation ---") != std::string::npos);
  CHECK(ex.ins.size() > static_cast<int>(tokenize(corpus::run_ins_text()).size()));

  TrainingExample plain = assemble_example("", "", {}, "", corpus::generic_text_bank()[0], vocab);
  CHECK(plain.sys.empty());
  CHECK(plain.ins.empty());
  CHECK(plain.question.empty());
  CHECK(plain.answer.size() == static_cast<int>(plain.tokens.size()) - 2);
  CHECK(decode(plain.tokens, vocab) == corpus::generic_text_bank()[0]);

  CHECK_THROWS_AS(assemble_example("", "", {}, "", "", vocab), std::invalid_argument);
}

TEST_CASE("overlong renders are rejected") {
  corpus::Corpus c = small_corpus();
  Vocab vocab = build_vocab(c, true);
  corpus::QASample s;
  s.conv_id = 0;
  s.question = "Did we discuss";
  for (int i = 0; i < 300; ++i) s.question += " the";
  s.question += " ?";
  s.answer = "No .";
  CHECK_THROWS_AS(encode_example(s, false, vocab), std::length_error);
}

TEST_CASE("encode_prompt ends at the answer cue") {
  corpus::Corpus c = small_corpus();
  Vocab vocab = build_vocab(c, true);
  auto ids = encode_prompt(corpus::run_sys_text(), corpus::run_ins_text(), {},
                           "Did we discuss glacier formation ?", vocab);
  REQUIRE(ids.size() >= 2);
  CHECK(ids.front() == kBos);
  CHECK(vocab.token_for(ids[ids.size() - 2]) == "Answer");
  CHECK(vocab.token_for(ids.back()) == ":");
  for (int id : ids) CHECK(id != kEos);

  auto with_docs = encode_prompt("", corpus::run_ins_text(),
                                 {"one doc", "another doc"}, "Did we discuss x ?", vocab);
  int delims = 0;
  for (size_t i = 0; i + 1 < with_docs.size(); ++i)
    if (vocab.token_for(with_docs[i]) == "---" &&
        vocab.token_for(with_docs[i + 1]) == "Conversation")
      ++delims;
  CHECK(delims == 2);
}

TEST_CASE("decode drops specials and rejects bad ids") {
  corpus::Corpus c = small_corpus();
  Vocab vocab = build_vocab(c, true);
  CHECK(decode({kBos, kEos}, vocab) == "");
  CHECK(decode({}, vocab) == "");
  CHECK_THROWS_AS(decode({vocab.size()}, vocab), std::out_of_range);
  CHECK_THROWS_AS(decode({-1}, vocab), std::out_of_range);

  int unks = 0;
  auto ids = encode_text("glacier zzgrobble formation blorpx", vocab, &unks);
  CHECK(unks == 2);
  CHECK(decode(ids, vocab) == "glacier formation");
}

TEST_CASE("vocab json round trip") {
  corpus::Corpus c = small_corpus();
  Vocab vocab = build_vocab(c, true);
  Vocab loaded = vocab_from_json(vocab_to_json(vocab));
  CHECK(loaded.id_to_token == vocab.id_to_token);
  CHECK(loaded.token_to_id == vocab.token_to_id);
  CHECK_THROWS_AS(vocab_from_json("{\"tokens\": [\"a\",\"a\"]}"), std::invalid_argument);
}
