#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <map>
#include <stdexcept>

#include "convmem/retrieval.hpp"
#include "convmem/rng.hpp"
#include "doctest.h"

using namespace convmem;
using namespace convmem::retrieval;

namespace {

// Reference scorer that recounts everything from the raw texts on every call:
// no postings, no cached lengths. Arithmetic mirrors the production formula
// term by term so agreement is exact, while the bookkeeping is independent.
std::vector<std::pair<int, double>> naive_rank(const std::vector<Document>& docs,
                                               const std::string& query, double k1, double b,
                                               int k) {
  std::vector<std::vector<std::string>> doc_terms;
  double total = 0.0;
  for (const auto& d : docs) {
    doc_terms.push_back(bm25_terms(d.text));
    total += static_cast<double>(doc_terms.back().size());
  }
  double avgdl = total / static_cast<double>(docs.size());
  double big_n = static_cast<double>(docs.size());
  std::vector<std::string> q_terms = bm25_terms(query);

  std::vector<std::pair<int, double>> ranked;
  for (size_t i = 0; i < docs.size(); ++i) {
    double len = static_cast<double>(doc_terms[i].size());
    double norm = k1 * (1.0 - b + b * len / avgdl);
    double score = 0.0;
    for (const auto& term : q_terms) {
      int tf = 0;
      for (const auto& w : doc_terms[i]) tf += w == term ? 1 : 0;
      if (tf == 0) continue;
      int df = 0;
      for (const auto& other : doc_terms) {
        bool has = false;
        for (const auto& w : other) has = has || w == term;
        df += has ? 1 : 0;
      }
      double idf = std::log((big_n - df + 0.5) / (df + 0.5) + 1.0);
      double f = static_cast<double>(tf);
      score += idf * f * (k1 + 1.0) / (f + norm);
    }
    ranked.push_back({docs[i].id, score});
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b2) {
    if (a.second != b2.second) return a.second > b2.second;
    return a.first < b2.first;
  });
  if (static_cast<int>(ranked.size()) > k) ranked.resize(static_cast<size_t>(k));
  return ranked;
}

Document make_doc(int id, const std::string& text, DocKind kind = DocKind::ConversationDoc) {
  Document d;
  d.id = id;
  d.conv_id = id;
  d.text = text;
  d.kind = kind;
  return d;
}

corpus::Corpus tiny_corpus(int n, uint64_t seed) {
  corpus::CorpusConfig cfg;
  cfg.num_conversations = n;
  cfg.seed = seed;
  return corpus::generate_corpus(cfg);
}

model::AdaptedModel rigged_model(const tok::Vocab& vocab, const std::string& word, int max_seq) {
  model::ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab.size();
  cfg.max_seq = max_seq;
  cfg.seed = 1;
  model::AdaptedModel am = model::attach_lora(model::init_model(cfg), model::LoRAConfig{});
  am.base.lnf_g.zero();
  am.base.lnf_b.zero();
  am.base.lnf_b.d[0] = 1.0;
  am.base.w_head.zero();
  am.base.w_head.at(vocab.token_to_id.at(word), 0) = 2.0;
  return am;
}

}  // namespace

TEST_CASE("document builders produce the three index variants") {
  corpus::Corpus corpus = tiny_corpus(3, 55);

  std::vector<Document> convs = conversation_docs(corpus);
  REQUIRE(convs.size() == 3);
  for (size_t i = 0; i < convs.size(); ++i) {
    const auto& c = corpus.conversations[i];
    CHECK(convs[i].id == c.id);
    CHECK(convs[i].conv_id == c.id);
    CHECK(convs[i].kind == DocKind::ConversationDoc);
    CHECK(convs[i].text.find(c.prompt) != std::string::npos);
    CHECK(convs[i].text.find(c.response) != std::string::npos);
  }

  std::vector<Document> sums = summary_docs(corpus);
  REQUIRE(sums.size() == 3);
  for (size_t i = 0; i < sums.size(); ++i) {
    const auto& c = corpus.conversations[i];
    CHECK(sums[i].text == corpus::summarize(c));
    CHECK(sums[i].kind == DocKind::SummaryDoc);
    // The matching conversation doc keeps late facts the summary drops.
    CHECK(convs[i].text.find(c.fact_slots[4].value) != std::string::npos);
    CHECK(sums[i].text.find(c.fact_slots[4].value) == std::string::npos);
    CHECK(sums[i].text.size() < convs[i].text.size());
  }

  std::vector<Document> qa = qa_pair_docs(corpus);
  size_t expected = 0;
  for (const auto& c : corpus.conversations) expected += corpus.train_samples(c.id).size();
  REQUIRE(qa.size() == expected);
  size_t cursor = 0;
  for (const auto& c : corpus.conversations)
    for (const auto& s : corpus.train_samples(c.id)) {
      CHECK(qa[cursor].conv_id == c.id);
      CHECK(qa[cursor].id == static_cast<int>(cursor));
      CHECK(qa[cursor].kind == DocKind::QAPairDoc);
      CHECK(qa[cursor].text.find(s.question) != std::string::npos);
      CHECK(qa[cursor].text.find(s.answer) != std::string::npos);
      ++cursor;
    }
  CHECK(kind_to_string(DocKind::QAPairDoc) == "qa_pair");
}

TEST_CASE("index construction freezes corpus statistics") {
  std::vector<Document> docs = {make_doc(0, "a b c d"), make_doc(1, "a b c d e f"),
                                make_doc(2, "a b c d e f g h")};
  BM25Index index = build_index(docs);
  CHECK(index.num_docs == 3);
  CHECK(index.avgdl == 6.0);
  CHECK(index.doc_len == std::vector<int>{4, 6, 8});
  CHECK(index.k1 == 1.2);
  CHECK(index.b == 0.75);
  CHECK(index.doc(2).text == docs[2].text);
  CHECK_THROWS_AS(index.doc(9), std::invalid_argument);

  BM25Index again = build_index(docs);
  CHECK(again.postings == index.postings);
  CHECK(again.doc_len == index.doc_len);

  CHECK_THROWS_AS(build_index({}), std::invalid_argument);
  CHECK_THROWS_AS(build_index({make_doc(0, "")}), std::invalid_argument);
  CHECK_THROWS_AS(build_index({make_doc(0, "x"), make_doc(0, "y")}), std::invalid_argument);

  // Terms nobody contains contribute nothing.
  CHECK(bm25_score(index, {"zebra"}, 0) == 0.0);
  CHECK(bm25_score(index, {}, 0) == 0.0);
  CHECK_THROWS_AS(bm25_score(index, {"a"}, 7), std::invalid_argument);
}

TEST_CASE("okapi scores match hand computation") {
  // Two equal-length docs, query term in exactly one: idf = ln(1.5/1.5 + 1)
  // = ln 2, and with f = 1, |d| = avgdl the saturation factor cancels.
  BM25Index two = build_index({make_doc(0, "cedar bridge"), make_doc(1, "granite summit")});
  CHECK(bm25_idf(two, "cedar") == std::log(2.0));
  double s = bm25_score(two, {"cedar"}, 0);
  CHECK(s == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::fabs(s - 0.6931) <= 1e-4);
  CHECK(bm25_score(two, {"cedar"}, 1) == 0.0);

  // One doc holding the term: ln((0.5)/(1.5) + 1) = ln(4/3).
  BM25Index one = build_index({make_doc(0, "cedar bridge")});
  CHECK(bm25_idf(one, "cedar") == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-15));
  CHECK(bm25_score(one, {"cedar"}, 0) ==
        doctest::Approx(std::log(0.5 / 1.5 + 1.0)).epsilon(1e-15));

  // A duplicated document drags its terms' idf down.
  BM25Index dup = build_index({make_doc(0, "cedar bridge"), make_doc(1, "cedar bridge")});
  CHECK(bm25_idf(dup, "cedar") < bm25_idf(one, "cedar"));
  CHECK(bm25_idf(dup, "cedar") == doctest::Approx(std::log(0.5 / 2.5 + 1.0)).epsilon(1e-15));

  // Case folding: queries match regardless of casing.
  CHECK(bm25_score(two, bm25_terms("CEDAR"), 0) == s);

  // More occurrences of a query term never lower the score.
  BM25Index rep = build_index({make_doc(0, "cedar pine pine pine"), make_doc(1, "cedar cedar pine pine"),
                               make_doc(2, "cedar cedar cedar pine")});
  double s1 = bm25_score(rep, {"cedar"}, 0);
  double s2 = bm25_score(rep, {"cedar"}, 1);
  double s3 = bm25_score(rep, {"cedar"}, 2);
  CHECK(s1 < s2);
  CHECK(s2 < s3);
}

TEST_CASE("retrieval equals the exhaustive reference on random corpora") {
  const std::vector<std::string> pool = {
      "river", "stone", "cedar", "lamp",  "orbit", "glass", "mill",  "harbor", "crane", "vault",
      "amber", "ridge", "spool", "tide",  "ferry", "moss",  "grain", "cliff",  "ember", "prism",
      "quay",  "shale", "birch", "knoll", "marsh", "dune",  "sedge", "tarn",   "weir",  "copse"};
  Rng rng(404);
  for (int trial = 0; trial < 60; ++trial) {
    int n = 1 + static_cast<int>(rng.below(20));
    std::vector<Document> docs;
    for (int i = 0; i < n; ++i) {
      std::string text;
      int len = 1 + static_cast<int>(rng.below(12));
      for (int w = 0; w < len; ++w) {
        if (!text.empty()) text += " ";
        text += pool[rng.below(pool.size())];
      }
      docs.push_back(make_doc(i, text));
    }
    // Occasionally plant exact duplicates so the tie rule gets exercised.
    if (n >= 2 && rng.chance(0.3)) docs[static_cast<size_t>(n - 1)].text = docs[0].text;

    std::string query;
    int q_len = 1 + static_cast<int>(rng.below(8));
    for (int w = 0; w < q_len; ++w) {
      if (!query.empty()) query += " ";
      query += rng.chance(0.1) ? "offpool" : pool[rng.below(pool.size())];
    }
    int k = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(n) + 5));

    BM25Index index = build_index(docs);
    RetrievalResult got = retrieve(index, query, k);
    std::vector<std::pair<int, double>> want = naive_rank(docs, query, index.k1, index.b, k);

    REQUIRE(got.ranked.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) {
      CHECK(got.ranked[i].first == want[i].first);
      CHECK(got.ranked[i].second == want[i].second);
      CHECK(got.ranked[i].second >= 0.0);
      if (i > 0) CHECK(got.ranked[i - 1].second >= got.ranked[i].second);
    }
  }

  BM25Index small = build_index({make_doc(0, "cedar"), make_doc(1, "cedar")});
  RetrievalResult all = retrieve(small, "cedar", 10);
  REQUIRE(all.ranked.size() == 2);
  CHECK(all.ranked[0].first == 0);  // equal scores fall back to ascending id
  CHECK(all.ranked[1].first == 1);
  CHECK(all.ranked[0].second == all.ranked[1].second);
  CHECK_THROWS_AS(retrieve(small, "cedar", 0), std::invalid_argument);
}

TEST_CASE("verbatim queries from a disjoint corpus rank their own doc first") {
  corpus::Corpus corpus = tiny_corpus(4, 77);
  BM25Index index = build_index(conversation_docs(corpus));
  for (const auto& s : corpus.holdout_samples()) {
    if (s.polarity != corpus::Polarity::Positive) continue;
    RetrievalResult top = retrieve(index, s.question, 1);
    REQUIRE(top.ranked.size() == 1);
    CHECK(index.doc(top.ranked[0].first).conv_id == s.conv_id);
  }
}

TEST_CASE("rag prompts degrade by dropping the lowest-ranked documents") {
  corpus::Corpus corpus = tiny_corpus(3, 91);
  tok::Vocab vocab = tok::build_vocab(corpus, true);
  std::vector<Document> docs = conversation_docs(corpus);

  model::AdaptedModel roomy = rigged_model(vocab, "No", 256);
  eval::EvalContext ctx{&vocab, true, 6};

  // No documents at all behaves exactly like the bare prompt.
  RagResult bare = rag_answer(roomy, ctx, {}, "Did we cover anything ?");
  CHECK(bare.text == eval::generate_answer(roomy, ctx, {}, "Did we cover anything ?"));
  CHECK(bare.doc_ids.empty());
  CHECK(bare.dropped == 0);

  RagResult gold = perfect_recall_answer(roomy, ctx, docs[1], "Did we cover anything ?");
  CHECK(gold.doc_ids == std::vector<int>{1});
  CHECK(gold.dropped == 0);
  CHECK(eval::classify_answer(gold.text) == eval::Verdict::No);

  // A tight context window forces the tail of the ranking out.
  model::AdaptedModel tight = rigged_model(vocab, "No", 120);
  RagResult trimmed = rag_answer(tight, ctx, docs, "Did we cover anything ?");
  CHECK(trimmed.dropped > 0);
  CHECK(trimmed.doc_ids.size() == docs.size() - static_cast<size_t>(trimmed.dropped));
  for (size_t i = 0; i < trimmed.doc_ids.size(); ++i) CHECK(trimmed.doc_ids[i] == docs[i].id);
  CHECK(eval::classify_answer(trimmed.text) == eval::Verdict::No);

  model::AdaptedModel cramped = rigged_model(vocab, "No", 16);
  CHECK_THROWS_AS(rag_answer(cramped, ctx, docs, "Did we cover anything ?"), std::length_error);
}

TEST_CASE("rag evaluation tracks accuracy, gold hits, and drops") {
  corpus::Corpus corpus = tiny_corpus(3, 101);
  tok::Vocab vocab = tok::build_vocab(corpus, true);
  std::vector<corpus::QASample> holdout = corpus.holdout_samples();
  model::AdaptedModel no_model = rigged_model(vocab, "No", 256);
  eval::EvalContext ctx{&vocab, true, 6};

  BM25Index index = build_index(conversation_docs(corpus));
  RagEvalResult rag = evaluate_rag(no_model, ctx, index, holdout, 1);
  CHECK(rag.report.no_acc == 100.0);
  CHECK(rag.report.yes_acc == 0.0);
  CHECK(rag.report.overall == 50.0);
  CHECK(rag.positives == 3);
  CHECK(rag.gold_hits == 3);
  CHECK(rag.records.size() == holdout.size());

  RagEvalResult oracle = evaluate_perfect_recall(no_model, ctx, conversation_docs(corpus), holdout);
  CHECK(oracle.positives == 3);
  CHECK(oracle.gold_hits == 3);
  CHECK(oracle.report.no_acc == 100.0);

  std::vector<Document> doubled = conversation_docs(corpus);
  doubled.push_back(doubled[0]);
  CHECK_THROWS_AS(evaluate_perfect_recall(no_model, ctx, doubled, holdout),
                  std::invalid_argument);
  std::vector<Document> short_set = {conversation_docs(corpus)[0]};
  CHECK_THROWS_AS(evaluate_perfect_recall(no_model, ctx, short_set, holdout),
                  std::invalid_argument);
}
