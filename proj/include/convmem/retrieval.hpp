#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "convmem/corpus.hpp"
#include "convmem/evaluation.hpp"
#include "convmem/model.hpp"
#include "convmem/tokenizer.hpp"

namespace convmem::retrieval {

enum class DocKind { ConversationDoc, SummaryDoc, QAPairDoc };

std::string kind_to_string(DocKind k);

struct Document {
  int id = 0;
  int conv_id = 0;
  std::string text;
  DocKind kind = DocKind::ConversationDoc;
};

// The three index variants: whole conversations, extractive summaries, and
// one document per training question-answer pair.
std::vector<Document> conversation_docs(const corpus::Corpus& corpus);
std::vector<Document> summary_docs(const corpus::Corpus& corpus);
std::vector<Document> qa_pair_docs(const corpus::Corpus& corpus);

// Whitespace split plus lowercasing; matching is case-insensitive while the
// stored document text keeps its original casing for prompt rendering.
std::vector<std::string> bm25_terms(const std::string& text);

struct BM25Index {
  // term -> (doc slot, term frequency), slots ordered by insertion
  std::map<std::string, std::vector<std::pair<int, int>>> postings;
  std::vector<int> doc_len;
  double avgdl = 0.0;
  int num_docs = 0;
  double k1 = 1.2;
  double b = 0.75;
  std::vector<Document> docs;           // frozen copy, slot order
  std::map<int, int> id_to_slot;

  const Document& doc(int doc_id) const;
};

BM25Index build_index(const std::vector<Document>& documents, double k1 = 1.2, double b = 0.75);

// Okapi inverse document frequency with +1 smoothing; non-negative for any
// document frequency 0..N.
double bm25_idf(const BM25Index& index, const std::string& term);

double bm25_score(const BM25Index& index, const std::vector<std::string>& query_terms,
                  int doc_id);

struct RetrievalResult {
  std::vector<std::pair<int, double>> ranked;  // (doc id, score), best first
};

// Top-k by score, ties broken by ascending doc id; equivalent to scoring
// every document and sorting.
RetrievalResult retrieve(const BM25Index& index, const std::string& query, int k);

struct RagResult {
  std::string text;
  std::vector<int> doc_ids;  // documents actually rendered, rank order
  int dropped = 0;           // lowest-ranked docs removed to fit the context
};

// Renders sys/ins + the given documents (rank order, delimiter-separated) +
// the question, then greedy-decodes. Documents that would overflow the
// context window are dropped from the bottom of the ranking, and the drop
// count is reported.
RagResult rag_answer(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                     const std::vector<Document>& docs, const std::string& question);

// Same rendering with exactly the gold document.
RagResult perfect_recall_answer(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                                const Document& gold, const std::string& question);

struct RagEvalResult {
  eval::AccuracyReport report;
  std::vector<eval::EvalRecord> records;
  int gold_hits = 0;   // positive questions whose own conversation was retrieved
  int positives = 0;
  int dropped_docs = 0;
};

// Retrieval-augmented pass over a holdout set: each question queries the
// index for its top-k documents and answers from them.
RagEvalResult evaluate_rag(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                           const BM25Index& index, const std::vector<corpus::QASample>& holdout,
                           int k);

// Oracle pass: every question gets the document of its own conversation,
// looked up by conversation id in docs.
RagEvalResult evaluate_perfect_recall(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                                      const std::vector<Document>& docs,
                                      const std::vector<corpus::QASample>& holdout);

}  // namespace convmem::retrieval
