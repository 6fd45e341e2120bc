#include "convmem/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace convmem::retrieval {

std::string kind_to_string(DocKind k) {
  switch (k) {
    case DocKind::ConversationDoc: return "conversation";
    case DocKind::SummaryDoc: return "summary";
    case DocKind::QAPairDoc: return "qa_pair";
  }
  return "conversation";
}

std::vector<Document> conversation_docs(const corpus::Corpus& corpus) {
  std::vector<Document> out;
  for (const auto& conv : corpus.conversations)
    out.push_back({conv.id, conv.id, conv.prompt + " " + conv.response,
                   DocKind::ConversationDoc});
  return out;
}

std::vector<Document> summary_docs(const corpus::Corpus& corpus) {
  std::vector<Document> out;
  for (const auto& conv : corpus.conversations)
    out.push_back({conv.id, conv.id, corpus::summarize(conv), DocKind::SummaryDoc});
  return out;
}

std::vector<Document> qa_pair_docs(const corpus::Corpus& corpus) {
  std::vector<Document> out;
  int next_id = 0;
  for (const auto& conv : corpus.conversations)
    for (const auto& s : corpus.train_samples(conv.id))
      out.push_back({next_id++, conv.id, "Question : " + s.question + " Answer : " + s.answer,
                     DocKind::QAPairDoc});
  return out;
}

std::vector<std::string> bm25_terms(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    for (char& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(word);
  }
  return out;
}

const Document& BM25Index::doc(int doc_id) const {
  auto it = id_to_slot.find(doc_id);
  if (it == id_to_slot.end())
    throw std::invalid_argument("index has no document with id " + std::to_string(doc_id));
  return docs[static_cast<size_t>(it->second)];
}

BM25Index build_index(const std::vector<Document>& documents, double k1, double b) {
  if (documents.empty()) throw std::invalid_argument("cannot index an empty document set");
  BM25Index index;
  index.k1 = k1;
  index.b = b;
  index.num_docs = static_cast<int>(documents.size());
  long total_len = 0;
  for (const auto& d : documents) {
    if (d.text.empty())
      throw std::invalid_argument("document " + std::to_string(d.id) + " has empty text");
    int slot = static_cast<int>(index.docs.size());
    if (!index.id_to_slot.emplace(d.id, slot).second)
      throw std::invalid_argument("duplicate document id " + std::to_string(d.id));
    index.docs.push_back(d);
    std::vector<std::string> terms = bm25_terms(d.text);
    index.doc_len.push_back(static_cast<int>(terms.size()));
    total_len += static_cast<long>(terms.size());
    std::map<std::string, int> tf;
    for (const auto& t : terms) ++tf[t];
    for (const auto& [term, count] : tf) index.postings[term].push_back({slot, count});
  }
  index.avgdl = static_cast<double>(total_len) / static_cast<double>(index.num_docs);
  return index;
}

double bm25_idf(const BM25Index& index, const std::string& term) {
  auto it = index.postings.find(term);
  double n = it == index.postings.end() ? 0.0 : static_cast<double>(it->second.size());
  double big_n = static_cast<double>(index.num_docs);
  return std::log((big_n - n + 0.5) / (n + 0.5) + 1.0);
}

double bm25_score(const BM25Index& index, const std::vector<std::string>& query_terms,
                  int doc_id) {
  auto slot_it = index.id_to_slot.find(doc_id);
  if (slot_it == index.id_to_slot.end())
    throw std::invalid_argument("cannot score unknown document id " + std::to_string(doc_id));
  int slot = slot_it->second;
  double len = static_cast<double>(index.doc_len[static_cast<size_t>(slot)]);
  double norm = index.k1 * (1.0 - index.b + index.b * len / index.avgdl);
  double score = 0.0;
  for (const auto& term : query_terms) {
    auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    int tf = 0;
    for (const auto& [s, count] : it->second)
      if (s == slot) {
        tf = count;
        break;
      }
    if (tf == 0) continue;
    double f = static_cast<double>(tf);
    score += bm25_idf(index, term) * f * (index.k1 + 1.0) / (f + norm);
  }
  return score;
}

RetrievalResult retrieve(const BM25Index& index, const std::string& query, int k) {
  if (k < 1) throw std::invalid_argument("retrieval depth must be at least 1");
  std::vector<std::string> terms = bm25_terms(query);
  std::vector<std::pair<int, double>> all;
  for (const auto& d : index.docs) all.push_back({d.id, bm25_score(index, terms, d.id)});
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(all.size()) > k) all.resize(static_cast<size_t>(k));
  return {std::move(all)};
}

RagResult rag_answer(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                     const std::vector<Document>& docs, const std::string& question) {
  if (ctx.vocab == nullptr) throw std::invalid_argument("eval context has no vocabulary");
  const std::string sys = ctx.include_sys ? corpus::run_sys_text() : std::string();
  const std::string& ins = corpus::run_ins_text();
  std::vector<std::string> texts;
  RagResult result;
  for (const auto& d : docs) {
    texts.push_back(d.text);
    result.doc_ids.push_back(d.id);
  }
  int budget = m.base.cfg.max_seq - ctx.max_new;
  while (true) {
    std::vector<int> prompt = tok::encode_prompt(sys, ins, texts, question, *ctx.vocab);
    if (static_cast<int>(prompt.size()) <= budget) break;
    if (texts.empty())
      throw std::length_error("question does not fit the context window even without documents");
    texts.pop_back();
    result.doc_ids.pop_back();
    ++result.dropped;
  }
  result.text = eval::generate_answer(m, ctx, texts, question);
  return result;
}

RagResult perfect_recall_answer(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                                const Document& gold, const std::string& question) {
  return rag_answer(m, ctx, {gold}, question);
}

namespace {

eval::EvalRecord classify_into_record(const corpus::QASample& q, const std::string& text) {
  eval::EvalRecord r;
  r.step = -1;
  r.conv_id = q.conv_id;
  r.polarity = q.polarity;
  r.predicted = eval::classify_answer(text);
  r.correct = (r.predicted == eval::Verdict::Yes && q.polarity == corpus::Polarity::Positive) ||
              (r.predicted == eval::Verdict::No && q.polarity == corpus::Polarity::Negative);
  r.seen = true;
  return r;
}

}  // namespace

RagEvalResult evaluate_rag(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                           const BM25Index& index, const std::vector<corpus::QASample>& holdout,
                           int k) {
  RagEvalResult out;
  for (const auto& q : holdout) {
    RetrievalResult hits = retrieve(index, q.question, k);
    std::vector<Document> docs;
    bool gold = false;
    for (const auto& [doc_id, score] : hits.ranked) {
      docs.push_back(index.doc(doc_id));
      gold = gold || docs.back().conv_id == q.conv_id;
    }
    if (q.polarity == corpus::Polarity::Positive) {
      ++out.positives;
      out.gold_hits += gold ? 1 : 0;
    }
    RagResult rag = rag_answer(m, ctx, docs, q.question);
    out.dropped_docs += rag.dropped;
    out.records.push_back(classify_into_record(q, rag.text));
  }
  out.report = eval::accuracy_from_records(out.records);
  return out;
}

RagEvalResult evaluate_perfect_recall(const model::AdaptedModel& m, const eval::EvalContext& ctx,
                                      const std::vector<Document>& docs,
                                      const std::vector<corpus::QASample>& holdout) {
  std::map<int, const Document*> by_conv;
  for (const auto& d : docs)
    if (!by_conv.emplace(d.conv_id, &d).second)
      throw std::invalid_argument("perfect recall needs one document per conversation; "
                                  "conversation " + std::to_string(d.conv_id) +
                                  " has several");
  RagEvalResult out;
  for (const auto& q : holdout) {
    auto it = by_conv.find(q.conv_id);
    if (it == by_conv.end())
      throw std::invalid_argument("no document for conversation " + std::to_string(q.conv_id));
    RagResult rag = perfect_recall_answer(m, ctx, *it->second, q.question);
    out.dropped_docs += rag.dropped;
    if (q.polarity == corpus::Polarity::Positive) {
      ++out.positives;
      ++out.gold_hits;
    }
    out.records.push_back(classify_into_record(q, rag.text));
  }
  out.report = eval::accuracy_from_records(out.records);
  return out;
}

}  // namespace convmem::retrieval
