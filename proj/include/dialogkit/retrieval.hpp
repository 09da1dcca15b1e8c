#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialogkit/bpe.hpp"
#include "dialogkit/decoding.hpp"
#include "dialogkit/model.hpp"

namespace dialogkit::retrieval {

// ---------------------------------------------------------------------------
// TF-IDF knowledge index

struct Document {
  std::string title;
  std::vector<std::string> sentences;
};

// Lowercased alphanumeric runs.
std::vector<std::string> index_terms(std::string_view text);
// Splits text into sentences at line breaks and at . ! ? followed by space.
std::vector<std::string> split_sentences(std::string_view text);

struct DocHit {
  std::size_t doc = 0;
  double score = 0.0;
};

// Immutable once built. Document ids are positions in the input order.
class TfIdfIndex {
 public:
  TfIdfIndex() = default;
  explicit TfIdfIndex(std::vector<Document> docs);

  // One plain-text article per file, title on the first line; files are
  // taken in sorted filename order.
  static TfIdfIndex from_directory(const std::filesystem::path& dir);

  std::size_t size() const { return docs_.size(); }
  const Document& doc(std::size_t id) const { return docs_.at(id); }
  std::size_t df(const std::string& term) const;
  double idf(const std::string& term) const;  // ln(N / df); 0 for unknown terms
  const std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>>& postings() const {
    return postings_;
  }

  // Cosine similarity of tf-idf vectors (tf times ln(N/df)) between the
  // query and each document. The top_n by score, ties to the lower id. An
  // empty query, or one with no indexed terms, gives an empty result.
  std::vector<DocHit> query(std::string_view text, std::size_t top_n) const;

  void save(const std::filesystem::path& path) const;
  static TfIdfIndex load(const std::filesystem::path& path);

 private:
  std::vector<Document> docs_;
  std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> postings_;
  std::vector<double> norms_;
};

inline constexpr std::string_view kIndexFormat = "dialogkit.tfidf";
inline constexpr int kIndexVersion = 1;

// ---------------------------------------------------------------------------
// Response candidates

struct Candidate {
  std::string text;
  TokenIds tokens;
};

// Training-set responses with their encodings under one retriever. The cache
// is keyed by the retriever's parameter fingerprint and rebuilt when it
// changes.
class CandidateStore {
 public:
  CandidateStore() = default;
  CandidateStore(std::vector<Candidate> candidates) : candidates_(std::move(candidates)) {}

  // Distinct responses of the examples, in first-seen order.
  static CandidateStore from_texts(std::span<const std::string> texts, const bpe::Vocab& vocab);

  std::size_t size() const { return candidates_.size(); }
  bool empty() const { return candidates_.empty(); }
  const Candidate& at(std::size_t i) const { return candidates_.at(i); }

  const std::vector<std::vector<double>>& encodings(const model::PolyEncoder& retriever);
  std::uint64_t cache_key() const { return cache_key_; }
  void invalidate();

 private:
  std::vector<Candidate> candidates_;
  std::vector<std::vector<double>> cache_;
  std::uint64_t cache_key_ = 0;
  bool cached_ = false;
};

struct Retrieved {
  std::size_t index = 0;
  double score = 0.0;
};

// Highest-scoring candidate, ties to the lower index. Throws
// std::invalid_argument for an empty store.
Retrieved retrieve_response(const model::PolyEncoder& retriever, std::span<const TokenId> context,
                            CandidateStore& store);

// Uses knowledge iff P(class 1) > 0.5.
bool knowledge_gate(const model::Classifier& gate, std::span<const TokenId> context);

// ---------------------------------------------------------------------------
// Retrieve and refine

enum class RefineMode { kNone, kDialogue, kKnowledge };
std::string_view refine_mode_name(RefineMode m);
RefineMode parse_refine_mode(std::string_view name);

struct RefineResources {
  const model::PolyEncoder* retriever = nullptr;
  CandidateStore* store = nullptr;        // dialogue mode
  const TfIdfIndex* index = nullptr;      // knowledge mode
  const model::Classifier* gate = nullptr;  // knowledge mode; absent means always on
  const bpe::Vocab* vocab = nullptr;
};

struct RefineConfig {
  RefineMode mode = RefineMode::kNone;
  decoding::DecodeConfig decode;
  std::size_t top_docs = 1;
  TokenId separator = bpe::SpecialIds{}.sep;
  std::size_t limit = bpe::kMaxSequenceTokens;
};

struct RefineResult {
  decoding::DecodeResult decoded;
  TokenIds generator_input;
  bool gate_open = false;        // knowledge mode: the gate asked for knowledge
  bool conditioned = false;      // something was appended to the context
  bool retrieval_failed = false;  // retrieval was wanted but produced nothing
  std::string conditioning;      // retrieved response or knowledge sentence
  std::optional<std::size_t> doc;  // knowledge mode: source document
  std::string error;
};

// Context, then the separator and the conditioning tokens, cut to the most
// recent `limit` tokens.
TokenIds append_conditioning(std::span<const TokenId> context, std::span<const TokenId> extra,
                             TokenId separator, std::size_t limit);

// Dialogue mode appends the best-scoring stored response. Knowledge mode,
// when the gate fires, ranks the sentences of the top TF-IDF documents for
// `query_text` with the retriever and appends the best one. Retrieval
// failures fall back to decoding the plain context and are flagged.
RefineResult retrieve_and_refine(const decoding::LanguageModel& generator,
                                 std::span<const TokenId> context, std::string_view query_text,
                                 const RefineConfig& cfg, const RefineResources& res);

}  // namespace dialogkit::retrieval
