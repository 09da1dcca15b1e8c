#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialogkit/bpe.hpp"
#include "dialogkit/model.hpp"
#include "dialogkit/rng.hpp"

namespace dialogkit::decoding {

// Incremental next-token distribution. `log_probs` always holds the
// normalized log-distribution for the token after the current prefix.
struct LmState {
  virtual ~LmState() = default;
  virtual std::unique_ptr<LmState> clone() const = 0;
  std::vector<double> log_probs;
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  // State for an empty response given the context.
  virtual std::unique_ptr<LmState> begin(std::span<const TokenId> context) const = 0;
  virtual void advance(LmState& state, TokenId token) const = 0;
};

// Seq2Seq generator behind the language-model interface; the decoder is
// primed with the start token.
class TransformerLM : public LanguageModel {
 public:
  explicit TransformerLM(const model::Seq2Seq& model, TokenId start = bpe::SpecialIds{}.start);
  std::size_t vocab_size() const override;
  std::unique_ptr<LmState> begin(std::span<const TokenId> context) const override;
  void advance(LmState& state, TokenId token) const override;

 private:
  model::GeneratorRunner runner_;
  TokenId start_;
};

enum class Method { kGreedy, kBeam, kTopK, kSampleAndRank };
std::string_view method_name(Method m);
Method parse_method(std::string_view name);

struct DecodeConfig {
  Method method = Method::kBeam;
  std::size_t beam_size = 10;
  std::size_t min_length = 20;
  bool block_context = true;
  bool block_response = true;
  std::size_t block_n = 3;
  std::size_t k = 40;
  std::size_t num_samples = 20;
  // Upper bound on decoding steps, the end token included.
  std::size_t max_length = 128;
  std::uint64_t seed = 0;
  // Rank sample-and-rank candidates by mean rather than total log-prob.
  bool length_normalized_rank = false;
  TokenId end_token = bpe::SpecialIds{}.end;
  std::vector<TokenId> banned = {bpe::SpecialIds{}.pad, bpe::SpecialIds{}.start,
                                 bpe::SpecialIds{}.sep};

  void validate() const;
  std::string to_json() const;
  // Unknown keys are an error.
  static DecodeConfig from_json(std::string_view text);
};

struct Hypothesis {
  TokenIds tokens;        // generated tokens, the end token included when finished
  double log_prob = 0.0;  // sum of unconstrained per-step log-probabilities
  bool finished = false;  // ended with the end token
};

struct DecodeResult {
  TokenIds tokens;  // response without the end token
  double log_prob = 0.0;
  bool finished = false;
  // Set when every token was masked at some step and n-gram blocking had to
  // be lifted for that step.
  bool blocking_relaxed = false;
};

DecodeResult decode_greedy(const LanguageModel& lm, std::span<const TokenId> context,
                           const DecodeConfig& cfg);
DecodeResult decode_beam(const LanguageModel& lm, std::span<const TokenId> context,
                         const DecodeConfig& cfg);
DecodeResult decode_topk(const LanguageModel& lm, std::span<const TokenId> context,
                         const DecodeConfig& cfg, Rng& rng);
// All S samples come from one generator seeded with cfg.seed.
DecodeResult sample_and_rank(const LanguageModel& lm, std::span<const TokenId> context,
                             const DecodeConfig& cfg, std::vector<DecodeResult>* samples = nullptr);
// Dispatches on cfg.method; sampling methods seed from cfg.seed.
DecodeResult decode(const LanguageModel& lm, std::span<const TokenId> context,
                    const DecodeConfig& cfg);

// Masked log-probabilities for extending `prefix`: -inf for banned tokens,
// for the end token while the prefix is shorter than min_length, and for
// tokens completing a blocked n-gram. Returns true when blocking had to be
// lifted because nothing else was left.
bool apply_constraints(std::vector<double>& log_probs, std::span<const TokenId> prefix,
                       std::span<const TokenId> context, const DecodeConfig& cfg);

// Renormalized top-k distribution, ordered by (log-prob desc, id asc).
std::vector<std::pair<TokenId, double>> topk_distribution(std::span<const double> masked,
                                                          std::size_t k);

// Total unconstrained log-probability of a token sequence under the model.
double sequence_log_prob(const LanguageModel& lm, std::span<const TokenId> context,
                         std::span<const TokenId> tokens);

using LengthMap = std::array<std::size_t, model::kLengthBins>;
inline constexpr LengthMap kPredictiveShort = {5, 10, 15, 20};
inline constexpr LengthMap kPredictiveLong = {10, 20, 30, 40};

// Minimum length chosen by the length classifier's predicted bin.
std::size_t predict_min_length(const model::Classifier& head, std::span<const TokenId> context,
                               const LengthMap& map);

// Distinct n-grams repeated within `tokens`, for reporting and checks.
std::size_t repeated_ngrams(std::span<const TokenId> tokens, std::size_t n);
// Number of n-grams of `tokens` that also occur in `context`.
std::size_t copied_ngrams(std::span<const TokenId> tokens, std::span<const TokenId> context,
                          std::size_t n);

}  // namespace dialogkit::decoding
