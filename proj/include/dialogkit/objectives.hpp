#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dialogkit/bpe.hpp"
#include "dialogkit/rng.hpp"
#include "dialogkit/tensor.hpp"

namespace dialogkit::objectives {

using nn::Tensor;

// Mean over unmasked positions of -log p(gold). `mask` marks real (non-pad)
// labels; empty means all. Throws std::invalid_argument if every label is pad.
Tensor mle_loss(const Tensor& logits, std::span<const TokenId> gold,
                std::span<const unsigned char> mask = {});

// Cross-entropy of each row of a square score matrix against its diagonal,
// averaged over rows. Throws nn::DimensionError for non-square input.
Tensor ranking_loss(const Tensor& scores);

inline constexpr std::size_t kPreferredRankingBatch = 512;
// The preferred batch if it fits, else the largest power of two that does.
std::size_t ranking_batch_size(std::size_t max_fit,
                               std::size_t preferred = kPreferredRankingBatch);

// Running n-gram counts over model generations and gold responses.
class NgramTracker {
 public:
  using Ngram = std::vector<TokenId>;

  explicit NgramTracker(std::size_t n = 3);

  std::size_t n() const { return n_; }
  void add_model(std::span<const TokenId> tokens);
  void add_human(std::span<const TokenId> tokens);

  std::uint64_t model_count(const Ngram& g) const;
  std::uint64_t human_count(const Ngram& g) const;
  std::uint64_t model_total() const { return model_total_; }
  std::uint64_t human_total() const { return human_total_; }
  // Count divided by that side's total; 0 when the total is 0.
  double model_freq(const Ngram& g) const;
  double human_freq(const Ngram& g) const;

  const std::map<Ngram, std::uint64_t>& model_counts() const { return model_; }
  const std::map<Ngram, std::uint64_t>& human_counts() const { return human_; }

  // One JSON object per line: a header, then every n-gram with both counts.
  std::string to_stats_lines() const;

 private:
  std::size_t n_;
  std::map<Ngram, std::uint64_t> model_, human_;
  std::uint64_t model_total_ = 0, human_total_ = 0;
};

// Positions t of `tokens` whose token completes an n-gram with a higher
// normalized frequency in model generations than in gold responses. Empty
// (with a warning on stderr) when no human n-grams were recorded yet.
std::vector<std::size_t> select_negative_candidates(const NgramTracker& tracker,
                                                    std::span<const TokenId> tokens);

struct UnlikelihoodLoss {
  Tensor loss;           // scalar
  bool clamped = false;  // some candidate had p(c) within 1e-12 of one
};

inline constexpr double kDefaultAlphaMix = 0.25;

// -sum_t sum_{c in C_t} log(1 - p(c | prefix)) divided by `normalizer`
// (the number of non-pad label positions, to match mle_loss). `candidates`
// holds one set per logits row; missing trailing rows count as empty.
UnlikelihoodLoss unlikelihood_loss(const Tensor& logits,
                                   const std::vector<std::vector<TokenId>>& candidates,
                                   std::size_t normalizer);

// L_MLE + alpha_mix * L_UL.
Tensor mixed_loss(const Tensor& mle, const Tensor& ul, double alpha_mix);

struct BlendConfig {
  double alpha_blend = 0.5;
  TokenId separator = bpe::SpecialIds{}.sep;
  std::size_t limit = bpe::kMaxSequenceTokens;
  void validate() const;
};

struct BlendedContext {
  TokenIds ids;
  bool used_gold = false;
};

// Context, separator, then the gold response with probability alpha_blend
// (one draw from rng) or the retrieved one otherwise; cut to the last
// `limit` tokens.
BlendedContext blend_retnref_example(std::span<const TokenId> context,
                                     std::span<const TokenId> retrieved,
                                     std::span<const TokenId> gold, const BlendConfig& cfg,
                                     Rng& rng);

}  // namespace dialogkit::objectives
