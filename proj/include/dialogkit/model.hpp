#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialogkit/bpe.hpp"
#include "dialogkit/optim.hpp"
#include "dialogkit/rng.hpp"
#include "dialogkit/tensor.hpp"

namespace dialogkit::model {

using nn::ParamStore;
using nn::Tensor;
using nn::Shape;
using nn::DimensionError;

struct TransformerConfig {
  std::string name = "custom";
  std::size_t vocab = 2000;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t max_positions = 128;
  double dropout = 0.0;

  // Throws std::invalid_argument on inconsistent fields.
  void validate() const;
  std::string to_json() const;
  // Unknown keys are an error.
  static TransformerConfig from_json(std::string_view text);

  static TransformerConfig toy_90m_analog();
  static TransformerConfig toy_large_analog();
  static TransformerConfig preset(std::string_view name);
};

class PositionOverflow : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Pre-norm encoder-decoder Transformer with learned positions and a token
// embedding shared by encoder input, decoder input and the output layer.
class Seq2Seq {
 public:
  Seq2Seq(TransformerConfig config, ParamStore params);
  static Seq2Seq initialize(const TransformerConfig& config, std::uint64_t seed);

  const TransformerConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Encoder states (n, d). Dropout applies only when rng is given.
  Tensor encode(std::span<const TokenId> context, Rng* dropout_rng = nullptr) const;
  // Next-token logits (t, V) for each decoder input position.
  Tensor decode(const Tensor& memory, std::span<const TokenId> decoder_input,
                Rng* dropout_rng = nullptr) const;
  Tensor forward(std::span<const TokenId> context, std::span<const TokenId> decoder_input,
                 Rng* dropout_rng = nullptr) const;

 private:
  TransformerConfig config_;
  ParamStore params_;
};

// Allocation-light inference over a snapshot of Seq2Seq weights, with cached
// cross-attention keys/values and a growing self-attention cache.
class GeneratorRunner {
 public:
  explicit GeneratorRunner(const Seq2Seq& model);
  ~GeneratorRunner();
  GeneratorRunner(GeneratorRunner&&) noexcept;
  GeneratorRunner& operator=(GeneratorRunner&&) noexcept;

  struct Cache {
    std::vector<std::vector<double>> self_k, self_v;    // per layer, rows x d
    std::vector<std::vector<double>> cross_k, cross_v;  // per layer, n x d
    std::size_t memory_rows = 0;
    std::size_t length = 0;  // decoder tokens consumed so far
  };

  const TransformerConfig& config() const;
  Cache start(std::span<const TokenId> context) const;
  // Consumes one decoder token and returns the next-token logits.
  std::vector<double> step(Cache& cache, TokenId token) const;

 private:
  struct Weights;
  std::unique_ptr<Weights> w_;
};

// Poly-encoder: m learned codes attend over the context states to give m
// global vectors; a candidate's first-token state attends over those and the
// score is the dot product with the attended vector.
class PolyEncoder {
 public:
  PolyEncoder(TransformerConfig encoder_config, std::size_t codes, ParamStore params,
              TokenId start = bpe::SpecialIds{}.start);
  static PolyEncoder initialize(const TransformerConfig& encoder_config, std::size_t codes,
                                std::uint64_t seed, TokenId start = bpe::SpecialIds{}.start);

  const TransformerConfig& config() const { return config_; }
  std::size_t codes() const { return codes_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // (m, d) global context vectors.
  Tensor context_globals(std::span<const TokenId> context, Rng* dropout_rng = nullptr) const;
  // (1, d) first-token state of the start-prefixed candidate; empty
  // candidates are rejected.
  Tensor candidate_vector(std::span<const TokenId> candidate, Rng* dropout_rng = nullptr) const;
  // Scores (c) of stacked candidate vectors (c, d) against globals (m, d).
  Tensor score(const Tensor& globals, const Tensor& candidates) const;

  // Inference helpers; candidate vectors may be cached and reused.
  std::vector<double> score(std::span<const TokenId> context,
                            const std::vector<TokenIds>& candidates) const;
  std::vector<double> score_cached(std::span<const TokenId> context,
                                   const std::vector<std::vector<double>>& candidate_vectors) const;
  std::vector<double> encode_candidate(std::span<const TokenId> candidate) const;

 private:
  TransformerConfig config_;
  std::size_t codes_;
  ParamStore params_;
  TokenId start_;
};

// Encoder plus a linear head over k classes read from the first-token state.
class Classifier {
 public:
  Classifier(TransformerConfig encoder_config, std::size_t classes, ParamStore params,
             TokenId start = bpe::SpecialIds{}.start);
  static Classifier initialize(const TransformerConfig& encoder_config, std::size_t classes,
                               std::uint64_t seed, TokenId start = bpe::SpecialIds{}.start);

  const TransformerConfig& config() const { return config_; }
  std::size_t classes() const { return classes_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // (1, k) unnormalized scores. The input is prefixed with the start token
  // and cut to its most recent tokens when too long.
  Tensor logits(std::span<const TokenId> input, Rng* dropout_rng = nullptr) const;
  std::vector<double> predict_proba(std::span<const TokenId> input) const;
  // Argmax, ties to the lowest class.
  std::size_t predict(std::span<const TokenId> input) const;
  // Probability of class 1 above one half, strictly.
  bool flag(std::span<const TokenId> input) const;

 private:
  TransformerConfig config_;
  std::size_t classes_;
  ParamStore params_;
  TokenId start_;
};

// Length bins <10, <20, <30 and the rest.
inline constexpr std::size_t kLengthBins = 4;
std::size_t length_bin(std::size_t tokens);

}  // namespace dialogkit::model
