#include "dialogkit/objectives.hpp"

#include <iostream>
#include <stdexcept>

#include <json.hpp>

#include "dialogkit/ops.hpp"

namespace dialogkit::objectives {

Tensor mle_loss(const Tensor& logits, std::span<const TokenId> gold,
                std::span<const unsigned char> mask) {
  if (!mask.empty()) {
    bool any = false;
    for (auto m : mask) any = any || m != 0;
    if (!any) throw std::invalid_argument("mle_loss: every label position is padding");
  }
  if (gold.empty()) throw std::invalid_argument("mle_loss: empty label");
  return nn::cross_entropy(logits, gold, mask);
}

Tensor ranking_loss(const Tensor& scores) {
  if (scores.dim() != 2 || scores.shape()[0] != scores.shape()[1]) {
    throw nn::DimensionError("ranking_loss: score matrix must be square, got " +
                             nn::shape_str(scores.shape()));
  }
  std::vector<int> diag(scores.shape()[0]);
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
  return nn::cross_entropy(scores, diag);
}

std::size_t ranking_batch_size(std::size_t max_fit, std::size_t preferred) {
  if (max_fit == 0) throw std::invalid_argument("ranking_batch_size: nothing fits");
  if (max_fit >= preferred) return preferred;
  std::size_t b = 1;
  while (b * 2 <= max_fit) b *= 2;
  return b;
}

NgramTracker::NgramTracker(std::size_t n) : n_(n) {
  if (n == 0) throw std::invalid_argument("NgramTracker: n must be positive");
}

namespace {

void count_into(std::map<NgramTracker::Ngram, std::uint64_t>& counts, std::uint64_t& total,
                std::span<const TokenId> tokens, std::size_t n) {
  if (tokens.size() < n) return;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[NgramTracker::Ngram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                 tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    ++total;
  }
}

std::uint64_t lookup(const std::map<NgramTracker::Ngram, std::uint64_t>& m,
                     const NgramTracker::Ngram& g) {
  auto it = m.find(g);
  return it == m.end() ? 0 : it->second;
}

}  // namespace

void NgramTracker::add_model(std::span<const TokenId> tokens) {
  count_into(model_, model_total_, tokens, n_);
}

void NgramTracker::add_human(std::span<const TokenId> tokens) {
  count_into(human_, human_total_, tokens, n_);
}

std::uint64_t NgramTracker::model_count(const Ngram& g) const { return lookup(model_, g); }
std::uint64_t NgramTracker::human_count(const Ngram& g) const { return lookup(human_, g); }

double NgramTracker::model_freq(const Ngram& g) const {
  return model_total_ == 0 ? 0.0
                           : static_cast<double>(model_count(g)) /
                                 static_cast<double>(model_total_);
}

double NgramTracker::human_freq(const Ngram& g) const {
  return human_total_ == 0 ? 0.0
                           : static_cast<double>(human_count(g)) /
                                 static_cast<double>(human_total_);
}

std::string NgramTracker::to_stats_lines() const {
  std::string out = nlohmann::json{{"format", "dialogkit.ngram_stats"},
                                   {"version", 1},
                                   {"n", n_},
                                   {"model_total", model_total_},
                                   {"human_total", human_total_}}
                        .dump() +
                    "\n";
  std::map<Ngram, std::pair<std::uint64_t, std::uint64_t>> both;
  for (const auto& [g, c] : model_) both[g].first = c;
  for (const auto& [g, c] : human_) both[g].second = c;
  for (const auto& [g, c] : both) {
    out += nlohmann::json{{"ngram", g}, {"model", c.first}, {"human", c.second}}.dump();
    out += '\n';
  }
  return out;
}

std::vector<std::size_t> select_negative_candidates(const NgramTracker& tracker,
                                                    std::span<const TokenId> tokens) {
  std::vector<std::size_t> out;
  if (tracker.human_total() == 0) {
    std::cerr << "warning: n-gram tracker has no human counts; no negative candidates\n";
    return out;
  }
  const std::size_t n = tracker.n();
  // Cross-multiplied so the comparison is exact on integer counts.
  const auto mt = static_cast<long double>(tracker.model_total());
  const auto ht = static_cast<long double>(tracker.human_total());
  for (std::size_t t = n - 1; t < tokens.size(); ++t) {
    NgramTracker::Ngram g(tokens.begin() + static_cast<std::ptrdiff_t>(t + 1 - n),
                          tokens.begin() + static_cast<std::ptrdiff_t>(t + 1));
    const auto mc = tracker.model_count(g);
    if (mc == 0) continue;
    if (static_cast<long double>(mc) * ht > static_cast<long double>(tracker.human_count(g)) * mt) {
      out.push_back(t);
    }
  }
  return out;
}

UnlikelihoodLoss unlikelihood_loss(const Tensor& logits,
                                   const std::vector<std::vector<TokenId>>& candidates,
                                   std::size_t normalizer) {
  if (normalizer == 0) throw std::invalid_argument("unlikelihood_loss: zero normalizer");
  if (candidates.size() > logits.rows()) {
    throw nn::DimensionError("unlikelihood_loss: more candidate sets than positions");
  }
  std::vector<std::size_t> rows, cols;
  for (std::size_t t = 0; t < candidates.size(); ++t) {
    for (TokenId c : candidates[t]) {
      if (c < 0 || static_cast<std::size_t>(c) >= logits.cols()) {
        throw nn::DimensionError("unlikelihood_loss: candidate " + std::to_string(c) +
                                 " outside vocabulary");
      }
      rows.push_back(t);
      cols.push_back(static_cast<std::size_t>(c));
    }
  }
  UnlikelihoodLoss out;
  if (rows.empty()) {
    out.loss = Tensor::scalar(0.0);
    return out;
  }
  const Tensor p = nn::gather(nn::softmax(logits), rows, cols);
  for (double v : p.data()) out.clamped = out.clamped || 1.0 - v < 1e-12;
  out.loss = nn::scale(nn::sum(nn::log1m(p, 1e-12)), -1.0 / static_cast<double>(normalizer));
  return out;
}

Tensor mixed_loss(const Tensor& mle, const Tensor& ul, double alpha_mix) {
  if (!(alpha_mix >= 0.0)) throw std::invalid_argument("mixed_loss: alpha_mix must be >= 0");
  return nn::add(mle, nn::scale(ul, alpha_mix));
}

void BlendConfig::validate() const {
  if (!(alpha_blend >= 0.0 && alpha_blend <= 1.0)) {
    throw std::invalid_argument("alpha_blend must lie in [0, 1]");
  }
  if (limit == 0) throw std::invalid_argument("blend limit must be positive");
}

BlendedContext blend_retnref_example(std::span<const TokenId> context,
                                     std::span<const TokenId> retrieved,
                                     std::span<const TokenId> gold, const BlendConfig& cfg,
                                     Rng& rng) {
  cfg.validate();
  BlendedContext out;
  out.used_gold = rng.bernoulli(cfg.alpha_blend);
  const auto resp = out.used_gold ? gold : retrieved;
  out.ids.assign(context.begin(), context.end());
  out.ids.push_back(cfg.separator);
  out.ids.insert(out.ids.end(), resp.begin(), resp.end());
  out.ids = bpe::truncate_context(std::move(out.ids), cfg.limit);
  return out;
}

}  // namespace dialogkit::objectives
