#include "dialogkit/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <map>
#include <set>

namespace dialogkit::decoding {

using nlohmann::json;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void log_softmax_inplace(std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  for (double& x : v) x -= lz;
}

struct TransformerState : LmState {
  model::GeneratorRunner::Cache cache;
  std::unique_ptr<LmState> clone() const override {
    return std::make_unique<TransformerState>(*this);
  }
};

// Blocks every token that would complete an n-gram already present in
// `seq`, given the current suffix `tail` of n-1 tokens.
void block_from(std::vector<double>& lp, std::span<const TokenId> seq,
                std::span<const TokenId> tail, std::size_t n) {
  if (seq.size() < n) return;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    if (std::equal(tail.begin(), tail.end(), seq.begin() + static_cast<std::ptrdiff_t>(i))) {
      const TokenId next = seq[i + n - 1];
      if (next >= 0 && static_cast<std::size_t>(next) < lp.size()) lp[static_cast<std::size_t>(next)] = kNegInf;
    }
  }
}

bool all_masked(const std::vector<double>& lp) {
  return std::all_of(lp.begin(), lp.end(), [](double x) { return x == kNegInf; });
}

bool lex_less(const TokenIds& a, const TokenIds& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// Ordering used everywhere a best hypothesis is picked.
bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return lex_less(a.tokens, b.tokens);
}

DecodeResult to_result(const Hypothesis& h, TokenId end, bool relaxed) {
  DecodeResult r;
  r.tokens = h.tokens;
  if (h.finished && !r.tokens.empty() && r.tokens.back() == end) r.tokens.pop_back();
  r.log_prob = h.log_prob;
  r.finished = h.finished;
  r.blocking_relaxed = relaxed;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------

TransformerLM::TransformerLM(const model::Seq2Seq& model, TokenId start)
    : runner_(model), start_(start) {}

std::size_t TransformerLM::vocab_size() const { return runner_.config().vocab; }

std::unique_ptr<LmState> TransformerLM::begin(std::span<const TokenId> context) const {
  auto s = std::make_unique<TransformerState>();
  s->cache = runner_.start(context);
  s->log_probs = runner_.step(s->cache, start_);
  log_softmax_inplace(s->log_probs);
  return s;
}

void TransformerLM::advance(LmState& state, TokenId token) const {
  auto& s = dynamic_cast<TransformerState&>(state);
  s.log_probs = runner_.step(s.cache, token);
  log_softmax_inplace(s.log_probs);
}

// ---------------------------------------------------------------------------

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kGreedy: return "greedy";
    case Method::kBeam: return "beam";
    case Method::kTopK: return "topk";
    case Method::kSampleAndRank: return "sample_and_rank";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::kGreedy, Method::kBeam, Method::kTopK, Method::kSampleAndRank}) {
    if (method_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown decoding method '" + std::string(name) + "'");
}

void DecodeConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("decode config: " + what); };
  if (beam_size < 1) fail("beam_size must be at least 1");
  if (k < 1) fail("k must be at least 1");
  if (num_samples < 1) fail("num_samples must be at least 1");
  if (block_n < 1) fail("block_n must be at least 1");
  if (min_length >= max_length) fail("min_length must be below max_length");
}

std::string DecodeConfig::to_json() const {
  return json{{"method", method_name(method)},
              {"beam_size", beam_size},
              {"min_length", min_length},
              {"block_context", block_context},
              {"block_response", block_response},
              {"block_n", block_n},
              {"k", k},
              {"num_samples", num_samples},
              {"max_length", max_length},
              {"seed", seed},
              {"length_normalized_rank", length_normalized_rank},
              {"end_token", end_token},
              {"banned", banned}}
      .dump();
}

DecodeConfig DecodeConfig::from_json(std::string_view text) {
  const json j = json::parse(text);
  DecodeConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "method") c.method = parse_method(v.get<std::string>());
    else if (key == "beam_size") c.beam_size = v.get<std::size_t>();
    else if (key == "min_length") c.min_length = v.get<std::size_t>();
    else if (key == "block_context") c.block_context = v.get<bool>();
    else if (key == "block_response") c.block_response = v.get<bool>();
    else if (key == "block_n") c.block_n = v.get<std::size_t>();
    else if (key == "k") c.k = v.get<std::size_t>();
    else if (key == "num_samples") c.num_samples = v.get<std::size_t>();
    else if (key == "max_length") c.max_length = v.get<std::size_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "length_normalized_rank") c.length_normalized_rank = v.get<bool>();
    else if (key == "end_token") c.end_token = v.get<TokenId>();
    else if (key == "banned") c.banned = v.get<std::vector<TokenId>>();
    else throw std::invalid_argument("decode config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

bool apply_constraints(std::vector<double>& lp, std::span<const TokenId> prefix,
                       std::span<const TokenId> context, const DecodeConfig& cfg) {
  auto in_range = [&](TokenId t) { return t >= 0 && static_cast<std::size_t>(t) < lp.size(); };
  for (TokenId b : cfg.banned) {
    if (in_range(b)) lp[static_cast<std::size_t>(b)] = kNegInf;
  }
  if (prefix.size() < cfg.min_length && in_range(cfg.end_token)) {
    lp[static_cast<std::size_t>(cfg.end_token)] = kNegInf;
  }
  const std::size_t n = cfg.block_n;
  if ((!cfg.block_response && !cfg.block_context) || prefix.size() + 1 < n) return false;
  const auto tail = prefix.subspan(prefix.size() - (n - 1));
  std::vector<double> blocked = lp;
  if (cfg.block_response) block_from(blocked, prefix, tail, n);
  if (cfg.block_context) block_from(blocked, context, tail, n);
  if (all_masked(blocked)) return true;  // keep lp with only the hard masks
  lp.swap(blocked);
  return false;
}

std::vector<std::pair<TokenId, double>> topk_distribution(std::span<const double> masked,
                                                          std::size_t k) {
  std::vector<std::pair<TokenId, double>> cand;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i] != kNegInf) cand.emplace_back(static_cast<TokenId>(i), masked[i]);
  }
  if (cand.empty()) throw nn::ContractError("top-k: every token is masked");
  const auto keep = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                    [](const auto& a, const auto& b) {
                      return a.second != b.second ? a.second > b.second : a.first < b.first;
                    });
  cand.resize(keep);
  const double mx = cand.front().second;
  double z = 0.0;
  for (auto& [id, v] : cand) z += (v = std::exp(v - mx));
  for (auto& [id, v] : cand) v /= z;
  return cand;
}

namespace {

// Constrained copy of the state's distribution, or throws when nothing is
// admissible even after lifting the blocking.
std::vector<double> masked_step(const LmState& s, std::span<const TokenId> prefix,
                                std::span<const TokenId> context, const DecodeConfig& cfg,
                                bool& relaxed) {
  std::vector<double> lp = s.log_probs;
  relaxed = apply_constraints(lp, prefix, context, cfg) || relaxed;
  if (all_masked(lp)) throw nn::ContractError("decoding: no admissible token at step " + std::to_string(prefix.size()));
  return lp;
}

DecodeResult sample_once(const LanguageModel& lm, std::span<const TokenId> context,
                         const DecodeConfig& cfg, Rng& rng, std::size_t k) {
  auto state = lm.begin(context);
  Hypothesis h;
  bool relaxed = false;
  while (h.tokens.size() < cfg.max_length) {
    const auto lp = masked_step(*state, h.tokens, context, cfg, relaxed);
    const auto dist = topk_distribution(lp, k);
    TokenId pick = dist.back().first;
    if (dist.size() > 1) {
      double u = rng.uniform(), acc = 0.0;
      for (const auto& [id, p] : dist) {
        acc += p;
        if (u < acc) {
          pick = id;
          break;
        }
      }
    } else {
      rng.uniform();  // keep the stream position independent of k
    }
    h.log_prob += state->log_probs[static_cast<std::size_t>(pick)];
    h.tokens.push_back(pick);
    if (pick == cfg.end_token) {
      h.finished = true;
      break;
    }
    if (h.tokens.size() < cfg.max_length) lm.advance(*state, pick);
  }
  return to_result(h, cfg.end_token, relaxed);
}

}  // namespace

DecodeResult decode_greedy(const LanguageModel& lm, std::span<const TokenId> context,
                           const DecodeConfig& cfg) {
  cfg.validate();
  auto state = lm.begin(context);
  Hypothesis h;
  bool relaxed = false;
  while (h.tokens.size() < cfg.max_length) {
    const auto lp = masked_step(*state, h.tokens, context, cfg, relaxed);
    // max_element returns the first maximum, i.e. the lowest id on ties.
    const auto pick = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.log_prob += state->log_probs[static_cast<std::size_t>(pick)];
    h.tokens.push_back(pick);
    if (pick == cfg.end_token) {
      h.finished = true;
      break;
    }
    if (h.tokens.size() < cfg.max_length) lm.advance(*state, pick);
  }
  return to_result(h, cfg.end_token, relaxed);
}

DecodeResult decode_beam(const LanguageModel& lm, std::span<const TokenId> context,
                         const DecodeConfig& cfg) {
  cfg.validate();
  struct Live {
    Hypothesis hyp;
    std::unique_ptr<LmState> state;
  };
  std::vector<Live> live;
  live.push_back({Hypothesis{}, lm.begin(context)});
  std::vector<Hypothesis> done;
  bool relaxed = false;

  struct Cand {
    std::size_t parent;
    TokenId token;
    double score;
  };
  while (!live.empty()) {
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const auto lp = masked_step(*live[i].state, live[i].hyp.tokens, context, cfg, relaxed);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        if (lp[t] == kNegInf) continue;
        cands.push_back({i, static_cast<TokenId>(t), live[i].hyp.log_prob + live[i].state->log_probs[t]});
      }
    }
    // Top beam_size by (score desc, token sequence lex asc). All parents
    // have the same length, so parent order then token order is the
    // lexicographic order of the extended sequences.
    const auto keep = std::min(cfg.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) {
                          return lex_less(live[a.parent].hyp.tokens, live[b.parent].hyp.tokens);
                        }
                        return a.token < b.token;
                      });
    cands.resize(keep);

    std::vector<Live> next;
    for (const auto& c : cands) {
      Hypothesis h = live[c.parent].hyp;
      h.tokens.push_back(c.token);
      h.log_prob = c.score;
      if (c.token == cfg.end_token) {
        h.finished = true;
        done.push_back(std::move(h));
      } else if (h.tokens.size() >= cfg.max_length) {
        done.push_back(std::move(h));
      } else {
        auto st = live[c.parent].state->clone();
        lm.advance(*st, c.token);
        next.push_back({std::move(h), std::move(st)});
      }
    }
    live = std::move(next);
    // Scores only decrease with length, so no live hypothesis can overtake
    // a finished one that already scores at least as well.
    if (!done.empty() && !live.empty()) {
      const auto best_done = std::min_element(done.begin(), done.end(), better);
      double best_live = kNegInf;
      for (const auto& l : live) best_live = std::max(best_live, l.hyp.log_prob);
      if (best_done->log_prob > best_live) break;
    }
  }
  const auto best = std::min_element(done.begin(), done.end(), better);
  return to_result(*best, cfg.end_token, relaxed);
}

DecodeResult decode_topk(const LanguageModel& lm, std::span<const TokenId> context,
                         const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  return sample_once(lm, context, cfg, rng, cfg.k);
}

DecodeResult sample_and_rank(const LanguageModel& lm, std::span<const TokenId> context,
                             const DecodeConfig& cfg, std::vector<DecodeResult>* samples) {
  cfg.validate();
  Rng rng(cfg.seed);
  auto rank = [&](const DecodeResult& r) {
    if (!cfg.length_normalized_rank) return r.log_prob;
    const auto len = r.tokens.size() + (r.finished ? 1 : 0);
    return len == 0 ? r.log_prob : r.log_prob / static_cast<double>(len);
  };
  DecodeResult best;
  double best_score = kNegInf;
  for (std::size_t s = 0; s < cfg.num_samples; ++s) {
    auto r = sample_once(lm, context, cfg, rng, cfg.k);
    const double sc = rank(r);
    if (s == 0 || sc > best_score) {
      best = r;
      best_score = sc;
    }
    if (samples) samples->push_back(std::move(r));
  }
  return best;
}

DecodeResult decode(const LanguageModel& lm, std::span<const TokenId> context, const DecodeConfig& cfg) {
  switch (cfg.method) {
    case Method::kGreedy: return decode_greedy(lm, context, cfg);
    case Method::kBeam: return decode_beam(lm, context, cfg);
    case Method::kTopK: {
      Rng rng(cfg.seed);
      return decode_topk(lm, context, cfg, rng);
    }
    case Method::kSampleAndRank: return sample_and_rank(lm, context, cfg);
  }
  throw std::logic_error("decode: unhandled method");
}

double sequence_log_prob(const LanguageModel& lm, std::span<const TokenId> context,
                         std::span<const TokenId> tokens) {
  auto state = lm.begin(context);
  double total = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    total += state->log_probs.at(static_cast<std::size_t>(tokens[i]));
    if (i + 1 < tokens.size()) lm.advance(*state, tokens[i]);
  }
  return total;
}

std::size_t predict_min_length(const model::Classifier& head, std::span<const TokenId> context,
                               const LengthMap& map) {
  if (head.classes() != model::kLengthBins) {
    throw std::invalid_argument("predict_min_length: head must have 4 classes");
  }
  return map[head.predict(context)];
}

std::size_t repeated_ngrams(std::span<const TokenId> tokens, std::size_t n) {
  std::set<std::vector<TokenId>> seen;
  std::size_t repeats = 0;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    if (!seen.emplace(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n)).second) {
      ++repeats;
    }
  }
  return repeats;
}

std::size_t copied_ngrams(std::span<const TokenId> tokens, std::span<const TokenId> context,
                          std::size_t n) {
  std::set<std::vector<TokenId>> ctx;
  for (std::size_t i = 0; i + n <= context.size(); ++i) {
    ctx.emplace(context.begin() + static_cast<std::ptrdiff_t>(i),
                context.begin() + static_cast<std::ptrdiff_t>(i + n));
  }
  std::size_t copied = 0;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    copied += ctx.count(std::vector<TokenId>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                             tokens.begin() + static_cast<std::ptrdiff_t>(i + n)));
  }
  return copied;
}

}  // namespace dialogkit::decoding
