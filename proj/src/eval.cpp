#include "dialogkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <tuple>

#include <json.hpp>

#include "dialogkit/objectives.hpp"
#include "dialogkit/ops.hpp"

namespace dialogkit::eval {

using nlohmann::json;

TeacherForcing teacher_forcing(std::span<const TokenId> label, const bpe::SpecialIds& specials) {
  TeacherForcing tf;
  tf.input.push_back(specials.start);
  tf.input.insert(tf.input.end(), label.begin(), label.end());
  tf.target.assign(label.begin(), label.end());
  tf.target.push_back(specials.end);
  return tf;
}

NllTotal corpus_nll(const model::Seq2Seq& model, std::span<const corpus::Example> examples) {
  nn::NoGradGuard guard;
  NllTotal total;
  for (const auto& ex : examples) {
    const auto tf = teacher_forcing(ex.label);
    const auto logits = model.forward(ex.context, tf.input);
    total.nll += objectives::mle_loss(logits, tf.target).item() *
                 static_cast<double>(tf.target.size());
    total.tokens += tf.target.size();
  }
  return total;
}

double perplexity(const model::Seq2Seq& model, std::span<const corpus::Example> examples) {
  if (examples.empty()) throw std::invalid_argument("perplexity: empty evaluation set");
  return std::exp(corpus_nll(model, examples).mean());
}

double hits_at_1(const CandidateScorer& scorer, std::span<const RankingItem> items,
                 std::size_t pool_size, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("hits_at_1: K must be positive");
  if (k > pool_size) {
    throw std::invalid_argument("hits_at_1: pool of " + std::to_string(pool_size) +
                                " cannot supply K=" + std::to_string(k));
  }
  if (items.empty()) throw std::invalid_argument("hits_at_1: no items");
  std::size_t hits = 0;
  std::vector<std::size_t> cands;
  std::vector<char> taken(pool_size, 0);
  for (const auto& item : items) {
    if (item.gold >= pool_size) throw std::out_of_range("hits_at_1: gold outside pool");
    Rng rng(mix_seed(seed, item.id));
    cands.assign(1, item.gold);
    taken[item.gold] = 1;
    while (cands.size() < k) {
      const auto c = static_cast<std::size_t>(rng.below(pool_size));
      if (taken[c]) continue;
      taken[c] = 1;
      cands.push_back(c);
    }
    for (auto c : cands) taken[c] = 0;
    const auto scores = scorer(item.context, cands);
    bool hit = true;
    for (std::size_t i = 1; i < scores.size() && hit; ++i) hit = scores[0] > scores[i];
    hits += hit;
  }
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

CandidateScorer polyencoder_scorer(const model::PolyEncoder& retriever,
                                   const std::vector<std::vector<double>>& candidate_vectors) {
  return [&retriever, &candidate_vectors](std::span<const TokenId> context,
                                          std::span<const std::size_t> cands) {
    std::vector<std::vector<double>> picked;
    picked.reserve(cands.size());
    for (auto c : cands) picked.push_back(candidate_vectors.at(c));
    return retriever.score_cached(context, picked);
  };
}

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

std::map<std::string, std::size_t> word_ngrams(std::span<const std::string> utterances,
                                               std::size_t n) {
  std::map<std::string, std::size_t> counts;
  for (const auto& u : utterances) {
    const auto w = words(u);
    for (std::size_t i = 0; i + n <= w.size(); ++i) {
      std::string g = w[i];
      for (std::size_t j = 1; j < n; ++j) g += ' ' + w[i + j];
      ++counts[g];
    }
  }
  return counts;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pad_right(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

std::string pad_left(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

}  // namespace

NgramReport ngram_report(std::span<const std::string> model_utterances,
                         std::span<const std::string> human_utterances, std::size_t n,
                         std::size_t top_m) {
  if (n == 0) throw std::invalid_argument("ngram_report: n must be positive");
  NgramReport rep;
  rep.n = n;
  rep.utterances = std::min(model_utterances.size(), human_utterances.size());
  const auto model = word_ngrams(model_utterances.first(rep.utterances), n);
  const auto human = word_ngrams(human_utterances.first(rep.utterances), n);
  for (const auto& [g, c] : model) {
    auto it = human.find(g);
    rep.rows.push_back({g, c, it == human.end() ? 0 : it->second});
  }
  std::stable_sort(rep.rows.begin(), rep.rows.end(),
                   [](const NgramRow& a, const NgramRow& b) { return a.model > b.model; });
  if (rep.rows.size() > top_m) rep.rows.resize(top_m);
  return rep;
}

std::string NgramReport::render() const {
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, r.ngram.size());
  std::string out = pad_right("n-gram", w) + "  " + pad_left("model", 7) + "  comparison  " +
                    pad_left("human", 7) + "\n";
  for (const auto& r : rows) {
    const char* cmp = r.model > r.human ? ">" : r.model < r.human ? "<" : "=";
    out += pad_right(r.ngram, w) + "  " + pad_left(std::to_string(r.model), 7) + "  " +
           pad_right(std::string("    ") + cmp, 10) + "  " +
           pad_left(std::to_string(r.human), 7) + "\n";
  }
  return out;
}

LengthReport length_report(std::span<const std::string> model_utterances,
                           std::span<const std::string> human_utterances,
                           const bpe::Vocab& vocab) {
  auto mean_len = [&vocab](std::span<const std::string> us) {
    if (us.empty()) return 0.0;
    double total = 0;
    for (const auto& u : us) total += static_cast<double>(vocab.encode(u).size());
    return total / static_cast<double>(us.size());
  };
  LengthReport r;
  r.model_mean = mean_len(model_utterances);
  r.human_mean = mean_len(human_utterances);
  r.model_utterances = model_utterances.size();
  r.human_utterances = human_utterances.size();
  return r;
}

std::string LengthReport::render() const {
  return "side    utterances  mean tokens\n"
         "model   " + pad_left(std::to_string(model_utterances), 10) + "  " +
         pad_left(fmt("%.2f", model_mean), 11) + "\n" +
         "human   " + pad_left(std::to_string(human_utterances), 10) + "  " +
         pad_left(fmt("%.2f", human_mean), 11) + "\n";
}

// ---------------------------------------------------------------------------

std::string SelfChatLog::to_json_line() const {
  json j{{"model_a", model_a},
         {"model_b", model_b},
         {"seed", seed},
         {"turns", turns},
         {"seed_turns", seed_turns},
         {"decode_a", json::parse(decode_a.to_json())},
         {"decode_b", json::parse(decode_b.to_json())},
         {"episode", json::parse(corpus::episode_to_json_line(episode))}};
  return j.dump();
}

SelfChatLog SelfChatLog::from_json_line(std::string_view line) {
  const auto j = json::parse(line);
  SelfChatLog log;
  log.model_a = j.at("model_a").get<std::string>();
  log.model_b = j.at("model_b").get<std::string>();
  log.seed = j.at("seed").get<std::uint64_t>();
  log.turns = j.at("turns").get<std::size_t>();
  log.seed_turns = j.at("seed_turns").get<std::size_t>();
  log.decode_a = decoding::DecodeConfig::from_json(j.at("decode_a").dump());
  log.decode_b = decoding::DecodeConfig::from_json(j.at("decode_b").dump());
  log.episode = corpus::episode_from_json_line(j.at("episode").dump());
  return log;
}

SelfChatLog self_chat(const SelfChatSide& a, const SelfChatSide& b,
                      const corpus::DialogueEpisode& seed_episode, std::size_t turns,
                      std::uint64_t seed, const bpe::Vocab& vocab) {
  if (turns < 2) throw std::invalid_argument("self_chat: at least two turns");
  if (!a.lm || !b.lm) throw std::invalid_argument("self_chat: missing model");
  if (seed_episode.turns.size() > turns) {
    throw std::invalid_argument("self_chat: seed already longer than the conversation");
  }
  SelfChatLog log;
  log.model_a = a.tag;
  log.model_b = b.tag;
  log.seed = seed;
  log.turns = turns;
  log.seed_turns = seed_episode.turns.size();
  log.decode_a = a.decode;
  log.decode_b = b.decode;
  log.episode = seed_episode;
  auto& ep = log.episode;
  while (ep.turns.size() < turns) {
    const std::size_t t = ep.turns.size();
    const corpus::Speaker who =
        t == 0 ? corpus::Speaker::kA : corpus::other(ep.turns.back().speaker);
    const auto ctx = corpus::assemble_context(ep, t, vocab);
    const auto& side = who == corpus::Speaker::kA ? a : b;
    auto cfg = side.decode;
    cfg.seed = mix_seed(seed, t);
    const auto res = decoding::decode(*side.lm, ctx.ids, cfg);
    ep.turns.push_back({who, bpe::to_valid_utf8(vocab.decode(res.tokens)), std::nullopt});
  }
  return log;
}

SelfChatLog replay_self_chat(const SelfChatLog& log, const decoding::LanguageModel& a,
                             const decoding::LanguageModel& b, const bpe::Vocab& vocab) {
  corpus::DialogueEpisode seed_ep = log.episode;
  seed_ep.turns.resize(log.seed_turns);
  return self_chat({log.model_a, &a, log.decode_a}, {log.model_b, &b, log.decode_b}, seed_ep,
                   log.turns, log.seed, vocab);
}

// ---------------------------------------------------------------------------

namespace {

// ln C(n, k) from log-gamma in extended precision.
long double log_choose(std::uint64_t n, std::uint64_t k) {
  const auto ln = static_cast<long double>(n);
  const auto lk = static_cast<long double>(k);
  return std::lgamma(ln + 1.0L) - std::lgamma(lk + 1.0L) - std::lgamma(ln - lk + 1.0L);
}

}  // namespace

double binomial_test(std::uint64_t wins, std::uint64_t trials) {
  if (trials == 0) throw std::invalid_argument("binomial_test: zero trials");
  if (wins > trials) throw std::invalid_argument("binomial_test: wins exceed trials");
  // The fair-coin pmf is symmetric and unimodal, so outcomes no more likely
  // than `wins` are exactly both tails beyond min(wins, trials - wins).
  const std::uint64_t m = std::min(wins, trials - wins);
  if (2 * m + 1 >= trials) return 1.0;
  // Tail terms relative to the largest one, C(n,k-1)/C(n,k) = k/(n-k+1).
  const long double top = log_choose(trials, m);
  long double acc = 0.0L, term = 1.0L;
  for (std::uint64_t k = m + 1; k-- > 0;) {
    acc += term;
    if (k > 0) term *= static_cast<long double>(k) / static_cast<long double>(trials - k + 1);
  }
  const long double log_p = std::log(2.0L) + top + std::log(acc) -
                            static_cast<long double>(trials) * std::log(2.0L);
  return static_cast<double>(std::min(1.0L, std::exp(log_p)));
}

namespace {

constexpr EvalQuestion kEngaging{"engagingness",
                                 "Who would you prefer to talk to for a long conversation?"};
constexpr EvalQuestion kHuman{"humanness", "Which speaker sounds more human?"};

}  // namespace

const EvalQuestion& question(Question q) {
  return q == Question::kEngagingness ? kEngaging : kHuman;
}

Question parse_question(std::string_view id) {
  if (id == kEngaging.id) return Question::kEngagingness;
  if (id == kHuman.id) return Question::kHumanness;
  throw std::invalid_argument("unknown question '" + std::string(id) + "'");
}

LogSide winner_from_display(bool chose_first, bool shown_swapped) {
  return chose_first != shown_swapped ? LogSide::kA : LogSide::kB;
}

std::vector<AcuteResult> acute_aggregate(std::span<const AcuteTrial> trials) {
  std::map<std::tuple<std::string, std::string, int>, AcuteResult> groups;
  for (const auto& t : trials) {
    auto& r = groups[{t.model_a, t.model_b, static_cast<int>(t.question)}];
    r.model_a = t.model_a;
    r.model_b = t.model_b;
    r.question = t.question;
    for (const auto& j : t.judgments) {
      if (j.flagged) {
        ++r.excluded;
        continue;
      }
      ++r.judgments;
      r.wins_a += j.winner == LogSide::kA;
    }
  }
  std::vector<AcuteResult> out;
  for (auto& [key, r] : groups) {
    if (r.judgments == 0) continue;
    r.win_rate_a = static_cast<double>(r.wins_a) / static_cast<double>(r.judgments);
    r.p_value = binomial_test(r.wins_a, r.judgments);
    r.stars = r.p_value < 0.01 ? "**" : r.p_value < 0.05 ? "*" : "";
    out.push_back(r);
  }
  return out;
}

std::string render_acute(std::span<const AcuteResult> results) {
  std::string out;
  for (const auto& r : results) {
    out += std::string(question(r.question).phrasing) + "\n";
    out += "  " + pad_right(r.model_a, 16) + pad_left(fmt("%.0f", 100.0 * r.win_rate_a), 4) +
           r.stars + "  vs  " + pad_left(fmt("%.0f", 100.0 * (1.0 - r.win_rate_a)), 4) +
           r.stars + "  " + r.model_b + "\n";
    out += "  n=" + std::to_string(r.judgments) + "  p=" + fmt("%.3g", r.p_value);
    if (r.excluded) out += "  excluded(flagged)=" + std::to_string(r.excluded);
    out += "\n";
  }
  return out;
}

}  // namespace dialogkit::eval
