#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "../support/toy_lm.hpp"
#include "dialogkit/eval.hpp"
#include "dialogkit/objectives.hpp"
#include "dialogkit/ops.hpp"
#include "doctest.h"

using namespace dialogkit;
using namespace dialogkit::eval;

namespace {

model::TransformerConfig small(std::size_t vocab = 264) {
  model::TransformerConfig c;
  c.name = "small";
  c.vocab = vocab;
  c.d = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  return c;
}

std::vector<corpus::Example> random_examples(std::size_t count, std::size_t vocab, Rng& rng) {
  std::vector<corpus::Example> out(count);
  for (auto& ex : out) {
    ex.context.resize(1 + rng.below(10));
    for (auto& t : ex.context) t = static_cast<TokenId>(rng.below(vocab));
    ex.label.resize(1 + rng.below(8));
    for (auto& t : ex.label) t = static_cast<TokenId>(rng.below(256));
  }
  return out;
}

// Direct summation: pmf(k) = C(n,k)/2^n by the multiplicative recurrence,
// then the mass of every outcome no more likely than the observed one.
double binomial_oracle(unsigned w, unsigned n) {
  std::vector<long double> pmf(n + 1);
  pmf[0] = std::pow(0.5L, static_cast<long double>(n));
  for (unsigned k = 1; k <= n; ++k) pmf[k] = pmf[k - 1] * (n - k + 1) / k;
  long double p = 0;
  for (unsigned k = 0; k <= n; ++k) {
    if (pmf[k] <= pmf[w] * (1 + 1e-7L)) p += pmf[k];
  }
  return static_cast<double>(std::min(p, 1.0L));
}

AcuteTrial trial_with(const std::string& id, Question q, std::size_t wins_a, std::size_t wins_b,
                      Rng& rng) {
  AcuteTrial t{id, "bst", "baseline", id + "-a", id + "-b", q, {}};
  for (std::size_t i = 0; i < wins_a + wins_b; ++i) {
    Judgment j;
    j.annotator = "ann" + std::to_string(i);
    j.winner = i < wins_a ? LogSide::kA : LogSide::kB;
    j.justification = "more on topic";
    j.shown_swapped = rng.bernoulli(0.5);
    t.judgments.push_back(j);
  }
  return t;
}

}  // namespace

TEST_CASE("a zero-weight model is uniform: perplexity equals the vocabulary size") {
  auto m = model::Seq2Seq::initialize(small(), 1);
  for (auto& t : m.params().tensors()) {
    for (auto& v : t.mutable_data()) v = 0.0;
  }
  Rng rng(3);
  const auto ex = random_examples(6, 264, rng);
  CHECK(perplexity(m, ex) == doctest::Approx(264.0).epsilon(1e-12));
}

TEST_CASE("perplexity is exp of the token-weighted mean cross-entropy") {
  const auto m = model::Seq2Seq::initialize(small(), 5);
  Rng rng(4);
  const auto ex = random_examples(12, 264, rng);
  // Oracle: softmax by hand over the raw logits.
  double nll = 0;
  std::size_t tokens = 0;
  for (const auto& e : ex) {
    const auto tf = teacher_forcing(e.label);
    REQUIRE(tf.input.front() == bpe::SpecialIds{}.start);
    REQUIRE(tf.target.back() == bpe::SpecialIds{}.end);
    const auto logits = m.decode(m.encode(e.context), tf.input);
    const auto d = logits.data();
    const std::size_t v = logits.shape()[1];
    for (std::size_t i = 0; i < tf.target.size(); ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, d[i * v + j]);
      double z = 0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(d[i * v + j] - mx);
      nll -= d[i * v + static_cast<std::size_t>(tf.target[i])] - mx - std::log(z);
      ++tokens;
    }
  }
  CHECK(perplexity(m, ex) == doctest::Approx(std::exp(nll / static_cast<double>(tokens))).epsilon(1e-9));
  // Single example: the same number as the training loss.
  const auto tf = teacher_forcing(ex[0].label);
  const double loss =
      objectives::mle_loss(m.decode(m.encode(ex[0].context), tf.input), tf.target).item();
  CHECK(perplexity(m, std::span(ex).first(1)) == doctest::Approx(std::exp(loss)).epsilon(1e-12));
  CHECK_THROWS_AS(perplexity(m, std::span<const corpus::Example>{}), std::invalid_argument);
}

TEST_CASE("hits@1 with a perfect scorer and the full pool is 1") {
  std::vector<RankingItem> items;
  for (std::size_t i = 0; i < 50; ++i) {
    items.push_back({{static_cast<TokenId>(i % 20)}, i % 20, i});
  }
  // Reads the gold from the context, not from the candidate order.
  CandidateScorer perfect = [](std::span<const TokenId> ctx, std::span<const std::size_t> c) {
    std::vector<double> s(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) s[i] = c[i] == static_cast<std::size_t>(ctx[0]) ? 1.0 : 0.0;
    return s;
  };
  CHECK(hits_at_1(perfect, items, 20, 20) == 1.0);
}

TEST_CASE("hits@1 draws distinct distractors and counts ties as misses") {
  std::vector<RankingItem> items;
  for (std::size_t i = 0; i < 200; ++i) items.push_back({{}, (i * 7) % 100, i});
  std::size_t seen = 0;
  CandidateScorer check = [&](std::span<const TokenId>, std::span<const std::size_t> c) {
    const std::set<std::size_t> distinct(c.begin(), c.end());
    CHECK(distinct.size() == 20);
    CHECK(c.front() == items[seen].gold);
    for (auto x : c) CHECK(x < 100);
    ++seen;
    return std::vector<double>(c.size(), 0.0);
  };
  CHECK(hits_at_1(check, items, 100, 20) == 0.0);
  CHECK(seen == items.size());
  CHECK_THROWS_AS(hits_at_1(check, items, 10, 20), std::invalid_argument);
  CHECK_THROWS_AS(hits_at_1(check, std::span<const RankingItem>{}, 100, 20), std::invalid_argument);
}

TEST_CASE("hits@1 of a random scorer is about 1/K and independent of run order") {
  std::vector<RankingItem> items;
  for (std::size_t i = 0; i < 5000; ++i) items.push_back({{}, i % 60, i});
  CandidateScorer random = [](std::span<const TokenId>, std::span<const std::size_t> c) {
    static Rng rng(99);
    std::vector<double> s(c.size());
    for (auto& x : s) x = rng.uniform();
    return s;
  };
  CHECK(hits_at_1(random, items, 60, 20) == doctest::Approx(0.05).epsilon(0.2));

  // Distractor draws depend only on (seed, id): evaluating in reverse order
  // offers each item the same candidates.
  std::map<std::uint64_t, std::vector<std::size_t>> fwd, rev;
  auto recorder = [](std::map<std::uint64_t, std::vector<std::size_t>>& out,
                     const std::vector<RankingItem>& its) {
    std::size_t i = 0;
    return CandidateScorer([&out, &its, i](std::span<const TokenId>,
                                           std::span<const std::size_t> c) mutable {
      out[its[i++].id].assign(c.begin(), c.end());
      return std::vector<double>(c.size(), 0.0);
    });
  };
  std::vector<RankingItem> some(items.begin(), items.begin() + 100);
  std::vector<RankingItem> reversed(some.rbegin(), some.rend());
  hits_at_1(recorder(fwd, some), some, 60, 20, 7);
  hits_at_1(recorder(rev, reversed), reversed, 60, 20, 7);
  CHECK(fwd == rev);
}

TEST_CASE("n-gram report matches a brute-force recount") {
  Rng rng(12);
  const std::vector<std::string> lex = {"i", "do", "you", "have", "a", "dog", "Dog", "cat", "like"};
  auto utter = [&] {
    std::string s;
    const auto len = 1 + rng.below(9);
    for (std::size_t i = 0; i < len; ++i) s += (i ? " " : "") + lex[rng.below(lex.size())];
    if (rng.bernoulli(0.3)) s += " ?";
    return s;
  };
  std::vector<std::string> model, human;
  for (int i = 0; i < 80; ++i) model.push_back(utter());
  for (int i = 0; i < 60; ++i) human.push_back(utter());

  const auto rep = ngram_report(model, human, 3, 15);
  CHECK(rep.utterances == 60);
  auto count = [&](const std::vector<std::string>& us) {
    std::map<std::string, std::size_t> c;
    for (std::size_t u = 0; u < 60; ++u) {
      std::vector<std::string> w;
      std::string cur;
      for (char ch : us[u] + " ") {
        if (std::isalnum(static_cast<unsigned char>(ch))) cur += static_cast<char>(std::tolower(ch));
        else if (!cur.empty()) { w.push_back(cur); cur.clear(); }
      }
      for (std::size_t i = 0; i + 3 <= w.size(); ++i) ++c[w[i] + " " + w[i + 1] + " " + w[i + 2]];
    }
    return c;
  };
  const auto mc = count(model), hc = count(human);
  REQUIRE(rep.rows.size() == std::min<std::size_t>(15, mc.size()));
  std::size_t prev = SIZE_MAX;
  for (const auto& r : rep.rows) {
    CHECK(r.model == mc.at(r.ngram));
    CHECK(r.human == (hc.count(r.ngram) ? hc.at(r.ngram) : 0));
    CHECK(r.model <= prev);
    prev = r.model;
  }
  // The top row carries the maximum model count.
  std::size_t mx = 0;
  for (const auto& [g, c] : mc) mx = std::max(mx, c);
  CHECK(rep.rows.front().model == mx);

  const auto same = ngram_report(human, human, 3, 10);
  for (const auto& r : same.rows) CHECK(r.model == r.human);
  CHECK(same.render().find("n-gram") != std::string::npos);
}

TEST_CASE("length report means") {
  bpe::Vocab vocab;  // bytes only, so token count equals byte count
  const std::vector<std::string> model = {"abc", "de"}, human = {"abcdef", "", "xyz"};
  const auto r = length_report(model, human, vocab);
  CHECK(r.model_mean == doctest::Approx(2.5));
  CHECK(r.human_mean == doctest::Approx(3.0));
  CHECK(r.model_utterances == 2);
  CHECK(r.human_utterances == 3);
}

TEST_CASE("binomial test matches direct summation") {
  for (unsigned n = 1; n <= 300; ++n) {
    for (unsigned w = 0; w <= n; ++w) {
      const double got = binomial_test(w, n), want = binomial_oracle(w, n);
      if (std::abs(got - want) > 1e-12 * std::max(1.0, want) && std::abs(got - want) > 1e-12) {
        FAIL("n=" << n << " w=" << w << " got " << got << " want " << want);
      }
    }
  }
  for (unsigned n : {499u, 500u, 777u, 1000u}) {
    for (unsigned w = 0; w <= n; w += 3) {
      CHECK(binomial_test(w, n) == doctest::Approx(binomial_oracle(w, n)).epsilon(1e-10));
    }
  }
}

TEST_CASE("binomial test reference points and symmetry") {
  CHECK(binomial_test(75, 100) < 0.01);
  CHECK(binomial_test(52, 100) > 0.05);
  CHECK(binomial_test(0, 10) == doctest::Approx(2.0 / 1024).epsilon(1e-12));
  CHECK(binomial_test(50, 100) == 1.0);
  CHECK_THROWS_AS(binomial_test(0, 0), std::invalid_argument);
  for (unsigned n = 1; n <= 200; ++n) {
    for (unsigned w = 0; w <= n; ++w) CHECK(binomial_test(w, n) == binomial_test(n - w, n));
  }
  CHECK_THROWS_AS(binomial_test(5, 4), std::invalid_argument);
}

TEST_CASE("question phrasings") {
  CHECK(question(Question::kEngagingness).phrasing ==
        "Who would you prefer to talk to for a long conversation?");
  CHECK(question(Question::kHumanness).phrasing == "Which speaker sounds more human?");
  for (auto q : kQuestions) CHECK(parse_question(question(q).id) == q);
  CHECK_THROWS(parse_question("interestingness"));
}

TEST_CASE("acute aggregation: unanimous judgments") {
  Rng rng(1);
  const std::vector<AcuteTrial> trials = {trial_with("t", Question::kHumanness, 20, 0, rng)};
  const auto res = acute_aggregate(trials);
  REQUIRE(res.size() == 1);
  CHECK(res[0].win_rate_a == 1.0);
  CHECK(res[0].p_value == doctest::Approx(2 * std::pow(0.5, 20)).epsilon(1e-12));
  CHECK(res[0].stars == "**");
}

TEST_CASE("acute aggregation matches hand tallies over 140 judgments per question") {
  Rng rng(2);
  // Engagingness split over three trials: 30+35+26 = 91 for A of 140.
  // Humanness over two: 40+23 = 63 for A of 140. Five flagged judgments on
  // top must not count.
  std::vector<AcuteTrial> trials = {
      trial_with("e1", Question::kEngagingness, 30, 15, rng),
      trial_with("e2", Question::kEngagingness, 35, 15, rng),
      trial_with("e3", Question::kEngagingness, 26, 19, rng),
      trial_with("h1", Question::kHumanness, 40, 40, rng),
      trial_with("h2", Question::kHumanness, 23, 37, rng),
  };
  for (int i = 0; i < 5; ++i) {
    trials[0].judgments.push_back({"bad" + std::to_string(i), LogSide::kB, "x", false, true});
  }
  const auto res = acute_aggregate(trials);
  REQUIRE(res.size() == 2);
  std::map<Question, AcuteResult> by;
  for (const auto& r : res) by[r.question] = r;
  const auto& e = by.at(Question::kEngagingness);
  CHECK(e.judgments == 140);
  CHECK(e.wins_a == 91);
  CHECK(e.excluded == 5);
  CHECK(e.win_rate_a == doctest::Approx(0.65));
  CHECK(e.p_value == doctest::Approx(binomial_oracle(91, 140)).epsilon(1e-10));
  CHECK(e.stars == (binomial_oracle(91, 140) < 0.01 ? "**" : binomial_oracle(91, 140) < 0.05 ? "*" : ""));
  const auto& h = by.at(Question::kHumanness);
  CHECK(h.judgments == 140);
  CHECK(h.wins_a == 63);
  CHECK(h.win_rate_a == doctest::Approx(0.45));
  CHECK(h.p_value == doctest::Approx(binomial_oracle(63, 140)).epsilon(1e-10));
  CHECK(h.stars.empty());
  CHECK(render_acute(res).find("bst") != std::string::npos);
}

TEST_CASE("acute aggregation does not depend on display order") {
  Rng rng(3);
  std::vector<AcuteTrial> trials = {trial_with("a", Question::kEngagingness, 33, 21, rng)};
  const auto base = acute_aggregate(trials);
  for (int rep = 0; rep < 20; ++rep) {
    for (auto& j : trials[0].judgments) j.shown_swapped = rng.bernoulli(0.5);
    const auto again = acute_aggregate(trials);
    CHECK(again[0].wins_a == base[0].wins_a);
    CHECK(again[0].p_value == base[0].p_value);
  }
  // Recording from display: choosing the first shown log.
  CHECK(winner_from_display(true, false) == LogSide::kA);
  CHECK(winner_from_display(true, true) == LogSide::kB);
  CHECK(winner_from_display(false, true) == LogSide::kA);
  CHECK(winner_from_display(false, false) == LogSide::kB);
}

TEST_CASE("self-chat alternates speakers and replays bit-exactly") {
  const bpe::Vocab vocab;
  dktest::RandomTableLM lm_a(vocab.size(), 11, 1.0), lm_b(vocab.size(), 12, 1.0);
  decoding::DecodeConfig cfg;
  cfg.method = decoding::Method::kTopK;
  cfg.min_length = 2;
  cfg.max_length = 12;
  corpus::DialogueEpisode seed;
  seed.persona_a = {"i like hiking ."};
  seed.persona_b = {"i have two cats ."};
  seed.turns = {{corpus::Speaker::kA, "Hi!", std::nullopt}};
  const auto log = self_chat({"x", &lm_a, cfg}, {"y", &lm_b, cfg}, seed, kSelfChatTurns, 42, vocab);
  REQUIRE(log.episode.turns.size() == kSelfChatTurns);
  CHECK(log.seed_turns == 1);
  CHECK(log.episode.turns[0].text == "Hi!");
  for (std::size_t t = 1; t < log.episode.turns.size(); ++t) {
    CHECK(log.episode.turns[t].speaker != log.episode.turns[t - 1].speaker);
  }
  const auto parsed = SelfChatLog::from_json_line(log.to_json_line());
  const auto again = replay_self_chat(parsed, lm_a, lm_b, vocab);
  CHECK(again.to_json_line() == log.to_json_line());
  // A different seed changes the conversation.
  const auto other = self_chat({"x", &lm_a, cfg}, {"y", &lm_b, cfg}, seed, kSelfChatTurns, 43, vocab);
  CHECK(other.to_json_line() != log.to_json_line());
}
