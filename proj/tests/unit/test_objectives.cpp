#include <cmath>
#include <map>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "../support/finite_diff.hpp"
#include "dialogkit/model.hpp"
#include "dialogkit/objectives.hpp"
#include "dialogkit/ops.hpp"
#include "doctest.h"

using namespace dialogkit;
using namespace dialogkit::objectives;
using nn::Tensor;

namespace {

// Logits over V=2 whose softmax puts probability p on class 0.
Tensor two_class(const std::vector<double>& p) {
  std::vector<double> v;
  for (double x : p) {
    v.push_back(std::log(x));
    v.push_back(std::log(1.0 - x));
  }
  return Tensor::from({p.size(), 2}, v);
}

model::TransformerConfig tiny() {
  model::TransformerConfig c;
  c.name = "tiny";
  c.vocab = 12;
  c.d = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  return c;
}

}  // namespace

TEST_CASE("mle loss values") {
  // Gold has (numerically) all the mass.
  Tensor sure = Tensor::from({3, 2}, {0, -800, 0, -800, 0, -800});
  CHECK(mle_loss(sure, std::vector<TokenId>{0, 0, 0}).item() == doctest::Approx(0.0));

  Tensor uniform = Tensor::zeros({5, 8});
  CHECK(mle_loss(uniform, std::vector<TokenId>{1, 2, 3, 4, 7}).item() ==
        doctest::Approx(std::log(8.0)).epsilon(1e-14));

  const double hand = -(std::log(0.5) + std::log(0.25) + std::log(0.125)) / 3.0;
  CHECK(hand == doctest::Approx(1.386).epsilon(1e-3));
  CHECK(mle_loss(two_class({0.5, 0.25, 0.125}), std::vector<TokenId>{0, 0, 0}).item() ==
        doctest::Approx(hand).epsilon(1e-13));
}

TEST_CASE("mle loss ignores padding and rejects all-pad labels") {
  Tensor logits = two_class({0.5, 0.25, 0.9});
  std::vector<TokenId> gold{0, 0, 1};
  std::vector<unsigned char> mask{1, 1, 0};
  CHECK(mle_loss(logits, gold, mask).item() ==
        doctest::Approx(-(std::log(0.5) + std::log(0.25)) / 2).epsilon(1e-13));
  std::vector<unsigned char> none{0, 0, 0};
  CHECK_THROWS_AS(mle_loss(logits, gold, none), std::invalid_argument);
}

TEST_CASE("ranking loss") {
  const std::size_t b = 4;
  std::vector<double> v(b * b, -10.0);
  for (std::size_t i = 0; i < b; ++i) v[i * b + i] = 10.0;
  const double sharp = ranking_loss(Tensor::from({b, b}, v)).item();
  CHECK(sharp == doctest::Approx(std::log1p(3 * std::exp(-20.0))).epsilon(1e-12));
  CHECK(sharp < 1e-8);

  CHECK(ranking_loss(Tensor::full({4, 4}, 0.3)).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK_THROWS_AS(ranking_loss(Tensor::zeros({3, 4})), nn::DimensionError);

  // Rows are independent softmaxes with the diagonal as label.
  Rng rng(5);
  std::vector<double> s(9);
  for (auto& x : s) x = rng.normal();
  double want = 0;
  for (int i = 0; i < 3; ++i) {
    double z = 0;
    for (int j = 0; j < 3; ++j) z += std::exp(s[i * 3 + j]);
    want += -(s[i * 3 + i] - std::log(z));
  }
  CHECK(ranking_loss(Tensor::from({3, 3}, s)).item() == doctest::Approx(want / 3).epsilon(1e-13));
}

TEST_CASE("ranking batch size") {
  CHECK(ranking_batch_size(10000) == 512);
  CHECK(ranking_batch_size(512) == 512);
  CHECK(ranking_batch_size(511) == 256);
  CHECK(ranking_batch_size(40) == 32);
  CHECK(ranking_batch_size(1) == 1);
  CHECK_THROWS(ranking_batch_size(0));
}

TEST_CASE("ngram tracker counts and totals") {
  NgramTracker tr(3);
  tr.add_model(std::vector<TokenId>{1, 2, 3, 4, 1, 2, 3});
  tr.add_model(std::vector<TokenId>{1, 2});  // too short to hold a 3-gram
  tr.add_human(std::vector<TokenId>{5, 6, 7});
  CHECK(tr.model_total() == 5);
  CHECK(tr.model_count({1, 2, 3}) == 2);
  CHECK(tr.model_freq({1, 2, 3}) == doctest::Approx(0.4));
  CHECK(tr.human_freq({1, 2, 3}) == 0.0);
  std::uint64_t sum = 0;
  for (const auto& [g, c] : tr.model_counts()) sum += c;
  CHECK(sum == tr.model_total());

  std::istringstream lines(tr.to_stats_lines());
  std::string line;
  std::getline(lines, line);
  auto head = nlohmann::json::parse(line);
  CHECK(head["model_total"] == 5);
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["model"].get<std::uint64_t>() ==
          tr.model_count(j["ngram"].get<std::vector<TokenId>>()));
    ++rows;
  }
  CHECK(rows == 5);  // four model n-grams and one human one
}

TEST_CASE("negative candidate selection by definition") {
  // "do you have" = {10, 11, 12}: 2 in 100 model n-grams vs 1 in 200 human.
  NgramTracker tr(3);
  std::vector<TokenId> model_seq{10, 11, 12, 10, 11, 12};
  tr.add_model(model_seq);  // 4 n-grams, two of them the target
  for (int i = 0; i < 96; ++i) tr.add_model(std::vector<TokenId>{40, 41, 42 + i % 3});
  std::vector<TokenId> human{10, 11, 12};
  tr.add_human(human);
  for (int i = 0; i < 199; ++i) tr.add_human(std::vector<TokenId>{50, 51, 52});
  CHECK(tr.model_freq({10, 11, 12}) == doctest::Approx(0.02));
  CHECK(tr.human_freq({10, 11, 12}) == doctest::Approx(0.005));

  auto sel = select_negative_candidates(tr, std::vector<TokenId>{7, 10, 11, 12});
  CHECK(sel == std::vector<std::size_t>{3});
  // Absent from model counts: never selected, even if absent for humans too.
  CHECK(select_negative_candidates(tr, std::vector<TokenId>{1, 2, 3, 4}).empty());

  NgramTracker empty_human(3);
  empty_human.add_model(model_seq);
  CHECK(select_negative_candidates(empty_human, model_seq).empty());
}

TEST_CASE("negative candidates match a brute-force recount from raw logs") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    std::vector<std::vector<TokenId>> gens, golds;
    const int vocab = 3 + static_cast<int>(seed % 4);
    auto seq = [&](std::size_t len) {
      std::vector<TokenId> s(len);
      for (auto& t : s) t = static_cast<TokenId>(rng.below(vocab));
      return s;
    };
    for (int i = 0; i < 20; ++i) gens.push_back(seq(rng.below(9)));
    for (int i = 0; i < 20; ++i) golds.push_back(seq(rng.below(9)));
    NgramTracker tr(3);
    for (auto& g : gens) tr.add_model(g);
    for (auto& g : golds) tr.add_human(g);

    // Brute force: rescan every log for every window.
    auto occurrences = [](const std::vector<std::vector<TokenId>>& logs, const TokenId* w) {
      long total = 0, hits = 0;
      for (const auto& s : logs) {
        for (std::size_t i = 0; i + 3 <= s.size(); ++i) {
          ++total;
          if (s[i] == w[0] && s[i + 1] == w[1] && s[i + 2] == w[2]) ++hits;
        }
      }
      return std::pair{hits, total};
    };
    for (const auto& probe : gens) {
      std::vector<std::size_t> want;
      for (std::size_t t = 2; t < probe.size(); ++t) {
        auto [mh, mt] = occurrences(gens, &probe[t - 2]);
        auto [hh, ht] = occurrences(golds, &probe[t - 2]);
        if (ht == 0) break;
        if (mh > 0 && static_cast<double>(mh) / mt > static_cast<double>(hh) / ht) {
          want.push_back(t);
        }
      }
      if (tr.human_total() == 0) continue;
      CHECK(select_negative_candidates(tr, probe) == want);
    }
  }
}

TEST_CASE("unlikelihood loss values") {
  Tensor logits = two_class({0.5, 0.8});
  CHECK(unlikelihood_loss(logits, {{}, {}}, 2).loss.item() == 0.0);
  CHECK(unlikelihood_loss(logits, {}, 2).loss.item() == 0.0);

  auto one = unlikelihood_loss(logits, {{0}}, 1);
  CHECK(one.loss.item() == doctest::Approx(0.693).epsilon(1e-3));
  CHECK(one.loss.item() == doctest::Approx(-std::log(0.5)).epsilon(1e-13));
  CHECK_FALSE(one.clamped);

  // Two candidates over two positions, normalized by three label positions.
  auto two = unlikelihood_loss(logits, {{0}, {1}}, 3);
  CHECK(two.loss.item() == doctest::Approx(-(std::log(0.5) + std::log(0.8)) / 3).epsilon(1e-12));

  Tensor certain = Tensor::from({1, 2}, {0.0, -1000.0});
  auto c = unlikelihood_loss(certain, {{0}}, 1);
  CHECK(c.clamped);
  CHECK(std::isfinite(c.loss.item()));
  CHECK(c.loss.item() == doctest::Approx(-std::log(1e-12)).epsilon(1e-9));

  CHECK_THROWS_AS(unlikelihood_loss(logits, {{5}}, 1), nn::DimensionError);
  CHECK_THROWS(unlikelihood_loss(logits, {{0}}, 0));
}

TEST_CASE("mle and unlikelihood gradients through the model") {
  auto m = model::Seq2Seq::initialize(tiny(), 3);
  std::vector<TokenId> ctx{1, 4, 2, 9}, dec_in{0, 3, 5, 6}, gold{3, 5, 6, 1};
  std::vector<unsigned char> mask{1, 1, 1, 0};
  auto fn = [&] {
    Tensor logits = m.forward(ctx, dec_in);
    auto ul = unlikelihood_loss(logits, {{}, {7, 2}, {}, {5}}, 3);
    return mixed_loss(mle_loss(logits, gold, mask), ul.loss, 0.25);
  };
  auto r = dktest::check_gradients(fn, m.params().tensors(), 1e-5, 8);
  CHECK(r.checked > 0);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("mixing with alpha zero is bit-identical to mle") {
  auto m = model::Seq2Seq::initialize(tiny(), 11);
  std::vector<TokenId> ctx{1, 2, 3}, dec_in{0, 4, 5}, gold{4, 5, 6};
  auto grads = [&](bool mixed) {
    m.params().zero_grad();
    Tensor logits = m.forward(ctx, dec_in);
    Tensor mle = mle_loss(logits, gold);
    Tensor loss = mixed ? mixed_loss(mle, unlikelihood_loss(logits, {{1}, {2, 3}, {9}}, 3).loss, 0.0)
                        : mle;
    const double value = loss.item();
    nn::backward(loss);
    std::vector<double> all{value};
    for (const auto& t : m.params().tensors()) {
      if (t.has_grad()) all.insert(all.end(), t.grad().begin(), t.grad().end());
    }
    return all;
  };
  const auto a = grads(false);
  const auto b = grads(true);
  REQUIRE(a.size() == b.size());
  bool identical = true;
  for (std::size_t i = 0; i < a.size(); ++i) identical = identical && a[i] == b[i];
  CHECK(identical);
}

TEST_CASE("one unlikelihood step lowers the candidate's probability") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = model::Seq2Seq::initialize(tiny(), 100 + seed);
    std::vector<TokenId> ctx{2, 3, 4}, dec_in{0, 6};
    const TokenId cand = static_cast<TokenId>(seed % 12);
    auto prob = [&] {
      nn::NoGradGuard g;
      return nn::softmax(m.forward(ctx, dec_in)).at(1, static_cast<std::size_t>(cand));
    };
    const double before = prob();
    m.params().zero_grad();
    nn::backward(unlikelihood_loss(m.forward(ctx, dec_in), {{}, {cand}}, 2).loss);
    for (auto& t : m.params().tensors()) {
      if (!t.has_grad()) continue;
      auto v = t.mutable_data();
      auto g = t.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 1e-3 * g[i];
    }
    CHECK(prob() < before);
  }
}

TEST_CASE("retnref blending") {
  std::vector<TokenId> ctx{1, 2, 3}, ret{7, 7}, gold{9};
  Rng rng(1);
  BlendConfig cfg;
  cfg.alpha_blend = 1.0;
  for (int i = 0; i < 1000; ++i) CHECK(blend_retnref_example(ctx, ret, gold, cfg, rng).used_gold);
  cfg.alpha_blend = 0.0;
  for (int i = 0; i < 1000; ++i) {
    CHECK_FALSE(blend_retnref_example(ctx, ret, gold, cfg, rng).used_gold);
  }
  auto r = blend_retnref_example(ctx, ret, gold, cfg, rng);
  CHECK(r.ids == std::vector<TokenId>{1, 2, 3, 259, 7, 7});

  cfg.alpha_blend = 0.5;
  int golds = 0;
  for (int i = 0; i < 10000; ++i) golds += blend_retnref_example(ctx, ret, gold, cfg, rng).used_gold;
  CHECK(std::abs(golds / 10000.0 - 0.5) <= 0.02);

  // Long inputs keep the most recent tokens, so the appended response survives.
  std::vector<TokenId> long_ctx(200, 4);
  cfg.alpha_blend = 1.0;
  auto cut = blend_retnref_example(long_ctx, ret, gold, cfg, rng);
  CHECK(cut.ids.size() == 128);
  CHECK(cut.ids.back() == 9);
  CHECK(cut.ids[126] == 259);

  cfg.alpha_blend = 1.5;
  CHECK_THROWS(blend_retnref_example(ctx, ret, gold, cfg, rng));
}
