#include <cmath>
#include <vector>

#include "../support/finite_diff.hpp"
#include "dialogkit/model.hpp"
#include "dialogkit/ops.hpp"
#include "doctest.h"

using namespace dialogkit;
using namespace dialogkit::model;
using nn::Tensor;

namespace {

TransformerConfig tiny(std::size_t vocab, std::size_t d, std::size_t heads, std::size_t enc,
                       std::size_t dec) {
  TransformerConfig c;
  c.name = "tiny";
  c.vocab = vocab;
  c.d = d;
  c.heads = heads;
  c.enc_layers = enc;
  c.dec_layers = dec;
  return c;
}

TokenIds random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  TokenIds ids(n);
  for (auto& t : ids) t = static_cast<TokenId>(rng.below(vocab));
  return ids;
}

// Straightforward re-implementation of the forward pass with nested loops
// and no shared code, used as the reference for the library.
namespace ref {

using Mat = std::vector<std::vector<double>>;

Mat param(const nn::ParamStore& ps, const std::string& name) {
  const auto& t = ps.get(name);
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}
std::vector<double> vec(const nn::ParamStore& ps, const std::string& name) {
  const auto d = ps.get(name).data();
  return {d.begin(), d.end()};
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}
Mat plus_bias(Mat a, const std::vector<double>& b) {
  for (auto& r : a)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  return a;
}
Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}
Mat layer_norm(const nn::ParamStore& ps, const std::string& p, Mat x) {
  const auto g = vec(ps, p + ".g"), b = vec(ps, p + ".b");
  for (auto& r : x) {
    double mu = 0, var = 0;
    for (double v : r) mu += v;
    mu /= r.size();
    for (double v : r) var += (v - mu) * (v - mu);
    var /= r.size();
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return x;
}
Mat attn(const nn::ParamStore& ps, const std::string& p, const Mat& xq, const Mat& xkv,
         std::size_t heads, bool causal) {
  const Mat q = plus_bias(mm(xq, param(ps, p + ".wq")), vec(ps, p + ".bq"));
  const Mat k = plus_bias(mm(xkv, param(ps, p + ".wk")), vec(ps, p + ".bk"));
  const Mat v = plus_bias(mm(xkv, param(ps, p + ".wv")), vec(ps, p + ".bv"));
  const std::size_t d = q[0].size(), dh = d / heads;
  Mat o(q.size(), std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s;
      for (std::size_t j = 0; j < k.size(); ++j) {
        if (causal && j > i) break;
        double dot = 0;
        for (std::size_t t = h * dh; t < (h + 1) * dh; ++t) dot += q[i][t] * k[j][t];
        s.push_back(dot / std::sqrt(double(dh)));
      }
      double z = 0;
      for (double x : s) z += std::exp(x);
      for (std::size_t j = 0; j < s.size(); ++j)
        for (std::size_t t = h * dh; t < (h + 1) * dh; ++t) o[i][t] += std::exp(s[j]) / z * v[j][t];
    }
  }
  return plus_bias(mm(o, param(ps, p + ".wo")), vec(ps, p + ".bo"));
}
Mat ffn(const nn::ParamStore& ps, const std::string& p, const Mat& x) {
  Mat h = plus_bias(mm(x, param(ps, p + ".w1")), vec(ps, p + ".b1"));
  for (auto& r : h)
    for (auto& v : r) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
  return plus_bias(mm(h, param(ps, p + ".w2")), vec(ps, p + ".b2"));
}
Mat embed(const nn::ParamStore& ps, const std::string& table, const std::string& pos, const TokenIds& ids) {
  const Mat e = param(ps, table), p = param(ps, pos);
  Mat x;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::vector<double> r(e[0].size());
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = e[ids[i]][j] + p[i][j];
    x.push_back(r);
  }
  return x;
}

Mat forward(const Seq2Seq& m, const TokenIds& ctx, const TokenIds& dec) {
  const auto& ps = m.params();
  const auto& c = m.config();
  Mat x = embed(ps, "tok_emb", "enc.pos", ctx);
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    auto h = layer_norm(ps, p + "ln1", x);
    x = plus(x, attn(ps, p + "attn", h, h, c.heads, false));
    x = plus(x, ffn(ps, p + "ffn", layer_norm(ps, p + "ln2", x)));
  }
  const Mat mem = layer_norm(ps, "enc.ln_f", x);
  Mat y = embed(ps, "tok_emb", "dec.pos", dec);
  for (std::size_t l = 0; l < c.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    auto h = layer_norm(ps, p + "ln1", y);
    y = plus(y, attn(ps, p + "self", h, h, c.heads, true));
    y = plus(y, attn(ps, p + "cross", layer_norm(ps, p + "ln2", y), mem, c.heads, false));
    y = plus(y, ffn(ps, p + "ffn", layer_norm(ps, p + "ln3", y)));
  }
  y = layer_norm(ps, "dec.ln_f", y);
  const Mat e = param(ps, "tok_emb");
  const auto bias = vec(ps, "out.bias");
  Mat logits(y.size(), std::vector<double>(e.size()));
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t v = 0; v < e.size(); ++v) {
      double s = bias[v];
      for (std::size_t j = 0; j < y[i].size(); ++j) s += y[i][j] * e[v][j];
      logits[i][v] = s;
    }
  return logits;
}

}  // namespace ref

// Deterministic "spreadsheet" weights: every entry from a fixed formula.
void hand_set(nn::ParamStore& ps) {
  int k = 0;
  for (auto& [name, t] : ps.items()) {
    auto data = const_cast<Tensor&>(t).mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i, ++k) {
      data[i] = 0.5 * std::sin(0.37 * k + 0.11 * name.size()) + (name.ends_with(".g") ? 1.0 : 0.0);
    }
  }
}

}  // namespace

TEST_CASE("config validation and serialization") {
  auto c = TransformerConfig::toy_90m_analog();
  CHECK(c.vocab == 2000);
  CHECK(TransformerConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(TransformerConfig::from_json(R"({"vocab": 10, "bogus": 1})"), std::invalid_argument);
  auto bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.max_positions = 64;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  auto large = TransformerConfig::preset("toy-large-analog");
  CHECK(large.dec_layers == 6);
  CHECK(large.d == 128);
}

TEST_CASE("logits have one row per decoder position") {
  auto m = Seq2Seq::initialize(tiny(300, 16, 2, 1, 1), 1);
  const TokenIds ctx = {5, 6, 7};
  const TokenIds dec = {257, 1, 2, 3, 4, 5, 6};
  auto logits = m.forward(ctx, dec);
  CHECK(logits.shape() == nn::Shape{7, 300});
  TokenIds too_long(129, 1);
  CHECK_THROWS_AS(m.forward(too_long, dec), PositionOverflow);
  CHECK_THROWS_AS(m.forward(ctx, too_long), PositionOverflow);
}

TEST_CASE("decoder self-attention is causal") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto m = Seq2Seq::initialize(tiny(40, 16, 4, 2, 2), 100 + trial);
    const auto ctx = random_ids(rng, 1 + rng.below(10), 40);
    auto dec = random_ids(rng, 2 + rng.below(10), 40);
    const auto t = 1 + rng.below(dec.size() - 1);
    const auto a = m.forward(ctx, dec);
    dec[t] = static_cast<TokenId>((dec[t] + 1 + rng.below(39)) % 40);
    const auto b = m.forward(ctx, dec);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t v = 0; v < 40; ++v) CHECK(a.at(i, v) == b.at(i, v));
    bool changed = false;
    for (std::size_t v = 0; v < 40; ++v) changed = changed || a.at(t, v) != b.at(t, v);
    CHECK(changed);
  }
}

TEST_CASE("hand-set one-layer model on a two-token vocabulary matches the reference forward") {
  auto m = Seq2Seq::initialize(tiny(2, 4, 2, 1, 1), 0);
  hand_set(m.params());
  const TokenIds ctx = {1, 0, 1};
  const TokenIds dec = {0, 1, 1};
  const auto got = m.forward(ctx, dec);
  const auto want = ref::forward(m, ctx, dec);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t v = 0; v < 2; ++v) CHECK(got.at(i, v) == doctest::Approx(want[i][v]).epsilon(1e-12));
}

TEST_CASE("library forward matches the reference on random weights") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = Seq2Seq::initialize(tiny(30, 8, 2, 2, 2), 50 + trial);
    const auto ctx = random_ids(rng, 1 + rng.below(8), 30);
    const auto dec = random_ids(rng, 1 + rng.below(8), 30);
    const auto got = m.forward(ctx, dec);
    const auto want = ref::forward(m, ctx, dec);
    for (std::size_t i = 0; i < dec.size(); ++i)
      for (std::size_t v = 0; v < 30; ++v) CHECK(std::abs(got.at(i, v) - want[i][v]) < 1e-10);
  }
}

TEST_CASE("cached inference path agrees with the autodiff forward") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = Seq2Seq::initialize(tiny(50, 16, 4, 2, 3), 70 + trial);
    const GeneratorRunner runner(m);
    const auto ctx = random_ids(rng, 1 + rng.below(20), 50);
    const auto dec = random_ids(rng, 1 + rng.below(15), 50);
    const auto full = m.forward(ctx, dec);
    auto cache = runner.start(ctx);
    double worst = 0.0;
    for (std::size_t t = 0; t < dec.size(); ++t) {
      const auto logits = runner.step(cache, dec[t]);
      REQUIRE(logits.size() == 50);
      for (std::size_t v = 0; v < 50; ++v) worst = std::max(worst, std::abs(logits[v] - full.at(t, v)));
    }
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("full transformer passes finite differences") {
  auto cfg = tiny(12, 8, 2, 1, 1);
  cfg.dropout = 0.0;
  auto m = Seq2Seq::initialize(cfg, 5);
  const TokenIds ctx = {3, 4, 5, 6};
  const TokenIds dec = {1, 7, 8, 2};
  const TokenIds tgt = {7, 8, 2, 9};
  auto loss = [&] { return nn::cross_entropy(m.forward(ctx, dec), tgt); };
  auto r = dktest::check_gradients(loss, m.params().tensors(), 1e-5, 16);
  CHECK(r.checked > 100);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("poly-encoder scoring") {
  auto cfg = tiny(40, 8, 2, 1, 0);
  SUBCASE("one code reduces to a dot product") {
    auto pe = PolyEncoder::initialize(cfg, 1, 9, 0);
    const TokenIds ctx = {3, 4, 5};
    const TokenIds cand = {6, 7};
    nn::NoGradGuard g;
    const auto globals = pe.context_globals(ctx);
    const auto cv = pe.candidate_vector(cand);
    double dot = 0.0;
    for (std::size_t j = 0; j < 8; ++j) dot += globals.at(0, j) * cv.at(0, j);
    CHECK(pe.score(ctx, {cand})[0] == doctest::Approx(dot).epsilon(1e-12));
  }
  SUBCASE("hand-computed attention over globals for three candidates") {
    auto pe = PolyEncoder::initialize(cfg, 2, 9, 0);
    const auto G = Tensor::from({2, 8}, {1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0});
    const auto C = Tensor::from({3, 8}, {2, 0, 0, 0, 0, 0, 0, 0,  //
                                         0, 2, 0, 0, 0, 0, 0, 0,  //
                                         1, 1, 0, 0, 0, 0, 0, 0});
    const auto s = pe.score(G, C);
    // Candidate 0: weights softmax([2, 0]/sqrt 8) over e1, e2; score = 2 w0.
    const double a = std::exp(2 / std::sqrt(8.0));
    CHECK(s.data()[0] == doctest::Approx(2 * a / (a + 1)).epsilon(1e-12));
    CHECK(s.data()[1] == doctest::Approx(2 * a / (a + 1)).epsilon(1e-12));
    // Candidate 2: equal weights, attended vector (0.5, 0.5), score 1.
    CHECK(s.data()[2] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("identical candidates, order invariance and caching") {
    auto pe = PolyEncoder::initialize(cfg, 4, 10, 0);
    const TokenIds ctx = {1, 2, 3, 9};
    std::vector<TokenIds> cands = {{4, 5}, {6}, {4, 5}, {7, 8, 9}};
    const auto s = pe.score(ctx, cands);
    CHECK(s[0] == s[2]);
    std::vector<TokenIds> rev(cands.rbegin(), cands.rend());
    const auto r = pe.score(ctx, rev);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(s[i] - r[3 - i]) < 1e-12);
    std::vector<std::vector<double>> cache;
    for (const auto& c : cands) cache.push_back(pe.encode_candidate(c));
    const auto cached = pe.score_cached(ctx, cache);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(s[i] - cached[i]) < 1e-12);
    CHECK_THROWS_AS(pe.score(ctx, {TokenIds{}}), std::invalid_argument);
  }
}

TEST_CASE("classifier heads give distributions") {
  auto cfg = tiny(30, 8, 2, 1, 0);
  auto clf = Classifier::initialize(cfg, 4, 2, 0);
  const TokenIds x = {1, 2, 3};
  auto p = clf.predict_proba(x);
  double total = 0;
  for (double v : p) total += v;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  for (auto& v : clf.params().get("head.w").mutable_data()) v = 0.0;
  p = clf.predict_proba(x);
  for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(clf.predict(x) == 0);  // ties go to the lowest class

  auto gate = Classifier::initialize(cfg, 2, 3, 0);
  for (auto& v : gate.params().get("head.w").mutable_data()) v = 0.0;
  CHECK(gate.predict_proba(x)[1] == 0.5);
  CHECK_FALSE(gate.flag(x));
  TokenIds long_input(300, 5);
  CHECK_NOTHROW(gate.predict_proba(long_input));
}

TEST_CASE("length bins") {
  CHECK(length_bin(0) == 0);
  CHECK(length_bin(9) == 0);
  CHECK(length_bin(10) == 1);
  CHECK(length_bin(12) == 1);
  CHECK(length_bin(29) == 2);
  CHECK(length_bin(30) == 3);
  CHECK(length_bin(120) == 3);
}
