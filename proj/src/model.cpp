#include "dialogkit/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "dialogkit/ops.hpp"

namespace dialogkit::model {

using nlohmann::json;
namespace ops = dialogkit::nn;

// ---------------------------------------------------------------------------
// Config

void TransformerConfig::validate() const {
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("transformer config '" + name + "': " + what);
  };
  if (vocab < 2) fail("vocab must be at least 2");
  if (d == 0 || heads == 0) fail("d and heads must be positive");
  if (d % heads != 0) fail("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
  if (max_positions < bpe::kMaxSequenceTokens) fail("max_positions must be at least 128");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

std::string TransformerConfig::to_json() const {
  return json{{"name", name},
              {"vocab", vocab},
              {"enc_layers", enc_layers},
              {"dec_layers", dec_layers},
              {"d", d},
              {"heads", heads},
              {"max_positions", max_positions},
              {"dropout", dropout}}
      .dump();
}

TransformerConfig TransformerConfig::from_json(std::string_view text) {
  const json j = json::parse(text);
  TransformerConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "name") c.name = value.get<std::string>();
    else if (key == "vocab") c.vocab = value.get<std::size_t>();
    else if (key == "enc_layers") c.enc_layers = value.get<std::size_t>();
    else if (key == "dec_layers") c.dec_layers = value.get<std::size_t>();
    else if (key == "d") c.d = value.get<std::size_t>();
    else if (key == "heads") c.heads = value.get<std::size_t>();
    else if (key == "max_positions") c.max_positions = value.get<std::size_t>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else throw std::invalid_argument("transformer config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

TransformerConfig TransformerConfig::toy_90m_analog() {
  TransformerConfig c;
  c.name = "toy-90M-analog";
  c.vocab = 2000;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.d = 64;
  c.heads = 4;
  return c;
}

TransformerConfig TransformerConfig::toy_large_analog() {
  TransformerConfig c;
  c.name = "toy-large-analog";
  c.vocab = 8000;
  c.enc_layers = 2;
  c.dec_layers = 6;
  c.d = 128;
  c.heads = 8;
  return c;
}

TransformerConfig TransformerConfig::preset(std::string_view name) {
  if (name == "toy-90M-analog") return toy_90m_analog();
  if (name == "toy-large-analog") return toy_large_analog();
  throw std::invalid_argument("unknown model preset '" + std::string(name) + "'");
}

std::size_t length_bin(std::size_t tokens) {
  if (tokens < 10) return 0;
  if (tokens < 20) return 1;
  if (tokens < 30) return 2;
  return 3;
}

namespace {

// ---------------------------------------------------------------------------
// Parameter layout

struct EncoderNames {
  std::string emb;
  std::string pos;
  std::string layer;  // "<layer>.<i>." prefixes each block
  std::string final_ln;
};

const EncoderNames kSeqEncoder{"tok_emb", "enc.pos", "enc", "enc.ln_f"};
const EncoderNames kPolyContext{"ctx.tok_emb", "ctx.pos", "ctx", "ctx.ln_f"};
const EncoderNames kPolyCandidate{"cand.tok_emb", "cand.pos", "cand", "cand.ln_f"};
const EncoderNames kClassifierEncoder{"cls.tok_emb", "cls.pos", "cls", "cls.ln_f"};

std::string block(const std::string& stack, std::size_t i) {
  return stack + "." + std::to_string(i) + ".";
}

Tensor randn(Shape shape, double stddev, Rng& rng) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), true);
}

void add_ln(ParamStore& ps, const std::string& p, std::size_t d) {
  ps.add(p + ".g", Tensor::full({d}, 1.0, true));
  ps.add(p + ".b", Tensor::zeros({d}, true));
}

void add_attn(ParamStore& ps, const std::string& p, std::size_t d, double out_scale, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (const char* w : {"wq", "wk", "wv"}) {
    ps.add(p + "." + w, randn({d, d}, s, rng));
    ps.add(p + ".b" + std::string(w + 1), Tensor::zeros({d}, true));
  }
  ps.add(p + ".wo", randn({d, d}, s * out_scale, rng));
  ps.add(p + ".bo", Tensor::zeros({d}, true));
}

void add_ffn(ParamStore& ps, const std::string& p, std::size_t d, double out_scale, Rng& rng) {
  ps.add(p + ".w1", randn({d, 4 * d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  ps.add(p + ".b1", Tensor::zeros({4 * d}, true));
  ps.add(p + ".w2", randn({4 * d, d}, out_scale / std::sqrt(4.0 * static_cast<double>(d)), rng));
  ps.add(p + ".b2", Tensor::zeros({d}, true));
}

void add_encoder(ParamStore& ps, const EncoderNames& n, const TransformerConfig& c,
                 std::size_t layers, bool with_embedding, Rng& rng) {
  if (with_embedding) ps.add(n.emb, randn({c.vocab, c.d}, 1.0 / std::sqrt(double(c.d)), rng));
  ps.add(n.pos, randn({c.max_positions, c.d}, 0.1, rng));
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(layers, 1)));
  for (std::size_t i = 0; i < layers; ++i) {
    const auto p = block(n.layer, i);
    add_ln(ps, p + "ln1", c.d);
    add_attn(ps, p + "attn", c.d, out_scale, rng);
    add_ln(ps, p + "ln2", c.d);
    add_ffn(ps, p + "ffn", c.d, out_scale, rng);
  }
  add_ln(ps, n.final_ln, c.d);
}

void require_param(const ParamStore& ps, const std::string& name, const Shape& shape) {
  if (!ps.contains(name)) throw std::invalid_argument("missing parameter " + name);
  if (ps.get(name).shape() != shape) {
    throw DimensionError("parameter " + name + " has shape " + nn::shape_str(ps.get(name).shape()) +
                         ", expected " + nn::shape_str(shape));
  }
}

void check_encoder(const ParamStore& ps, const EncoderNames& n, const TransformerConfig& c,
                   std::size_t layers) {
  const std::size_t d = c.d;
  require_param(ps, n.emb, {c.vocab, d});
  require_param(ps, n.pos, {c.max_positions, d});
  for (std::size_t i = 0; i < layers; ++i) {
    const auto p = block(n.layer, i);
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) require_param(ps, p + w, {d, d});
    require_param(ps, p + "ffn.w1", {d, 4 * d});
    require_param(ps, p + "ffn.w2", {4 * d, d});
  }
  require_param(ps, n.final_ln + ".g", {d});
}

// ---------------------------------------------------------------------------
// Differentiable blocks

Tensor maybe_dropout(const Tensor& x, double p, Rng* rng) {
  return rng && p > 0.0 ? ops::dropout(x, p, *rng) : x;
}

Tensor ln(const ParamStore& ps, const std::string& p, const Tensor& x) {
  return ops::layer_norm(x, ps.get(p + ".g"), ps.get(p + ".b"));
}

Tensor linear(const ParamStore& ps, const std::string& w, const std::string& b, const Tensor& x) {
  return ops::add_bias(ops::matmul(x, ps.get(w)), ps.get(b));
}

Tensor mha(const ParamStore& ps, const std::string& p, const Tensor& xq, const Tensor& xkv,
           std::size_t heads, bool causal) {
  auto q = linear(ps, p + ".wq", p + ".bq", xq);
  auto k = linear(ps, p + ".wk", p + ".bk", xkv);
  auto v = linear(ps, p + ".wv", p + ".bv", xkv);
  return linear(ps, p + ".wo", p + ".bo", ops::attention(q, k, v, heads, causal));
}

Tensor ffn(const ParamStore& ps, const std::string& p, const Tensor& x) {
  return linear(ps, p + ".w2", p + ".b2", ops::gelu(linear(ps, p + ".w1", p + ".b1", x)));
}

std::vector<int> positions(std::size_t n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

void check_ids(std::span<const TokenId> ids, const TransformerConfig& c, const char* what) {
  if (ids.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
  if (ids.size() > c.max_positions) {
    throw PositionOverflow(std::string(what) + ": " + std::to_string(ids.size()) +
                           " tokens exceed " + std::to_string(c.max_positions) + " positions");
  }
}

Tensor run_encoder(const ParamStore& ps, const EncoderNames& n, const TransformerConfig& c,
                   std::size_t layers, std::span<const TokenId> ids, Rng* rng) {
  check_ids(ids, c, "encoder");
  const auto pos = positions(ids.size());
  Tensor x = ops::add(ops::embed(ps.get(n.emb), ids), ops::embed(ps.get(n.pos), pos));
  x = maybe_dropout(x, c.dropout, rng);
  for (std::size_t i = 0; i < layers; ++i) {
    const auto p = block(n.layer, i);
    auto h = ln(ps, p + "ln1", x);
    x = ops::add(x, maybe_dropout(mha(ps, p + "attn", h, h, c.heads, false), c.dropout, rng));
    h = ln(ps, p + "ln2", x);
    x = ops::add(x, maybe_dropout(ffn(ps, p + "ffn", h), c.dropout, rng));
  }
  return ln(ps, n.final_ln, x);
}

// ---------------------------------------------------------------------------
// Plain inference helpers mirroring the blocks above

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;

RowMat to_mat(const Tensor& t) {
  const auto r = static_cast<Eigen::Index>(t.rows()), c = static_cast<Eigen::Index>(t.cols());
  return Eigen::Map<const RowMat>(t.data().data(), r, c);
}
RowVec to_vec(const Tensor& t) {
  return Eigen::Map<const RowVec>(t.data().data(), static_cast<Eigen::Index>(t.numel()));
}

struct LnW {
  RowVec g, b;
  void apply(RowVec& x) const {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    x = ((x.array() - mu) * inv * g.array() + b.array()).matrix();
  }
};

struct AttnW {
  RowMat wq, wk, wv, wo;
  RowVec bq, bk, bv, bo;
};

struct FfnW {
  RowMat w1, w2;
  RowVec b1, b2;
  RowVec apply(const RowVec& x) const {
    constexpr double c = 0.7978845608028654;
    constexpr double k = 0.044715;
    RowVec h = x * w1 + b1;
    for (auto& v : h) v = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
    return h * w2 + b2;
  }
};

LnW load_ln(const ParamStore& ps, const std::string& p) {
  return {to_vec(ps.get(p + ".g")), to_vec(ps.get(p + ".b"))};
}
AttnW load_attn(const ParamStore& ps, const std::string& p) {
  return {to_mat(ps.get(p + ".wq")), to_mat(ps.get(p + ".wk")), to_mat(ps.get(p + ".wv")),
          to_mat(ps.get(p + ".wo")), to_vec(ps.get(p + ".bq")), to_vec(ps.get(p + ".bk")),
          to_vec(ps.get(p + ".bv")), to_vec(ps.get(p + ".bo"))};
}
FfnW load_ffn(const ParamStore& ps, const std::string& p) {
  return {to_mat(ps.get(p + ".w1")), to_mat(ps.get(p + ".w2")), to_vec(ps.get(p + ".b1")),
          to_vec(ps.get(p + ".b2"))};
}

// One query row against `rows` cached key/value rows.
RowVec attend(const RowVec& q, const double* k, const double* v, std::size_t rows, std::size_t d,
              std::size_t heads) {
  const std::size_t dh = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  RowVec out = RowVec::Zero(static_cast<Eigen::Index>(d));
  std::vector<double> w(rows);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rows; ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < dh; ++t) dot += q[static_cast<Eigen::Index>(c0 + t)] * k[j * d + c0 + t];
      w[j] = dot * s;
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < rows; ++j) z += (w[j] = std::exp(w[j] - mx));
    for (std::size_t j = 0; j < rows; ++j) {
      const double p = w[j] / z;
      for (std::size_t t = 0; t < dh; ++t) out[static_cast<Eigen::Index>(c0 + t)] += p * v[j * d + c0 + t];
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Seq2Seq

Seq2Seq::Seq2Seq(TransformerConfig config, ParamStore params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  check_encoder(params_, kSeqEncoder, config_, config_.enc_layers);
  require_param(params_, "dec.pos", {config_.max_positions, config_.d});
  require_param(params_, "out.bias", {config_.vocab});
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    require_param(params_, block("dec", i) + "cross.wq", {config_.d, config_.d});
  }
}

Seq2Seq Seq2Seq::initialize(const TransformerConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  ParamStore ps;
  add_encoder(ps, kSeqEncoder, c, c.enc_layers, true, rng);
  ps.add("dec.pos", randn({c.max_positions, c.d}, 0.1, rng));
  const double out_scale = 1.0 / std::sqrt(3.0 * static_cast<double>(std::max<std::size_t>(c.dec_layers, 1)));
  for (std::size_t i = 0; i < c.dec_layers; ++i) {
    const auto p = block("dec", i);
    add_ln(ps, p + "ln1", c.d);
    add_attn(ps, p + "self", c.d, out_scale, rng);
    add_ln(ps, p + "ln2", c.d);
    add_attn(ps, p + "cross", c.d, out_scale, rng);
    add_ln(ps, p + "ln3", c.d);
    add_ffn(ps, p + "ffn", c.d, out_scale, rng);
  }
  add_ln(ps, "dec.ln_f", c.d);
  ps.add("out.bias", Tensor::zeros({c.vocab}, true));
  return Seq2Seq(c, std::move(ps));
}

Tensor Seq2Seq::encode(std::span<const TokenId> context, Rng* rng) const {
  return run_encoder(params_, kSeqEncoder, config_, config_.enc_layers, context, rng);
}

Tensor Seq2Seq::decode(const Tensor& memory, std::span<const TokenId> decoder_input, Rng* rng) const {
  check_ids(decoder_input, config_, "decoder");
  const auto& ps = params_;
  const auto pos = positions(decoder_input.size());
  Tensor y = ops::add(ops::embed(ps.get("tok_emb"), decoder_input), ops::embed(ps.get("dec.pos"), pos));
  y = maybe_dropout(y, config_.dropout, rng);
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    const auto p = block("dec", i);
    auto h = ln(ps, p + "ln1", y);
    y = ops::add(y, maybe_dropout(mha(ps, p + "self", h, h, config_.heads, true), config_.dropout, rng));
    h = ln(ps, p + "ln2", y);
    y = ops::add(y, maybe_dropout(mha(ps, p + "cross", h, memory, config_.heads, false), config_.dropout, rng));
    h = ln(ps, p + "ln3", y);
    y = ops::add(y, maybe_dropout(ffn(ps, p + "ffn", h), config_.dropout, rng));
  }
  y = ln(ps, "dec.ln_f", y);
  return ops::add_bias(ops::matmul_nt(y, ps.get("tok_emb")), ps.get("out.bias"));
}

Tensor Seq2Seq::forward(std::span<const TokenId> context, std::span<const TokenId> decoder_input,
                        Rng* rng) const {
  return decode(encode(context, rng), decoder_input, rng);
}

// ---------------------------------------------------------------------------
// GeneratorRunner

struct GeneratorRunner::Weights {
  TransformerConfig config;
  RowMat emb, enc_pos, dec_pos;
  RowVec out_bias;
  struct EncLayer { LnW ln1; AttnW attn; LnW ln2; FfnW ffn; };
  struct DecLayer { LnW ln1; AttnW self; LnW ln2; AttnW cross; LnW ln3; FfnW ffn; };
  std::vector<EncLayer> enc;
  std::vector<DecLayer> dec;
  LnW enc_ln_f, dec_ln_f;
};

GeneratorRunner::GeneratorRunner(const Seq2Seq& model) : w_(std::make_unique<Weights>()) {
  const auto& ps = model.params();
  auto& w = *w_;
  w.config = model.config();
  w.emb = to_mat(ps.get("tok_emb"));
  w.enc_pos = to_mat(ps.get("enc.pos"));
  w.dec_pos = to_mat(ps.get("dec.pos"));
  w.out_bias = to_vec(ps.get("out.bias"));
  for (std::size_t i = 0; i < w.config.enc_layers; ++i) {
    const auto p = block("enc", i);
    w.enc.push_back({load_ln(ps, p + "ln1"), load_attn(ps, p + "attn"), load_ln(ps, p + "ln2"),
                     load_ffn(ps, p + "ffn")});
  }
  for (std::size_t i = 0; i < w.config.dec_layers; ++i) {
    const auto p = block("dec", i);
    w.dec.push_back({load_ln(ps, p + "ln1"), load_attn(ps, p + "self"), load_ln(ps, p + "ln2"),
                     load_attn(ps, p + "cross"), load_ln(ps, p + "ln3"), load_ffn(ps, p + "ffn")});
  }
  w.enc_ln_f = load_ln(ps, "enc.ln_f");
  w.dec_ln_f = load_ln(ps, "dec.ln_f");
}

GeneratorRunner::~GeneratorRunner() = default;
GeneratorRunner::GeneratorRunner(GeneratorRunner&&) noexcept = default;
GeneratorRunner& GeneratorRunner::operator=(GeneratorRunner&&) noexcept = default;

const TransformerConfig& GeneratorRunner::config() const { return w_->config; }

GeneratorRunner::Cache GeneratorRunner::start(std::span<const TokenId> context) const {
  const auto& w = *w_;
  const auto& c = w.config;
  check_ids(context, c, "encoder");
  const std::size_t n = context.size(), d = c.d;
  RowMat x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    if (context[i] < 0 || static_cast<std::size_t>(context[i]) >= c.vocab) {
      throw DimensionError("embed: id " + std::to_string(context[i]) + " outside vocabulary");
    }
    const auto r = static_cast<Eigen::Index>(i);
    x.row(r) = w.emb.row(context[i]) + w.enc_pos.row(r);
  }
  for (const auto& L : w.enc) {
    RowMat h = x;
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
      RowVec row = h.row(r);
      L.ln1.apply(row);
      h.row(r) = row;
    }
    const RowMat q = (h * L.attn.wq).rowwise() + L.attn.bq;
    const RowMat k = (h * L.attn.wk).rowwise() + L.attn.bk;
    const RowMat v = (h * L.attn.wv).rowwise() + L.attn.bv;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const RowVec a = attend(q.row(r), k.data(), v.data(), n, d, c.heads);
      x.row(r) += a * L.attn.wo + L.attn.bo;
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      RowVec row = x.row(r);
      L.ln2.apply(row);
      x.row(r) += L.ffn.apply(row);
    }
  }
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    RowVec row = x.row(r);
    w.enc_ln_f.apply(row);
    x.row(r) = row;
  }
  Cache cache;
  cache.memory_rows = n;
  for (const auto& L : w.dec) {
    RowMat k = (x * L.cross.wk).rowwise() + L.cross.bk;
    RowMat v = (x * L.cross.wv).rowwise() + L.cross.bv;
    cache.cross_k.emplace_back(k.data(), k.data() + k.size());
    cache.cross_v.emplace_back(v.data(), v.data() + v.size());
    cache.self_k.emplace_back();
    cache.self_v.emplace_back();
  }
  return cache;
}

std::vector<double> GeneratorRunner::step(Cache& cache, TokenId token) const {
  const auto& w = *w_;
  const auto& c = w.config;
  if (cache.length >= c.max_positions) {
    throw PositionOverflow("decoder: position " + std::to_string(cache.length) + " exceeds " +
                           std::to_string(c.max_positions) + " positions");
  }
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab) {
    throw DimensionError("embed: id " + std::to_string(token) + " outside vocabulary");
  }
  const std::size_t d = c.d;
  RowVec y = w.emb.row(token) + w.dec_pos.row(static_cast<Eigen::Index>(cache.length));
  for (std::size_t li = 0; li < w.dec.size(); ++li) {
    const auto& L = w.dec[li];
    RowVec h = y;
    L.ln1.apply(h);
    const RowVec q = h * L.self.wq + L.self.bq;
    const RowVec k = h * L.self.wk + L.self.bk;
    const RowVec v = h * L.self.wv + L.self.bv;
    auto& sk = cache.self_k[li];
    auto& sv = cache.self_v[li];
    sk.insert(sk.end(), k.data(), k.data() + d);
    sv.insert(sv.end(), v.data(), v.data() + d);
    y += attend(q, sk.data(), sv.data(), cache.length + 1, d, c.heads) * L.self.wo + L.self.bo;
    h = y;
    L.ln2.apply(h);
    const RowVec qc = h * L.cross.wq + L.cross.bq;
    y += attend(qc, cache.cross_k[li].data(), cache.cross_v[li].data(), cache.memory_rows, d, c.heads) *
             L.cross.wo + L.cross.bo;
    h = y;
    L.ln3.apply(h);
    y += L.ffn.apply(h);
  }
  w.dec_ln_f.apply(y);
  ++cache.length;
  const Eigen::VectorXd logits = w.emb * y.transpose() + w.out_bias.transpose();
  return {logits.data(), logits.data() + logits.size()};
}

// ---------------------------------------------------------------------------
// PolyEncoder

PolyEncoder::PolyEncoder(TransformerConfig config, std::size_t codes, ParamStore params, TokenId start)
    : config_(std::move(config)), codes_(codes), params_(std::move(params)), start_(start) {
  config_.validate();
  if (codes_ == 0) throw std::invalid_argument("poly-encoder needs at least one code");
  check_encoder(params_, kPolyContext, config_, config_.enc_layers);
  check_encoder(params_, kPolyCandidate, config_, config_.enc_layers);
  require_param(params_, "codes", {codes_, config_.d});
}

PolyEncoder PolyEncoder::initialize(const TransformerConfig& c, std::size_t codes, std::uint64_t seed,
                                    TokenId start) {
  c.validate();
  Rng rng(seed);
  ParamStore ps;
  add_encoder(ps, kPolyContext, c, c.enc_layers, true, rng);
  add_encoder(ps, kPolyCandidate, c, c.enc_layers, true, rng);
  ps.add("codes", randn({codes, c.d}, 1.0, rng));
  return PolyEncoder(c, codes, std::move(ps), start);
}

Tensor PolyEncoder::context_globals(std::span<const TokenId> context, Rng* rng) const {
  const auto states = run_encoder(params_, kPolyContext, config_, config_.enc_layers, context, rng);
  return ops::attention(params_.get("codes"), states, states, 1, false);
}

Tensor PolyEncoder::candidate_vector(std::span<const TokenId> candidate, Rng* rng) const {
  if (candidate.empty()) throw std::invalid_argument("poly-encoder: empty candidate");
  TokenIds ids;
  ids.reserve(std::min(candidate.size(), config_.max_positions - 1) + 1);
  ids.push_back(start_);
  const auto keep = std::min(candidate.size(), config_.max_positions - 1);
  ids.insert(ids.end(), candidate.begin(), candidate.begin() + static_cast<std::ptrdiff_t>(keep));
  const auto states = run_encoder(params_, kPolyCandidate, config_, config_.enc_layers, ids, rng);
  return ops::slice_rows(states, 0, 1);
}

Tensor PolyEncoder::score(const Tensor& globals, const Tensor& candidates) const {
  const auto attended = ops::attention(candidates, globals, globals, 1, false);
  return ops::rows_dot(attended, candidates);
}

std::vector<double> PolyEncoder::encode_candidate(std::span<const TokenId> candidate) const {
  nn::NoGradGuard guard;
  const auto v = candidate_vector(candidate);
  return {v.data().begin(), v.data().end()};
}

std::vector<double> PolyEncoder::score_cached(
    std::span<const TokenId> context, const std::vector<std::vector<double>>& vectors) const {
  if (vectors.empty()) throw std::invalid_argument("poly-encoder: no candidates");
  nn::NoGradGuard guard;
  const auto globals = context_globals(context);
  std::vector<double> flat;
  flat.reserve(vectors.size() * config_.d);
  for (const auto& v : vectors) {
    if (v.size() != config_.d) throw DimensionError("poly-encoder: cached candidate has wrong width");
    flat.insert(flat.end(), v.begin(), v.end());
  }
  const auto s = score(globals, Tensor::from({vectors.size(), config_.d}, std::move(flat)));
  return {s.data().begin(), s.data().end()};
}

std::vector<double> PolyEncoder::score(std::span<const TokenId> context,
                                       const std::vector<TokenIds>& candidates) const {
  std::vector<std::vector<double>> vectors;
  vectors.reserve(candidates.size());
  for (const auto& c : candidates) vectors.push_back(encode_candidate(c));
  return score_cached(context, vectors);
}

// ---------------------------------------------------------------------------
// Classifier

Classifier::Classifier(TransformerConfig config, std::size_t classes, ParamStore params, TokenId start)
    : config_(std::move(config)), classes_(classes), params_(std::move(params)), start_(start) {
  config_.validate();
  if (classes_ < 2) throw std::invalid_argument("classifier needs at least two classes");
  check_encoder(params_, kClassifierEncoder, config_, config_.enc_layers);
  require_param(params_, "head.w", {config_.d, classes_});
  require_param(params_, "head.b", {classes_});
}

Classifier Classifier::initialize(const TransformerConfig& c, std::size_t classes, std::uint64_t seed,
                                  TokenId start) {
  c.validate();
  Rng rng(seed);
  ParamStore ps;
  add_encoder(ps, kClassifierEncoder, c, c.enc_layers, true, rng);
  ps.add("head.w", randn({c.d, classes}, 1.0 / std::sqrt(double(c.d)), rng));
  ps.add("head.b", Tensor::zeros({classes}, true));
  return Classifier(c, classes, std::move(ps), start);
}

Tensor Classifier::logits(std::span<const TokenId> input, Rng* rng) const {
  TokenIds ids;
  ids.push_back(start_);
  const auto keep = std::min(input.size(), config_.max_positions - 1);
  ids.insert(ids.end(), input.end() - static_cast<std::ptrdiff_t>(keep), input.end());
  const auto states = run_encoder(params_, kClassifierEncoder, config_, config_.enc_layers, ids, rng);
  return linear(params_, "head.w", "head.b", ops::slice_rows(states, 0, 1));
}

std::vector<double> Classifier::predict_proba(std::span<const TokenId> input) const {
  nn::NoGradGuard guard;
  const auto p = ops::softmax(logits(input));
  return {p.data().begin(), p.data().end()};
}

std::size_t Classifier::predict(std::span<const TokenId> input) const {
  const auto p = predict_proba(input);
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

bool Classifier::flag(std::span<const TokenId> input) const {
  return predict_proba(input)[1] > 0.5;
}

}  // namespace dialogkit::model
