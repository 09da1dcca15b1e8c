#include "dialogkit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace dialogkit::nn {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using detail::Node;
using Backward = std::function<void(Node&)>;

[[noreturn]] void dim_error(const char* op, const std::string& what) {
  throw DimensionError(std::string(op) + ": " + what);
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   Backward backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const Tensor* t : inputs) track = track || t->requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(const char* op, Shape shape, std::vector<double> data,
                     const std::vector<Tensor>& inputs, Backward backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Grad buffer of input i, or nullptr when that input needs no gradient.
std::vector<double>* grad_of(Node& n, std::size_t i) {
  Node& in = *n.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.dim() != 2) dim_error(op, "expected a matrix, got " + shape_str(t.shape()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    dim_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

ConstMatMap cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMatMap(v.data(), static_cast<Eigen::Index>(r),
                     static_cast<Eigen::Index>(c));
}
MatMap mmap(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MatMap(v.data(), static_cast<Eigen::Index>(r),
                static_cast<Eigen::Index>(c));
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(op, a.shape(), std::move(out), {&a}, [df](Node& n) {
    auto* ga = grad_of(n, 0);
    if (!ga) return;
    const auto& x = n.inputs[0]->data;
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      (*ga)[i] += n.grad[i] * df(x[i], n.data[i]);
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    dim_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) +
                            " x " + shape_str(b.shape()));
  }
  std::vector<double> out(n * m);
  mmap(out, n, m).noalias() =
      cmap(a.node()->data, n, k) * cmap(b.node()->data, k, m);
  return make_result("matmul", {n, m}, std::move(out), {&a, &b},
                     [n, k, m](Node& node) {
                       const auto dc = cmap(node.grad, n, m);
                       if (auto* ga = grad_of(node, 0)) {
                         mmap(*ga, n, k).noalias() +=
                             dc * cmap(node.inputs[1]->data, k, m).transpose();
                       }
                       if (auto* gb = grad_of(node, 1)) {
                         mmap(*gb, k, m).noalias() +=
                             cmap(node.inputs[0]->data, n, k).transpose() * dc;
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a);
  require_matrix("matmul_nt", b);
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[0];
  if (b.shape()[1] != k) {
    dim_error("matmul_nt", "inner dimensions differ: " + shape_str(a.shape()) +
                               " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(n * m);
  mmap(out, n, m).noalias() =
      cmap(a.node()->data, n, k) * cmap(b.node()->data, m, k).transpose();
  return make_result("matmul_nt", {n, m}, std::move(out), {&a, &b},
                     [n, k, m](Node& node) {
                       const auto dc = cmap(node.grad, n, m);
                       if (auto* ga = grad_of(node, 0)) {
                         mmap(*ga, n, k).noalias() +=
                             dc * cmap(node.inputs[1]->data, m, k);
                       }
                       if (auto* gb = grad_of(node, 1)) {
                         mmap(*gb, m, k).noalias() +=
                             dc.transpose() * cmap(node.inputs[0]->data, n, k);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  mmap(out, c, r) = cmap(a.node()->data, r, c).transpose();
  return make_result("transpose", {c, r}, std::move(out), {&a},
                     [r, c](Node& node) {
                       if (auto* ga = grad_of(node, 0)) {
                         mmap(*ga, r, c) += cmap(node.grad, c, r).transpose();
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result("add", a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = grad_of(n, k)) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result("sub", a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    if (auto* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
    }
    if (auto* g = grad_of(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result("mul", a.shape(), std::move(out), {&a, &b}, [](Node& n) {
    const auto& x = n.inputs[0]->data;
    const auto& y = n.inputs[1]->data;
    if (auto* g = grad_of(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * y[i];
    }
    if (auto* g = grad_of(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * x[i];
    }
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t c = a.cols(), r = a.rows();
  if (bias.numel() != c) {
    dim_error("add_bias", "bias " + shape_str(bias.shape()) +
                              " does not match last dim of " +
                              shape_str(a.shape()));
  }
  std::vector<double> out(a.numel());
  const auto x = a.data(), b = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + b[j];
  }
  return make_result("add_bias", a.shape(), std::move(out), {&a, &bias},
                     [r, c](Node& n) {
                       if (auto* g = grad_of(n, 0)) {
                         for (std::size_t i = 0; i < n.grad.size(); ++i) {
                           (*g)[i] += n.grad[i];
                         }
                       }
                       if (auto* g = grad_of(n, 1)) {
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                             (*g)[j] += n.grad[i * c + j];
                           }
                         }
                       }
                     });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return s * x; },
      [s](double, double) { return s; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) +
               0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor log1m(const Tensor& a, double floor) {
  return unary(
      "log1m", a, [floor](double x) { return std::log(std::max(1.0 - x, floor)); },
      [floor](double x, double) {
        return (1.0 - x) > floor ? -1.0 / (1.0 - x) : 0.0;
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result("sum", {}, {s}, {&a}, [](Node& n) {
    if (auto* g = grad_of(n, 0)) {
      for (auto& v : *g) v += n.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) dim_error("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  if (c == 0) dim_error("softmax", "empty last dimension");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double* o = out.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return make_result("softmax", a.shape(), std::move(out), {&a},
                     [r, c](Node& n) {
                       auto* g = grad_of(n, 0);
                       if (!g) return;
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* y = n.data.data() + i * c;
                         const double* dy = n.grad.data() + i * c;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += y[j] * dy[j];
                         for (std::size_t j = 0; j < c; ++j) {
                           (*g)[i * c + j] += y[j] * (dy[j] - dot);
                         }
                       }
                     });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  if (c == 0) dim_error("log_softmax", "empty last dimension");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double* o = out.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) o[j] = row[j] - lz;
  }
  return make_result("log_softmax", a.shape(), std::move(out), {&a},
                     [r, c](Node& n) {
                       auto* g = grad_of(n, 0);
                       if (!g) return;
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* y = n.data.data() + i * c;
                         const double* dy = n.grad.data() + i * c;
                         double s = 0.0;
                         for (std::size_t j = 0; j < c; ++j) s += dy[j];
                         for (std::size_t j = 0; j < c; ++j) {
                           (*g)[i * c + j] += dy[j] - std::exp(y[j]) * s;
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c) {
    dim_error("layer_norm", "gain/bias size does not match last dim of " +
                                shape_str(x.shape()));
  }
  std::vector<double> out(x.numel()), xhat(x.numel()), inv(r);
  const auto in = x.data(), gm = gamma.data(), bt = beta.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = in.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * inv[i];
      xhat[i * c + j] = h;
      out[i * c + j] = h * gm[j] + bt[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
      [r, c, xhat = std::move(xhat), inv = std::move(inv)](Node& n) {
        const auto& gm = n.inputs[1]->data;
        auto* gx = grad_of(n, 0);
        auto* gg = grad_of(n, 1);
        auto* gb = grad_of(n, 2);
        std::vector<double> dxhat(c);
        for (std::size_t i = 0; i < r; ++i) {
          const double* dy = n.grad.data() + i * c;
          const double* h = xhat.data() + i * c;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            if (gg) (*gg)[j] += dy[j] * h[j];
            if (gb) (*gb)[j] += dy[j];
            dxhat[j] = dy[j] * gm[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * h[j];
          }
          if (!gx) continue;
          const double nc = static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            (*gx)[i * c + j] += inv[i] / nc * (nc * dxhat[j] - s1 - h[j] * s2);
          }
        }
      });
}

Tensor embed(const Tensor& table, std::span<const int> ids) {
  require_matrix("embed", table);
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<double> out(ids.size() * d);
  const auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      dim_error("embed", "id " + std::to_string(ids[i]) +
                             " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result("embed", {ids.size(), d}, std::move(out), {&table},
                     [d, idv = std::move(idv)](Node& n) {
                       auto* g = grad_of(n, 0);
                       if (!g) return;
                       for (std::size_t i = 0; i < idv.size(); ++i) {
                         double* dst = g->data() + static_cast<std::size_t>(idv[i]) * d;
                         const double* src = n.grad.data() + i * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const unsigned char> mask) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r) {
    dim_error("cross_entropy", std::to_string(targets.size()) +
                                   " targets for " + std::to_string(r) + " rows");
  }
  if (!mask.empty() && mask.size() != r) {
    dim_error("cross_entropy", "mask length does not match rows");
  }
  std::vector<double> probs(logits.numel());
  std::vector<unsigned char> sel(r, 1);
  std::size_t count = 0;
  double total = 0.0;
  const auto x = logits.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (!mask.empty()) sel[i] = mask[i] != 0;
    if (!sel[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      dim_error("cross_entropy", "target " + std::to_string(targets[i]) +
                                     " outside " + std::to_string(c) + " classes");
    }
    const double* row = x.data() + i * c;
    double* p = probs.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) p[j] /= z;
    total -= row[targets[i]] - mx - std::log(z);
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: no unmasked positions");
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result(
      "cross_entropy", {}, {total / static_cast<double>(count)}, {&logits},
      [r, c, count, probs = std::move(probs), sel = std::move(sel),
       tg = std::move(tg)](Node& n) {
        auto* g = grad_of(n, 0);
        if (!g) return;
        const double s = n.grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < r; ++i) {
          if (!sel[i]) continue;
          for (std::size_t j = 0; j < c; ++j) {
            (*g)[i * c + j] += s * probs[i * c + j];
          }
          (*g)[i * c + static_cast<std::size_t>(tg[i])] -= s;
        }
      });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix("slice_rows", a);
  const std::size_t c = a.cols();
  if (begin + count > a.shape()[0]) dim_error("slice_rows", "range out of bounds");
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          a.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return make_result("slice_rows", {count, c}, std::move(out), {&a},
                     [begin, c](Node& n) {
                       if (auto* g = grad_of(n, 0)) {
                         for (std::size_t i = 0; i < n.grad.size(); ++i) {
                           (*g)[begin * c + i] += n.grad[i];
                         }
                       }
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix("slice_cols", a);
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (begin + count > c) dim_error("slice_cols", "range out of bounds");
  std::vector<double> out(r * count);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(x.data() + i * c + begin, count, out.data() + i * count);
  }
  return make_result("slice_cols", {r, count}, std::move(out), {&a},
                     [r, c, begin, count](Node& n) {
                       if (auto* g = grad_of(n, 0)) {
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < count; ++j) {
                             (*g)[i * c + begin + j] += n.grad[i * count + j];
                           }
                         }
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) dim_error("concat_rows", "no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p);
    if (p.cols() != c) dim_error("concat_rows", "column counts differ");
    offsets.push_back(r);
    r += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result_n("concat_rows", {r, c}, std::move(out), parts,
                       [c, offsets](Node& n) {
                         for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                           auto* g = grad_of(n, k);
                           if (!g) continue;
                           for (std::size_t i = 0; i < g->size(); ++i) {
                             (*g)[i] += n.grad[offsets[k] * c + i];
                           }
                         }
                       });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) dim_error("concat_cols", "no inputs");
  const std::size_t r = parts[0].shape().at(0);
  std::size_t c = 0;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    require_matrix("concat_cols", p);
    if (p.shape()[0] != r) dim_error("concat_cols", "row counts differ");
    offsets.push_back(c);
    widths.push_back(p.shape()[1]);
    c += p.shape()[1];
  }
  std::vector<double> out(r * c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(x.data() + i * widths[k], widths[k], out.data() + i * c + offsets[k]);
    }
  }
  return make_result_n("concat_cols", {r, c}, std::move(out), parts,
                       [r, c, offsets, widths](Node& n) {
                         for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                           auto* g = grad_of(n, k);
                           if (!g) continue;
                           for (std::size_t i = 0; i < r; ++i) {
                             for (std::size_t j = 0; j < widths[k]; ++j) {
                               (*g)[i * widths[k] + j] += n.grad[i * c + offsets[k] + j];
                             }
                           }
                         }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    dim_error("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {&a},
                     [](Node& n) {
                       if (auto* g = grad_of(n, 0)) {
                         for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
                       }
                     });
}

Tensor rows_dot(const Tensor& a, const Tensor& b) {
  require_same("rows_dot", a, b);
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j] * y[i * c + j];
  }
  return make_result("rows_dot", {r}, std::move(out), {&a, &b}, [r, c](Node& n) {
    const auto& x = n.inputs[0]->data;
    const auto& y = n.inputs[1]->data;
    auto* ga = grad_of(n, 0);
    auto* gb = grad_of(n, 1);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        if (ga) (*ga)[i * c + j] += n.grad[i] * y[i * c + j];
        if (gb) (*gb)[i * c + j] += n.grad[i] * x[i * c + j];
      }
    }
  });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> rows,
              std::span<const std::size_t> cols) {
  if (rows.size() != cols.size()) dim_error("gather", "index lists differ in length");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(rows.size());
  std::vector<std::size_t> flat(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r || cols[i] >= c) dim_error("gather", "index out of bounds");
    flat[i] = rows[i] * c + cols[i];
    out[i] = a.data()[flat[i]];
  }
  return make_result("gather", {rows.size()}, std::move(out), {&a},
                     [flat = std::move(flat)](Node& n) {
                       if (auto* g = grad_of(n, 0)) {
                         for (std::size_t i = 0; i < flat.size(); ++i) {
                           (*g)[flat[i]] += n.grad[i];
                         }
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, bool causal) {
  require_matrix("attention", q);
  require_matrix("attention", k);
  require_matrix("attention", v);
  require_same("attention", k, v);
  const std::size_t n = q.shape()[0], d = q.shape()[1], m = k.shape()[0];
  if (k.shape()[1] != d) {
    dim_error("attention", "query width " + std::to_string(d) + " vs key width " +
                               std::to_string(k.shape()[1]));
  }
  if (heads == 0 || d % heads != 0) {
    dim_error("attention", std::to_string(heads) + " heads do not divide width " +
                               std::to_string(d));
  }
  if (m == 0) dim_error("attention", "no keys");
  if (causal && m < n) dim_error("attention", "causal attention needs at least as many keys as queries");
  const std::size_t dh = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t offset = m - n;
  const auto Q = cmap(q.node()->data, n, d);
  const auto K = cmap(k.node()->data, m, d);
  const auto V = cmap(v.node()->data, m, d);

  // Attention weights per head, kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(heads * n * m, 0.0);
  std::vector<double> out(n * d);
  auto O = mmap(out, n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    const auto w = static_cast<Eigen::Index>(dh);
    auto P = MatMap(probs->data() + h * n * m, static_cast<Eigen::Index>(n),
                    static_cast<Eigen::Index>(m));
    P.noalias() = (Q.middleCols(c0, w) * K.middleCols(c0, w).transpose()) * s;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t visible = causal ? i + offset + 1 : m;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, P(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < visible; ++j) z += (P(i, j) = std::exp(P(i, j) - mx));
      for (std::size_t j = 0; j < visible; ++j) P(i, j) /= z;
      for (std::size_t j = visible; j < m; ++j) P(i, j) = 0.0;
    }
    O.middleCols(c0, w).noalias() = P * V.middleCols(c0, w);
  }
  return make_result("attention", {n, d}, std::move(out), {&q, &k, &v},
                     [n, m, d, dh, heads, s, probs](Node& node) {
    const auto dO = cmap(node.grad, n, d);
    const auto Qd = cmap(node.inputs[0]->data, n, d);
    const auto Kd = cmap(node.inputs[1]->data, m, d);
    const auto Vd = cmap(node.inputs[2]->data, m, d);
    auto* gq = grad_of(node, 0);
    auto* gk = grad_of(node, 1);
    auto* gv = grad_of(node, 2);
    RowMat dP(n, m), dS(n, m);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      const auto P = ConstMatMap(probs->data() + h * n * m, static_cast<Eigen::Index>(n),
                                 static_cast<Eigen::Index>(m));
      if (gv) mmap(*gv, m, d).middleCols(c0, w).noalias() += P.transpose() * dO.middleCols(c0, w);
      if (!gq && !gk) continue;
      dP.noalias() = dO.middleCols(c0, w) * Vd.middleCols(c0, w).transpose();
      const Eigen::VectorXd dot = (dP.array() * P.array()).rowwise().sum();
      dS = (P.array() * (dP.array().colwise() - dot.array())) * s;
      if (gq) mmap(*gq, n, d).middleCols(c0, w).noalias() += dS * Kd.middleCols(c0, w);
      if (gk) mmap(*gk, m, d).middleCols(c0, w).noalias() += dS.transpose() * Qd.middleCols(c0, w);
    }
  });
}

Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ContractError("dropout: rate must be < 1");
  std::vector<double> keep(a.numel());
  std::vector<double> out(a.numel());
  const double s = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    keep[i] = rng.uniform() < p ? 0.0 : s;
    out[i] = a.data()[i] * keep[i];
  }
  return make_result("dropout", a.shape(), std::move(out), {&a},
                     [keep = std::move(keep)](Node& n) {
                       if (auto* g = grad_of(n, 0)) {
                         for (std::size_t i = 0; i < keep.size(); ++i) {
                           (*g)[i] += n.grad[i] * keep[i];
                         }
                       }
                     });
}

}  // namespace dialogkit::nn
