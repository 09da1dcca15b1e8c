#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dialogkit/rng.hpp"
#include "dialogkit/tensor.hpp"

// Differentiable primitives. Matrix ops treat a tensor as rows() x cols();
// "last dim" ops (softmax, layer_norm, cross_entropy) work row by row.
namespace dialogkit::nn {

Tensor matmul(const Tensor& a, const Tensor& b);     // (n,k)x(k,m)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // (n,k)x(m,k)^T
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a (n,m) + bias (m), broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor tanh(const Tensor& a);
// log(1 - a), argument clamped to at least `floor`.
Tensor log1m(const Tensor& a, double floor = 1e-12);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Rows of `table` (V,d) selected by ids -> (n,d).
Tensor embed(const Tensor& table, std::span<const int> ids);

// Mean over positions with mask[i] != 0 of -log softmax(logits)[i, target[i]].
// An empty mask means "all positions". Throws if no position is selected.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const unsigned char> mask = {});

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);

// Row-wise dot product of two (n,m) tensors -> (n).
Tensor rows_dot(const Tensor& a, const Tensor& b);
// Elements a[rows[i], cols[i]] -> (len).
Tensor gather(const Tensor& a, std::span<const std::size_t> rows,
              std::span<const std::size_t> cols);

// Scaled dot-product attention split over `heads` column groups.
// q (n,d), k and v (m,d) -> (n,d). With `causal`, query i only sees keys
// j <= i + (m - n).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, bool causal);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& a, double p, Rng& rng);

}  // namespace dialogkit::nn
