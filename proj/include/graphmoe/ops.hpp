#pragma once

// Differentiable primitives. Every function returns a new Tensor whose adjoint
// rule is recorded when an input requires grad. 2-D tensors are [rows x cols].

#include <cstddef>
#include <utility>
#include <vector>

#include "graphmoe/tensor.hpp"

namespace graphmoe {

// Lower clamp applied to every probability used as a denominator or log argument.
inline constexpr double kProbEps = 1e-10;

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] * [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] * [n x k]^T
Tensor transpose(const Tensor& a);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, const Tensor& s);  // s holds one element
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // ln(max(a, kProbEps))
Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // x[r x c] + bias[c] per row
Tensor scale_rows(const Tensor& x, const Tensor& g);       // x[r x c] * g[r] per row

// ---- reductions ----
Tensor sum(const Tensor& a);                         // scalar
Tensor mean(const Tensor& a);                        // scalar
Tensor sum_axis(const Tensor& a, std::size_t axis);  // 2-D: axis 0 -> [c], axis 1 -> [r]

// ---- structural ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);
// base + scatter of src rows into rows[i] of base.
Tensor scatter_add_rows(const Tensor& base, const Tensor& src, const std::vector<std::size_t>& rows);
// Flattened element gather: out[i] = a.flat[idx[i]].
Tensor gather_flat(const Tensor& a, const std::vector<std::size_t>& idx);
// out[n]: out[idx[i]] += src.flat[i].
Tensor scatter_add_flat(const Tensor& src, const std::vector<std::size_t>& idx, std::size_t n);

// ---- probability ----
// Softmax over the last axis (a vector or each row of a matrix), max-shifted.
Tensor softmax(const Tensor& v);
// v / sum(v) over the last axis.
Tensor normalize(const Tensor& v);

struct Sorted {
  Tensor values;
  // perm[r * n + j] = source column of the j-th largest entry in row r.
  std::vector<std::size_t> perm;
};
// Descending, stable by original index on ties. Vectors or per-row for matrices.
// The adjoint scatters through the inverse permutation.
Sorted sort_descending_with_grad(const Tensor& v);

// KL(p || q) = sum_i p_i ln(p_i / q_i) with p_i = 0 terms contributing 0.
// p must be a probability vector (sum 1 within 1e-9, nonnegative).
Tensor kl_divergence(const Tensor& p, const Tensor& q);
// Row-wise KL(p || q[r]) for p[n] (shared) or p[r x n]. Returns [r].
Tensor kl_divergence_rows(const Tensor& p, const Tensor& q);

// ---- network pieces ----
// Per-row (x - mean) / sqrt(var + eps), no affine.
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5);
// Mean token cross entropy over rows whose target is >= 0.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

}  // namespace graphmoe
