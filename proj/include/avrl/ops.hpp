#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "avrl/autodiff.hpp"

// Differentiable primitives. All operate on the matrix view of a tensor
// (rows x cols) and reduce in a fixed sequential order.
namespace avrl::ops {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// a (n x c) + bias broadcast over rows; bias has c elements.
Var add_bias(const Var& a, const Var& bias);
/// x @ w + b, with w (in x out) and b (out).
Var linear(const Var& x, const Var& w, const Var& b);

Var gelu(const Var& a);
Var relu(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var clamp(const Var& a, double lo, double hi);

/// Per-row normalization over columns with affine gamma/beta (c elements each).
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);

Var transpose(const Var& a);
Var reshape(const Var& a, std::size_t rows, std::size_t cols);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);

/// im2col-style gather. Output row r is the concatenation of input rows
/// index[r*k + j] for j in [0, k); a negative index contributes zeros.
Var gather_rows(const Var& x, std::vector<std::int64_t> index, std::size_t k);
/// x (r x k*c) -> r x c, averaging the k column blocks.
Var block_mean(const Var& x, std::size_t k);

/// Row i scaled to x_i / max(||x_i||, eps).
Var row_normalize(const Var& x, double eps = 1e-8);
/// (n x c) . (n x c) -> n x 1 row-wise dot products.
Var row_dot(const Var& a, const Var& b);
/// Selects a[i, cols[i]] into an n x 1 column.
Var pick(const Var& a, const std::vector<std::size_t>& cols);
/// Rows flagged in `replace` become `fill` (c elements); others pass through.
Var replace_rows(const Var& x, const std::vector<bool>& replace, const Var& fill);

Var sum(const Var& a);
Var mean(const Var& a);

/// Inverted dropout; identity when p == 0.
Var dropout(const Var& a, double p, std::mt19937_64& rng);

}  // namespace avrl::ops
