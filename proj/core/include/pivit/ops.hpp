#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "pivit/autograd.hpp"

namespace pivit::nn {

/// Row index that gathers as an all-zero row.
inline constexpr std::size_t kZeroRow = std::numeric_limits<std::size_t>::max();

using RowGroups = std::vector<std::vector<std::size_t>>;

// Linear algebra and elementwise arithmetic. All operands are rank-2 views.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_bias(const Var& x, const Var& bias);
Var scale(const Var& x, double s);
Var sum(const Var& x);
Var reshape(const Var& x, Shape shape);

Var gelu(const Var& x);
Var relu(const Var& x);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

// Row plumbing.
Var gather_rows(const Var& x, const std::vector<std::size_t>& index);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var mean_rows(const Var& x);
/// One output row per group: the mean of that group's rows.
Var segment_mean_rows(const Var& x, const RowGroups& groups);

/// Multi-head scaled dot-product attention restricted to row groups.
/// `qkv` packs [Q | K | V] along columns (N x 3d). Each group attends only
/// within itself; a row that belongs to several groups receives the mean of
/// its per-group outputs, a row in no group receives zeros. When `capture`
/// is non-null the softmax matrices are appended to it (group-major,
/// head-minor).
Var grouped_attention(const Var& qkv, const RowGroups& groups, std::size_t heads,
                      std::vector<Tensor>* capture = nullptr);

// Losses. Each returns a 1-element tensor.
/// -log softmax(logits)[label] for a single row of logits.
Var cross_entropy(const Var& logits, std::size_t label);
/// -sum_i p_i log softmax(logits)_i against a fixed target distribution.
Var soft_cross_entropy(const Var& logits, const Tensor& target_probs);
/// Elementwise sigmoid BCE, summed, divided by `divisor`.
Var bce_with_logits(const Var& logits, const Tensor& targets, double divisor);
/// Sum of squared differences divided by `divisor`.
Var squared_error(const Var& pred, const Tensor& target, double divisor);
/// Squared error restricted to elements where mask != 0.
Var masked_squared_error(const Var& pred, const Tensor& target, const Tensor& mask, double divisor);

double log_sum_exp(const double* x, std::size_t n);
std::vector<double> softmax(const std::vector<double>& logits);

}  // namespace pivit::nn
