#pragma once

#include "anchorfuse/tape.hpp"

#include <span>
#include <vector>

namespace anchorfuse {

// Differentiable operations over rank-2 tensors. Each records one node with a
// hand-derived adjoint; shape errors throw Error(shape_mismatch).

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x[n x m] + row[1 x m] broadcast over rows
Var add_row(Var x, Var row);

Var sigmoid(Var x);
Var gelu(Var x);

// Per-row standardization without affine parameters.
Var layer_norm_rows(Var x, double eps = 1e-5);
Var softmax_rows(Var x, double temperature = 1.0);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
Var slice_rows(Var x, std::size_t begin, std::size_t count);

// Treats the whole tensor as one vector.
Var l2_normalize(Var x, double min_norm = 1e-12);
Var sum(Var x);
Var dot(Var a, Var b);
// L1 norm; the subgradient at exactly zero is taken as 0.
Var abs_sum(Var x);
// Sum of scalars times fixed weights.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

struct AttentionVars {
    Var query;
    Var key;
    Var value;
    Var output;
};

// Multi-head scaled dot-product attention with projections:
//   out = concat_h(softmax(Q_h K_h^T / sqrt(d)) V_h) * W_o
// where Q = q_src W_q, K = k_src W_k, V = v_src W_v. The causal mask requires
// q_src and k_src to have the same number of rows.
Var attention(Var q_src, Var k_src, Var v_src, const AttentionVars& weights, int heads, bool causal = false);

} // namespace anchorfuse
