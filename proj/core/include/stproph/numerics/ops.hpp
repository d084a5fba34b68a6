// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"

namespace stproph::num {

// Differentiable operations on rank-2 values. Every op records a backward rule
// under the name given in its comment; grad_check exercises each of them.

Var matmul(Var a, Var b);                 // "matmul"
Var add(Var a, Var b);                    // "add"
Var sub(Var a, Var b);                    // "sub"
Var mul(Var a, Var b);                    // "mul" (elementwise)
Var scale(Var a, double s);               // "scale"
Var add_scalar(Var a, double s);          // "add_scalar"
/// Adds a 1 x c row to every row of a.
Var add_row(Var a, Var row);              // "add_row"
Var tanh(Var a);                          // "tanh"
/// Numerically stable log(1 + exp(x)).
Var softplus(Var a);                      // "softplus"
/// Row-wise softmax with max subtraction.
Var softmax_rows(Var a);                  // "softmax"
Var concat_cols(const std::vector<Var>& parts);            // "concat_cols"
/// out.row(i) = a.row(index[i]).
Var gather_rows(Var a, const std::vector<std::size_t>& index);  // "gather_rows"
/// out(i, j) = a(i, index(i, j)) for an index matrix with k columns.
Var take_cols(Var a, const std::vector<std::size_t>& index, std::size_t k);  // "take_cols"
/// Columns [begin, begin + count).
Var slice_cols(Var a, std::size_t begin, std::size_t count);  // "slice_cols"
Var reshape(Var a, Shape shape);          // "reshape"
Var sum(Var a);                           // "sum"
Var mean(Var a);                          // "mean"
/// Multiplies by a precomputed 0 / (1/(1-p)) mask.
Var dropout_with_mask(Var a, const Tensor& mask);   // "dropout"
/// Inverted dropout; identity when rate == 0.
Var dropout(Var a, double rate, Rng& rng);

/// Value-level softmax used by oracles and the ops above.
Tensor softmax_rows(const Tensor& a);
double softplus(double x);

}  // namespace stproph::num
