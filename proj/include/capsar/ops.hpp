#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "capsar/autograd.hpp"
#include "capsar/rng.hpp"
#include "capsar/tensor.hpp"

// The differentiable op vocabulary. Every op checks shapes, records its output
// on the tape of its first argument, and registers a hand-written adjoint.
namespace capsar {

// ---- plain value kernels -------------------------------------------------

// squash(v) = (|v|^2 / (1 + |v|^2)) * v / |v|, and 0 at v = 0.
template <typename T>
void squash_into(std::span<const T> v, std::span<T> out);

template <typename T>
Tensor<T> squash(const Tensor<T>& v);

// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// ---- linear algebra ------------------------------------------------------

// [m x k] x [k x n] -> [m x n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

// y = W x + b with W [out x in], x any shape of size in, b [out] -> [out]
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b);

// ---- elementwise / structural -------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);
// Sum of all elements -> [1]
template <typename T>
Var<T> sum(Var<T> a);

// Elementwise product with a constant of the same size (dropout, masks).
template <typename T>
Var<T> mul_const(Var<T> x, const Tensor<T>& c);

// Row r of x [m x n] scaled by w[r] (constant).
template <typename T>
Var<T> scale_rows_const(Var<T> x, std::span<const T> w);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

// [m x p] ++ [m x q] -> [m x (p + q)]
template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b);

// Stacks equally sized vectors as rows of a [total_rows x n] matrix; rows
// beyond rows.size() are zero.
template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows, std::size_t total_rows);

// Rows of table [V x D] selected by ids -> [ids.size() x D]
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids);

// ---- sequence / capsule ops ---------------------------------------------

// Gated recurrent unit cell. Gate blocks are stacked [reset; update; candidate]:
//   r = sigmoid(Wi_r x + bi_r + Wh_r h + bh_r)
//   z = sigmoid(Wi_z x + bi_z + Wh_z h + bh_z)
//   n = tanh(Wi_n x + bi_n + r * (Wh_n h + bh_n))
//   h' = (1 - z) * n + z * h
// x has size D, h size H, w_input [3H x D], w_hidden [3H x H], biases [3H].
template <typename T>
Var<T> gru_step(Var<T> x, Var<T> h, Var<T> w_input, Var<T> w_hidden, Var<T> b_input,
                Var<T> b_hidden);

// Same-padded stride-1 convolution over time. x [T x Cin],
// filters [K x Cin x Cout] with K odd, bias [Cout] -> [T x Cout].
template <typename T>
Var<T> conv1d_same(Var<T> x, Var<T> filters, Var<T> bias);

// Squash every row of x [m x d] (a rank-1 x is one row).
template <typename T>
Var<T> squash_rows(Var<T> x);

template <typename T>
Var<T> softmax_rows(Var<T> x);

// Euclidean norm of every row of x [m x d] -> [m]
template <typename T>
Var<T> row_norms(Var<T> x);

// Predictions u[j, i, :] = W_j p_i with one transform per parent shared by all
// children. p [M x D], w [N x D' x D] -> [N x M x D']
template <typename T>
Var<T> shared_transform(Var<T> p, Var<T> w);

// s[j, :] = sum_i c[i, j] u[j, i, :]. c [M x N], u [N x M x D'] -> [N x D']
template <typename T>
Var<T> coupled_sum(Var<T> c, Var<T> u);

// a[i, j] = q[j, :] . u[j, i, :]. q [N x D'], u [N x M x D'] -> [M x N]
template <typename T>
Var<T> agreement(Var<T> q, Var<T> u);

// Inverted dropout. Identity when !training or rate == 0.
template <typename T>
Var<T> dropout(Var<T> x, double rate, Rng& rng, bool training);

}  // namespace capsar
