#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "capsar/autograd.hpp"
#include "capsar/gradcheck.hpp"
#include "capsar/ops.hpp"
#include "test_util.hpp"

using namespace capsar;
using capsar::testing::probe;
using capsar::testing::random_tensor;

namespace {

// Gradient check of an op whose inputs are all parameters named "in0", "in1", ...
double op_grad_error(const std::vector<Tensor<double>>& inputs,
                     const std::function<Var<double>(const std::vector<Var<double>>&)>& op) {
  ParamSet<double> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.add("in" + std::to_string(i), inputs[i]);
  const ScalarGraph f = [&](Tape<double>& tape, const ParamSet<double>& p) {
    std::vector<Var<double>> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const std::string name = "in" + std::to_string(i);
      vars.push_back(tape.parameter(name, p.at(name)));
    }
    return probe(op(vars));
  };
  return finite_diff_check(f, params).max_rel_error;
}

Tensor<double> eval_op(const std::vector<Tensor<double>>& inputs,
                       const std::function<Var<double>(const std::vector<Var<double>>&)>& op) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return op(vars).value();
}

constexpr double kGradTol = 1e-4;

}  // namespace

// ---- matmul / affine ------------------------------------------------------

TEST(Matmul, IdentityAndHandArithmetic) {
  auto id = Tensor<double>::matrix({{1, 0}, {0, 1}});
  auto b = Tensor<double>::matrix({{5, 6}, {7, 8}});
  auto mm = [](const auto& v) { return matmul(v[0], v[1]); };
  EXPECT_EQ(eval_op({id, b}, mm), b);
  auto r = eval_op({Tensor<double>::matrix({{1, 2}}), Tensor<double>::matrix({{3}, {4}})}, mm);
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(r[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  EXPECT_LT(op_grad_error({random_tensor({4, 3}, rng), random_tensor({3, 2}, rng)},
                          [](const auto& v) { return matmul(v[0], v[1]); }),
            kGradTol);
}

TEST(Affine, ValueAndGradient) {
  auto w = Tensor<double>::matrix({{1, 2}, {3, 4}, {5, 6}});
  auto x = Tensor<double>::vector({1, -1});
  auto b = Tensor<double>::vector({0.5, 0, -0.5});
  auto y = eval_op({x, w, b}, [](const auto& v) { return affine(v[0], v[1], v[2]); });
  EXPECT_EQ(y, Tensor<double>::vector({-0.5, -1, -1.5}));
  Rng rng(2);
  EXPECT_LT(op_grad_error({random_tensor({4}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)},
                          [](const auto& v) { return affine(v[0], v[1], v[2]); }),
            kGradTol);
}

// ---- elementwise / structural ----------------------------------------------

TEST(Elementwise, Gradients) {
  Rng rng(3);
  auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
  EXPECT_LT(op_grad_error({a, b}, [](const auto& v) { return add(v[0], v[1]); }), kGradTol);
  EXPECT_LT(op_grad_error({a, b}, [](const auto& v) { return sub(v[0], v[1]); }), kGradTol);
  EXPECT_LT(op_grad_error({a, b}, [](const auto& v) { return mul(v[0], v[1]); }), kGradTol);
  EXPECT_LT(op_grad_error({a}, [](const auto& v) { return scale(v[0], 2.5); }), kGradTol);
  const auto c = random_tensor({2, 3}, rng);
  EXPECT_LT(op_grad_error({a}, [&](const auto& v) { return mul_const(v[0], c); }), kGradTol);
  const std::vector<double> w{0.0, -2.0};
  EXPECT_LT(op_grad_error({a}, [&](const auto& v) { return scale_rows_const<double>(v[0], w); }), kGradTol);
  EXPECT_LT(op_grad_error({a}, [](const auto& v) { return reshape(v[0], {3, 2}); }), kGradTol);
  EXPECT_LT(op_grad_error({a, random_tensor({2, 4}, rng)}, [](const auto& v) { return concat_cols(v[0], v[1]); }),
            kGradTol);
}

TEST(Elementwise, ShapeMismatchIsDimensionError) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({3, 2}));
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(mul(a, b), DimensionError);
  EXPECT_THROW(concat_cols(a, b), DimensionError);
  EXPECT_THROW(reshape(a, {5}), DimensionError);
}

TEST(Structural, StackRowsPadsWithZeros) {
  auto r1 = Tensor<double>::vector({1, 2});
  auto r2 = Tensor<double>::vector({3, 4});
  auto y = eval_op({r1, r2}, [](const auto& v) { return stack_rows<double>({v[0], v[1]}, 4); });
  EXPECT_EQ(y, Tensor<double>::matrix({{1, 2}, {3, 4}, {0, 0}, {0, 0}}));
  Rng rng(4);
  EXPECT_LT(op_grad_error({random_tensor({3}, rng), random_tensor({3}, rng)},
                          [](const auto& v) { return stack_rows<double>({v[0], v[1]}, 3); }),
            kGradTol);
}

TEST(Structural, GatherRowsAccumulatesRepeatedIds) {
  auto table = Tensor<double>::matrix({{0, 0}, {1, 2}, {3, 4}});
  const std::vector<std::size_t> ids{2, 1, 2};
  auto y = eval_op({table}, [&](const auto& v) { return gather_rows<double>(v[0], ids); });
  EXPECT_EQ(y, Tensor<double>::matrix({{3, 4}, {1, 2}, {3, 4}}));

  ParamSet<double> params;
  params.add("t", table);
  Tape<double> tape;
  GradMap<double> grads;
  tape.backward(sum(gather_rows<double>(tape.parameter("t", params.at("t")), ids)), grads);
  EXPECT_EQ(grads.at("t"), Tensor<double>::matrix({{0, 0}, {1, 1}, {2, 2}}));

  const std::vector<std::size_t> bad{3};
  Tape<double> t2;
  EXPECT_THROW(gather_rows<double>(t2.constant(table), bad), DimensionError);
}

TEST(Structural, RowNormsAndSum) {
  auto x = Tensor<double>::matrix({{3, 4}, {0, 0}, {1, 0}});
  auto n = eval_op({x}, [](const auto& v) { return row_norms(v[0]); });
  EXPECT_EQ(n, Tensor<double>::vector({5, 0, 1}));
  Rng rng(5);
  EXPECT_LT(op_grad_error({random_tensor({3, 4}, rng)}, [](const auto& v) { return row_norms(v[0]); }), kGradTol);
  EXPECT_DOUBLE_EQ(eval_op({x}, [](const auto& v) { return sum(v[0]); })[0], 8.0);
}

// ---- conv1d_same -------------------------------------------------------------

namespace {

// Direct definition: out[t, o] = b[o] + sum_k sum_c x[t + k - K/2, c] f[k, c, o].
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& f, const Tensor<double>& b) {
  const std::size_t T = x.dim(0), cin = x.dim(1), K = f.dim(0), cout = f.dim(2);
  Tensor<double> out({T, cout});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < K; ++k) {
        const long src = long(t) + long(k) - long(K / 2);
        if (src < 0 || src >= long(T)) continue;
        for (std::size_t c = 0; c < cin; ++c) acc += x.at(src, c) * f[(k * cin + c) * cout + o];
      }
      out[t * cout + o] = acc;
    }
  }
  return out;
}

Var<double> conv(const std::vector<Var<double>>& v) { return conv1d_same(v[0], v[1], v[2]); }

}  // namespace

TEST(Conv1d, IdentityKernel) {
  Rng rng(6);
  auto x = random_tensor({4, 3}, rng);
  Tensor<double> f({1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) f[c * 3 + c] = 1.0;
  EXPECT_EQ(eval_op({x, f, Tensor<double>({3})}, conv), x);
}

TEST(Conv1d, HandArithmeticWithZeroPadding) {
  auto x = Tensor<double>::matrix({{1}, {2}, {3}});
  auto f = Tensor<double>({3, 1, 1}, {1, 1, 1});
  auto y = eval_op({x, f, Tensor<double>({1})}, conv);
  EXPECT_EQ(y, Tensor<double>::matrix({{3}, {6}, {5}}));
}

TEST(Conv1d, MatchesDirectDefinitionAndPreservesLength) {
  Rng rng(7);
  for (std::size_t K : {1u, 3u, 5u, 7u}) {
    auto x = random_tensor({5, 2}, rng);
    auto f = random_tensor({K, 2, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto y = eval_op({x, f, b}, conv);
    ASSERT_EQ(y.shape(), (Shape{5, 3})) << "K=" << K;
    const auto ref = naive_conv(x, f, b);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv1d, EvenKernelIsConfigError) {
  Tape<double> tape;
  EXPECT_THROW(conv1d_same(tape.constant(Tensor<double>({5, 2})), tape.constant(Tensor<double>({2, 2, 3})),
                           tape.constant(Tensor<double>({3}))),
               ConfigError);
}

TEST(Conv1d, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  EXPECT_LT(op_grad_error({random_tensor({5, 2}, rng), random_tensor({3, 2, 3}, rng), random_tensor({3}, rng)}, conv),
            kGradTol);
}

// ---- gru_step ------------------------------------------------------------------

namespace {

Var<double> gru(const std::vector<Var<double>>& v) { return gru_step(v[0], v[1], v[2], v[3], v[4], v[5]); }

}  // namespace

TEST(GruStep, AllZeroGivesZero) {
  const std::size_t D = 3, H = 2;
  auto y = eval_op({Tensor<double>({D}), Tensor<double>({H}), Tensor<double>({3 * H, D}), Tensor<double>({3 * H, H}),
                    Tensor<double>({3 * H}), Tensor<double>({3 * H})},
                   gru);
  EXPECT_EQ(y, Tensor<double>({H}));
}

TEST(GruStep, SaturatedUpdateGateCarriesState) {
  const std::size_t D = 3, H = 4;
  Rng rng(9);
  auto h = random_tensor({H}, rng, -0.9, 0.9);
  Tensor<double> b_in({3 * H});
  for (std::size_t i = H; i < 2 * H; ++i) b_in[i] = 40.0;  // update block
  auto y = eval_op({random_tensor({D}, rng), h, random_tensor({3 * H, D}, rng), random_tensor({3 * H, H}, rng), b_in,
                    Tensor<double>({3 * H})},
                   gru);
  for (std::size_t i = 0; i < H; ++i) EXPECT_NEAR(y[i], h[i], 1e-12);
}

TEST(GruStep, MatchesGateEquations) {
  const std::size_t D = 2, H = 3;
  Rng rng(10);
  auto x = random_tensor({D}, rng), h = random_tensor({H}, rng);
  auto wi = random_tensor({3 * H, D}, rng), wh = random_tensor({3 * H, H}, rng);
  auto bi = random_tensor({3 * H}, rng), bh = random_tensor({3 * H}, rng);
  auto y = eval_op({x, h, wi, wh, bi, bh}, gru);
  auto pre_i = [&](std::size_t row) {
    double s = bi[row];
    for (std::size_t c = 0; c < D; ++c) s += wi.at(row, c) * x[c];
    return s;
  };
  auto pre_h = [&](std::size_t row) {
    double s = bh[row];
    for (std::size_t c = 0; c < H; ++c) s += wh.at(row, c) * h[c];
    return s;
  };
  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t j = 0; j < H; ++j) {
    const double r = sigmoid(pre_i(j) + pre_h(j));
    const double z = sigmoid(pre_i(H + j) + pre_h(H + j));
    const double n = std::tanh(pre_i(2 * H + j) + r * pre_h(2 * H + j));
    EXPECT_NEAR(y[j], (1 - z) * n + z * h[j], 1e-12);
  }
}

TEST(GruStep, StaysInsideUnitBox) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto y = eval_op({random_tensor({3}, rng, -5, 5), random_tensor({4}, rng, -0.999, 0.999),
                      random_tensor({12, 3}, rng, -3, 3), random_tensor({12, 4}, rng, -3, 3),
                      random_tensor({12}, rng, -3, 3), random_tensor({12}, rng, -3, 3)},
                     gru);
    for (double v : y.values()) ASSERT_LT(std::abs(v), 1.0);
  }
}

TEST(GruStep, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  EXPECT_LT(op_grad_error({random_tensor({3}, rng), random_tensor({4}, rng), random_tensor({12, 3}, rng),
                           random_tensor({12, 4}, rng), random_tensor({12}, rng), random_tensor({12}, rng)},
                          gru),
            kGradTol);
}

// ---- squash / softmax ------------------------------------------------------------

TEST(Squash, Examples) {
  EXPECT_EQ(squash(Tensor<double>::vector({0, 0, 0})), Tensor<double>::vector({0, 0, 0}));
  auto a = squash(Tensor<double>::vector({1, 0}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.0);
  auto b = squash(Tensor<double>::vector({3, 4}));
  EXPECT_NEAR(b[0], 25.0 / 26.0 * 0.6, 1e-12);
  EXPECT_NEAR(b[1], 25.0 / 26.0 * 0.8, 1e-12);
  EXPECT_NEAR(std::sqrt(squared_norm<double>(b.values())), 0.9615, 1e-4);
}

TEST(Squash, NormBoundDirectionAndMonotonicity) {
  Rng rng(13);
  for (int i = 0; i < 2000; ++i) {
    const std::size_t d = 1 + rng.below(8);
    const double scale = std::pow(10.0, rng.uniform(-3.0, 3.0));
    auto v = random_tensor({d}, rng, -scale, scale);
    auto q = squash(v);
    const double nv = std::sqrt(squared_norm<double>(v.values()));
    const double nq = std::sqrt(squared_norm<double>(q.values()));
    ASSERT_LT(nq, 1.0);
    EXPECT_NEAR(nq, nv * nv / (1 + nv * nv), 1e-12);
    if (nv > 0) EXPECT_NEAR(dot<double>(v.values(), q.values()) / (nv * nq), 1.0, 1e-12);
  }
  double prev = -1.0;
  for (double r = 0.0; r < 20.0; r += 0.25) {
    const double n = std::sqrt(squared_norm<double>(squash(Tensor<double>::vector({r})).values()));
    EXPECT_GT(n, prev);
    prev = n;
  }
}

TEST(Squash, GradientMatchesFiniteDifferences) {
  Rng rng(14);
  EXPECT_LT(op_grad_error({random_tensor({4, 3}, rng)}, [](const auto& v) { return squash_rows(v[0]); }), kGradTol);
  // Large and small norms exercise both ends of the Jacobian.
  EXPECT_LT(op_grad_error({random_tensor({2, 3}, rng, -5, 5)}, [](const auto& v) { return squash_rows(v[0]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({random_tensor({2, 3}, rng, -0.01, 0.01)}, [](const auto& v) { return squash_rows(v[0]); }),
            kGradTol);
}

TEST(Squash, CorruptedAdjointFailsTheCheck) {
  Rng rng(15);
  auto x = random_tensor({3, 3}, rng);
  debug::set_corrupt_squash_adjoint(true);
  const double err = op_grad_error({x}, [](const auto& v) { return squash_rows(v[0]); });
  debug::set_corrupt_squash_adjoint(false);
  EXPECT_GT(err, 1e-3);
}

TEST(Softmax, Examples) {
  auto u = softmax_rows(Tensor<double>::matrix({{0, 0, 0}}));
  for (double v : u.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto s = softmax_rows(Tensor<double>::matrix({{1000, 1000}}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  auto l = softmax_rows(Tensor<double>::matrix({{0, std::log(3.0)}}));
  EXPECT_NEAR(l[0], 0.25, 1e-12);
  EXPECT_NEAR(l[1], 0.75, 1e-12);
  auto f = softmax_rows(Tensor<float>::matrix({{1000.0f, -1000.0f}}));
  EXPECT_TRUE(f.all_finite());
}

TEST(Softmax, RowsSumToOneAndShiftInvariance) {
  Rng rng(16);
  for (int i = 0; i < 200; ++i) {
    auto x = random_tensor({3, 5}, rng, -20, 20);
    auto y = softmax_rows(x);
    auto shifted = x;
    const double c = rng.uniform(-50, 50);
    for (std::size_t j = 5; j < 10; ++j) shifted[j] += c;
    auto ys = softmax_rows(shifted);
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        ASSERT_GE(y[r * 5 + j], 0.0);
        total += y[r * 5 + j];
        EXPECT_NEAR(y[r * 5 + j], ys[r * 5 + j], 1e-12);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, VarMatchesKernelAndGradient) {
  Rng rng(17);
  auto x = random_tensor({3, 4}, rng);
  EXPECT_EQ(eval_op({x}, [](const auto& v) { return softmax_rows(v[0]); }), softmax_rows(x));
  EXPECT_LT(op_grad_error({x}, [](const auto& v) { return softmax_rows(v[0]); }), kGradTol);
}

// ---- routing primitives --------------------------------------------------------

TEST(RoutingOps, MatchLoopDefinitions) {
  const std::size_t M = 4, N = 3, D = 2, Dp = 5;
  Rng rng(18);
  auto p = random_tensor({M, D}, rng), w = random_tensor({N, Dp, D}, rng);
  auto c = random_tensor({M, N}, rng), q = random_tensor({N, Dp}, rng);
  auto u = eval_op({p, w}, [](const auto& v) { return shared_transform(v[0], v[1]); });
  ASSERT_EQ(u.shape(), (Shape{N, M, Dp}));
  for (std::size_t j = 0; j < N; ++j)
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t e = 0; e < Dp; ++e) {
        double acc = 0.0;
        for (std::size_t k = 0; k < D; ++k) acc += w[(j * Dp + e) * D + k] * p.at(i, k);
        EXPECT_NEAR(u[(j * M + i) * Dp + e], acc, 1e-12);
      }
  auto s = eval_op({c, u}, [](const auto& v) { return coupled_sum(v[0], v[1]); });
  ASSERT_EQ(s.shape(), (Shape{N, Dp}));
  for (std::size_t j = 0; j < N; ++j)
    for (std::size_t e = 0; e < Dp; ++e) {
      double acc = 0.0;
      for (std::size_t i = 0; i < M; ++i) acc += c.at(i, j) * u[(j * M + i) * Dp + e];
      EXPECT_NEAR(s.at(j, e), acc, 1e-12);
    }
  auto a = eval_op({q, u}, [](const auto& v) { return agreement(v[0], v[1]); });
  ASSERT_EQ(a.shape(), (Shape{M, N}));
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double acc = 0.0;
      for (std::size_t e = 0; e < Dp; ++e) acc += q.at(j, e) * u[(j * M + i) * Dp + e];
      EXPECT_NEAR(a.at(i, j), acc, 1e-12);
    }
}

TEST(RoutingOps, Gradients) {
  const std::size_t M = 4, N = 3, D = 2, Dp = 5;
  Rng rng(19);
  EXPECT_LT(op_grad_error({random_tensor({M, D}, rng), random_tensor({N, Dp, D}, rng)},
                          [](const auto& v) { return shared_transform(v[0], v[1]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({random_tensor({M, N}, rng), random_tensor({N, M, Dp}, rng)},
                          [](const auto& v) { return coupled_sum(v[0], v[1]); }),
            kGradTol);
  EXPECT_LT(op_grad_error({random_tensor({N, Dp}, rng), random_tensor({N, M, Dp}, rng)},
                          [](const auto& v) { return agreement(v[0], v[1]); }),
            kGradTol);
}

// ---- dropout --------------------------------------------------------------------

TEST(Dropout, IdentityCases) {
  Rng rng(20);
  auto x = random_tensor({50}, rng);
  Tape<double> tape;
  auto v = tape.constant(x);
  EXPECT_EQ(dropout(v, 0.0, rng, true).value(), x);
  EXPECT_EQ(dropout(v, 0.5, rng, false).value(), x);
  EXPECT_EQ(dropout(v, 0.9, rng, false).value(), x);
}

TEST(Dropout, InvalidRateIsConfigError) {
  Rng rng(21);
  Tape<double> tape;
  auto v = tape.constant(Tensor<double>({3}));
  EXPECT_THROW(dropout(v, 1.0, rng, true), ConfigError);
  EXPECT_THROW(dropout(v, -0.1, rng, true), ConfigError);
  EXPECT_THROW(dropout(v, 1.0, rng, false), ConfigError);
}

TEST(Dropout, StatisticsOverSeededDraws) {
  Rng rng(22);
  Tape<double> tape;
  auto v = tape.constant(Tensor<double>::filled({10000}, 1.0));
  auto y = dropout(v, 0.5, rng, true).value();
  std::size_t zeros = 0;
  double survivor_scale = 0.0;
  for (double e : y.values()) {
    if (e == 0.0) {
      ++zeros;
    } else {
      survivor_scale += e;
    }
  }
  EXPECT_NEAR(double(zeros) / 10000.0, 0.5, 0.02);
  EXPECT_DOUBLE_EQ(survivor_scale / double(10000 - zeros), 2.0);
}

TEST(Dropout, GradientUsesTheSameMask) {
  ParamSet<double> params;
  params.add("x", Tensor<double>::filled({200}, 1.0));
  Rng rng(23);
  Tape<double> tape;
  auto y = dropout(tape.parameter("x", params.at("x")), 0.3, rng, true);
  GradMap<double> grads;
  tape.backward(sum(y), grads);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_DOUBLE_EQ(grads.at("x")[i], y.value()[i]);
}
