#include "capsar/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

namespace capsar {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Eigen::Map<MatR<T>> mat(T* data, std::size_t r, std::size_t c) {
  return Eigen::Map<MatR<T>>(data, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
Eigen::Map<const MatR<T>> mat(const T* data, std::size_t r, std::size_t c) {
  return Eigen::Map<const MatR<T>>(data, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
Eigen::Map<Vec<T>> vec(T* data, std::size_t n) {
  return Eigen::Map<Vec<T>>(data, static_cast<Eigen::Index>(n));
}
template <typename T>
Eigen::Map<const Vec<T>> vec(const T* data, std::size_t n) {
  return Eigen::Map<const Vec<T>>(data, static_cast<Eigen::Index>(n));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                       shape_string(b));
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(s));
  }
}

template <typename T>
void add_into(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  T* d = dst->data();
  const T* s = src.data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

template <typename T>
T sigmoid(T a) {
  return T(1) / (T(1) + std::exp(-a));
}

template <typename T>
std::size_t row_count(const Tensor<T>& x) {
  return x.rank() <= 1 ? 1 : x.dim(0);
}

}  // namespace

// ---- value kernels ---------------------------------------------------------

template <typename T>
void squash_into(std::span<const T> v, std::span<T> out) {
  const T s = squared_norm(v);
  if (s == T(0)) {
    std::fill(out.begin(), out.end(), T(0));
    return;
  }
  const T factor = std::sqrt(s) / (T(1) + s);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = factor * v[i];
}

template <typename T>
Tensor<T> squash(const Tensor<T>& v) {
  Tensor<T> out(v.shape());
  squash_into<T>(v.values(), out.values());
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t m = row_count(x);
  const std::size_t n = x.size() / m;
  for (std::size_t r = 0; r < m; ++r) {
    const T* in = x.data() + r * n;
    T* out = y.data() + r * n;
    T mx = in[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, in[c]);
    T total = 0;
    for (std::size_t c = 0; c < n; ++c) {
      out[c] = std::exp(in[c] - mx);
      total += out[c];
    }
    for (std::size_t c = 0; c < n; ++c) out[c] /= total;
  }
  return y;
}

// ---- linear algebra --------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    shape_error("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  mat(out.data(), m, n).noalias() = mat(av.data(), m, k) * mat(bv.data(), k, n);
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
    const auto gm = mat(g.data(), m, n);
    if (auto* da = tape.grad(a)) {
      mat(da->data(), m, k).noalias() += gm * mat(tape.value(b.id).data(), k, n).transpose();
    }
    if (auto* db = tape.grad(b)) {
      mat(db->data(), k, n).noalias() += mat(tape.value(a.id).data(), m, k).transpose() * gm;
    }
  });
}

template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  const auto& wv = w.value();
  require_rank("affine", wv.shape(), 2);
  const std::size_t out_dim = wv.dim(0), in_dim = wv.dim(1);
  if (x.size() != in_dim || b.size() != out_dim) {
    throw DimensionError("affine: weight " + shape_string(wv.shape()) + " incompatible with input " +
                         shape_string(x.shape()) + " / bias " + shape_string(b.shape()));
  }
  Tensor<T> out({out_dim});
  vec(out.data(), out_dim).noalias() =
      mat(wv.data(), out_dim, in_dim) * vec(x.value().data(), in_dim) + vec(b.value().data(), out_dim);
  return x.tape->record("affine", std::move(out), {x, w, b},
                        [x, w, b, out_dim, in_dim](Tape<T>& tape, const Tensor<T>& g) {
    const auto gv = vec(g.data(), out_dim);
    if (auto* dw = tape.grad(w)) {
      mat(dw->data(), out_dim, in_dim).noalias() +=
          gv * vec(tape.value(x.id).data(), in_dim).transpose();
    }
    if (auto* dx = tape.grad(x)) {
      vec(dx->data(), in_dim).noalias() +=
          mat(tape.value(w.id).data(), out_dim, in_dim).transpose() * gv;
    }
    add_into(tape.grad(b), g);
  });
}

// ---- elementwise / structural ---------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  Tensor<T> out = a.value();
  add_into(&out, b.value());
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    add_into(tape.grad(a), g);
    add_into(tape.grad(b), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    add_into(tape.grad(a), g);
    if (auto* db = tape.grad(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    const auto& av = tape.value(a.id);
    const auto& bv = tape.value(b.id);
    if (auto* da = tape.grad(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
    }
    if (auto* db = tape.grad(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape->record("scale", std::move(out), {a}, [a, s](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* da = tape.grad(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += s * g[i];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().values()) total += v;
  return a.tape->record("sum", Tensor<T>::vector({total}), {a}, [a](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* da = tape.grad(a)) {
      for (auto& v : da->values()) v += g[0];
    }
  });
}

template <typename T>
Var<T> mul_const(Var<T> x, const Tensor<T>& c) {
  if (x.size() != c.size()) shape_error("mul_const", x.shape(), c.shape());
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return x.tape->record("mul_const", std::move(out), {x}, [x, c](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* dx = tape.grad(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * c[i];
    }
  });
}

template <typename T>
Var<T> scale_rows_const(Var<T> x, std::span<const T> w) {
  const auto& xv = x.value();
  const std::size_t m = row_count(xv);
  if (w.size() != m) {
    throw DimensionError("scale_rows_const: " + std::to_string(w.size()) + " weights for " +
                         shape_string(xv.shape()));
  }
  const std::size_t n = xv.size() / m;
  std::vector<T> weights(w.begin(), w.end());
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= weights[r];
  }
  return x.tape->record("scale_rows_const", std::move(out), {x},
                        [x, weights = std::move(weights), m, n](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* dx = tape.grad(x)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) (*dx)[r * n + c] += g[r * n + c] * weights[r];
      }
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    add_into(tape.grad(x), g);
  });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) {
    shape_error("concat_cols", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor<T> out({m, p + q});
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(av.data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(bv.data() + r * q, q, out.data() + r * (p + q) + p);
  }
  return a.tape->record("concat_cols", std::move(out), {a, b}, [a, b, m, p, q](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* da = tape.grad(a)) {
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < p; ++c) (*da)[r * p + c] += g[r * (p + q) + c];
    }
    if (auto* db = tape.grad(b)) {
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < q; ++c) (*db)[r * q + c] += g[r * (p + q) + p + c];
    }
  });
}

template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& rows, std::size_t total_rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  if (rows.size() > total_rows) {
    throw DimensionError("stack_rows: " + std::to_string(rows.size()) + " rows exceed " +
                         std::to_string(total_rows));
  }
  const std::size_t n = rows.front().size();
  Tensor<T> out({total_rows, n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != n) shape_error("stack_rows", rows.front().shape(), rows[r].shape());
    std::copy_n(rows[r].value().data(), n, out.data() + r * n);
  }
  return rows.front().tape->record("stack_rows", std::move(out), rows, [rows, n](Tape<T>& tape, const Tensor<T>& g) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (auto* d = tape.grad(rows[r])) {
        for (std::size_t c = 0; c < n; ++c) (*d)[c] += g[r * n + c];
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids) {
  const auto& tv = table.value();
  require_rank("gather_rows", tv.shape(), 2);
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  Tensor<T> out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                           shape_string(tv.shape()));
    }
    std::copy_n(tv.data() + idx[r] * d, d, out.data() + r * d);
  }
  return table.tape->record("gather_rows", std::move(out), {table},
                            [table, idx = std::move(idx), d](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* dt = tape.grad(table)) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        T* dst = dt->data() + idx[r] * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
      }
    }
  });
}

// ---- sequence / capsule ops --------------------------------------------

template <typename T>
Var<T> gru_step(Var<T> x, Var<T> h, Var<T> w_input, Var<T> w_hidden, Var<T> b_input, Var<T> b_hidden) {
  const std::size_t hid = h.size();
  const std::size_t in = x.size();
  const Shape wi_shape{3 * hid, in}, wh_shape{3 * hid, hid};
  if (w_input.shape() != wi_shape) shape_error("gru_step (input weights)", w_input.shape(), wi_shape);
  if (w_hidden.shape() != wh_shape) shape_error("gru_step (hidden weights)", w_hidden.shape(), wh_shape);
  if (b_input.size() != 3 * hid || b_hidden.size() != 3 * hid) {
    shape_error("gru_step (biases)", b_input.shape(), b_hidden.shape());
  }

  Vec<T> gx = mat(w_input.value().data(), 3 * hid, in) * vec(x.value().data(), in) +
              vec(b_input.value().data(), 3 * hid);
  Vec<T> gh = mat(w_hidden.value().data(), 3 * hid, hid) * vec(h.value().data(), hid) +
              vec(b_hidden.value().data(), 3 * hid);
  const T* hp = h.value().data();

  // Cache: r, z, n, gh_n.
  std::vector<T> cache(4 * hid);
  Tensor<T> out({hid});
  for (std::size_t i = 0; i < hid; ++i) {
    const T r = sigmoid(gx[i] + gh[i]);
    const T z = sigmoid(gx[hid + i] + gh[hid + i]);
    const T n = std::tanh(gx[2 * hid + i] + r * gh[2 * hid + i]);
    cache[i] = r;
    cache[hid + i] = z;
    cache[2 * hid + i] = n;
    cache[3 * hid + i] = gh[2 * hid + i];
    out[i] = (T(1) - z) * n + z * hp[i];
  }

  return x.tape->record(
      "gru_step", std::move(out), {x, h, w_input, w_hidden, b_input, b_hidden},
      [x, h, w_input, w_hidden, b_input, b_hidden, hid, in, cache = std::move(cache)](
          Tape<T>& tape, const Tensor<T>& g) {
        const T* hp = tape.value(h.id).data();
        Vec<T> dgx(3 * hid), dgh(3 * hid);
        std::vector<T> dh_direct(hid);
        for (std::size_t i = 0; i < hid; ++i) {
          const T r = cache[i], z = cache[hid + i], n = cache[2 * hid + i], ghn = cache[3 * hid + i];
          const T dn = g[i] * (T(1) - z);
          const T dz = g[i] * (hp[i] - n);
          dh_direct[i] = g[i] * z;
          const T dan = dn * (T(1) - n * n);
          const T dr = dan * ghn;
          const T daz = dz * z * (T(1) - z);
          const T dar = dr * r * (T(1) - r);
          dgx[i] = dar;
          dgx[hid + i] = daz;
          dgx[2 * hid + i] = dan;
          dgh[i] = dar;
          dgh[hid + i] = daz;
          dgh[2 * hid + i] = dan * r;
        }
        if (auto* dwi = tape.grad(w_input)) {
          mat(dwi->data(), 3 * hid, in).noalias() += dgx * vec(tape.value(x.id).data(), in).transpose();
        }
        if (auto* dwh = tape.grad(w_hidden)) {
          mat(dwh->data(), 3 * hid, hid).noalias() += dgh * vec(hp, hid).transpose();
        }
        if (auto* dbi = tape.grad(b_input)) vec(dbi->data(), 3 * hid) += dgx;
        if (auto* dbh = tape.grad(b_hidden)) vec(dbh->data(), 3 * hid) += dgh;
        if (auto* dx = tape.grad(x)) {
          vec(dx->data(), in).noalias() +=
              mat(tape.value(w_input.id).data(), 3 * hid, in).transpose() * dgx;
        }
        if (auto* dh = tape.grad(h)) {
          auto dhv = vec(dh->data(), hid);
          dhv += vec(dh_direct.data(), hid);
          dhv.noalias() += mat(tape.value(w_hidden.id).data(), 3 * hid, hid).transpose() * dgh;
        }
      });
}

template <typename T>
Var<T> conv1d_same(Var<T> x, Var<T> filters, Var<T> bias) {
  const auto& xv = x.value();
  const auto& fv = filters.value();
  require_rank("conv1d_same (input)", xv.shape(), 2);
  require_rank("conv1d_same (filters)", fv.shape(), 3);
  const std::size_t k = fv.dim(0), cin = fv.dim(1), cout = fv.dim(2), len = xv.dim(0);
  if (k % 2 == 0) throw ConfigError("conv1d_same: kernel width must be odd, got " + std::to_string(k));
  if (xv.dim(1) != cin) shape_error("conv1d_same", xv.shape(), fv.shape());
  if (bias.size() != cout) shape_error("conv1d_same (bias)", bias.shape(), fv.shape());

  const long half = static_cast<long>(k / 2);
  const long tl = static_cast<long>(len);
  // Rows [lo, hi) of the output read input rows shifted by `offset`.
  struct Window {
    std::size_t lo, count, src;
  };
  std::vector<Window> windows;
  for (std::size_t tap = 0; tap < k; ++tap) {
    const long offset = static_cast<long>(tap) - half;
    const long lo = std::max(0L, -offset);
    const long hi = std::min(tl, tl - offset);
    windows.push_back(hi > lo ? Window{std::size_t(lo), std::size_t(hi - lo), std::size_t(lo + offset)}
                              : Window{0, 0, 0});
  }

  Tensor<T> out({len, cout});
  auto om = mat(out.data(), len, cout);
  om.rowwise() = vec(bias.value().data(), cout).transpose();
  for (std::size_t tap = 0; tap < k; ++tap) {
    const auto& w = windows[tap];
    if (!w.count) continue;
    om.middleRows(w.lo, w.count).noalias() +=
        mat(xv.data(), len, cin).middleRows(w.src, w.count) * mat(fv.data() + tap * cin * cout, cin, cout);
  }
  return x.tape->record("conv1d_same", std::move(out), {x, filters, bias},
                        [x, filters, bias, k, cin, cout, len, windows](Tape<T>& tape, const Tensor<T>& g) {
    const auto gm = mat(g.data(), len, cout);
    auto* dx = tape.grad(x);
    auto* df = tape.grad(filters);
    const T* xd = tape.value(x.id).data();
    const T* fd = tape.value(filters.id).data();
    for (std::size_t tap = 0; tap < k; ++tap) {
      const auto& w = windows[tap];
      if (!w.count) continue;
      if (df) {
        mat(df->data() + tap * cin * cout, cin, cout).noalias() +=
            mat(xd, len, cin).middleRows(w.src, w.count).transpose() * gm.middleRows(w.lo, w.count);
      }
      if (dx) {
        mat(dx->data(), len, cin).middleRows(w.src, w.count).noalias() +=
            gm.middleRows(w.lo, w.count) * mat(fd + tap * cin * cout, cin, cout).transpose();
      }
    }
    if (auto* db = tape.grad(bias)) vec(db->data(), cout) += gm.colwise().sum().transpose();
  });
}

template <typename T>
Var<T> squash_rows(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t m = row_count(xv);
  const std::size_t d = xv.size() / m;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < m; ++r) {
    squash_into<T>(std::span<const T>(xv.data() + r * d, d), std::span<T>(out.data() + r * d, d));
  }
  return x.tape->record("squash_rows", std::move(out), {x}, [x, m, d](Tape<T>& tape, const Tensor<T>& g) {
    auto* dx = tape.grad(x);
    if (!dx) return;
    const T corrupt = debug::corrupt_squash_adjoint() ? T(1.01) : T(1);
    const T* xd = tape.value(x.id).data();
    for (std::size_t r = 0; r < m; ++r) {
      const T* v = xd + r * d;
      const T* gv = g.data() + r * d;
      const T s = squared_norm(std::span<const T>(v, d));
      if (s == T(0)) continue;
      // out = f(|v|) v with f(a) = a / (1 + a^2); J = f I + (f'(a) / a) v v^T.
      const T a = std::sqrt(s);
      const T f = a / (T(1) + s);
      const T fp_over_a = (T(1) - s) / ((T(1) + s) * (T(1) + s) * a);
      const T vg = dot(std::span<const T>(v, d), std::span<const T>(gv, d));
      T* dst = dx->data() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += corrupt * (f * gv[c] + fp_over_a * vg * v[c]);
    }
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  Tensor<T> y = softmax_rows(x.value());
  const std::size_t m = row_count(y);
  const std::size_t n = y.size() / m;
  return x.tape->record("softmax_rows", y, {x}, [x, y, m, n](Tape<T>& tape, const Tensor<T>& g) {
    auto* dx = tape.grad(x);
    if (!dx) return;
    for (std::size_t r = 0; r < m; ++r) {
      T inner = 0;
      for (std::size_t c = 0; c < n; ++c) inner += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) (*dx)[r * n + c] += y[r * n + c] * (g[r * n + c] - inner);
    }
  });
}

template <typename T>
Var<T> row_norms(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t m = row_count(xv);
  const std::size_t d = xv.size() / m;
  Tensor<T> out({m});
  for (std::size_t r = 0; r < m; ++r) {
    out[r] = std::sqrt(squared_norm(std::span<const T>(xv.data() + r * d, d)));
  }
  Tensor<T> norms = out;
  return x.tape->record("row_norms", std::move(out), {x}, [x, m, d, norms](Tape<T>& tape, const Tensor<T>& g) {
    auto* dx = tape.grad(x);
    if (!dx) return;
    const T* xd = tape.value(x.id).data();
    for (std::size_t r = 0; r < m; ++r) {
      if (norms[r] == T(0)) continue;
      const T k = g[r] / norms[r];
      for (std::size_t c = 0; c < d; ++c) (*dx)[r * d + c] += k * xd[r * d + c];
    }
  });
}

template <typename T>
Var<T> shared_transform(Var<T> p, Var<T> w) {
  const auto& pv = p.value();
  const auto& wv = w.value();
  require_rank("shared_transform (children)", pv.shape(), 2);
  require_rank("shared_transform (weights)", wv.shape(), 3);
  const std::size_t m = pv.dim(0), d = pv.dim(1), n = wv.dim(0), dn = wv.dim(1);
  if (wv.dim(2) != d) shape_error("shared_transform", pv.shape(), wv.shape());

  Tensor<T> out({n, m, dn});
  const auto pm = mat(pv.data(), m, d);
  for (std::size_t j = 0; j < n; ++j) {
    mat(out.data() + j * m * dn, m, dn).noalias() = pm * mat(wv.data() + j * dn * d, dn, d).transpose();
  }
  return p.tape->record("shared_transform", std::move(out), {p, w}, [p, w, m, d, n, dn](Tape<T>& tape, const Tensor<T>& g) {
    auto* dp = tape.grad(p);
    auto* dw = tape.grad(w);
    const T* pd = tape.value(p.id).data();
    const T* wd = tape.value(w.id).data();
    for (std::size_t j = 0; j < n; ++j) {
      const auto gj = mat(g.data() + j * m * dn, m, dn);
      if (dw) mat(dw->data() + j * dn * d, dn, d).noalias() += gj.transpose() * mat(pd, m, d);
      if (dp) mat(dp->data(), m, d).noalias() += gj * mat(wd + j * dn * d, dn, d);
    }
  });
}

template <typename T>
Var<T> coupled_sum(Var<T> c, Var<T> u) {
  const auto& cv = c.value();
  const auto& uv = u.value();
  require_rank("coupled_sum (couplings)", cv.shape(), 2);
  require_rank("coupled_sum (predictions)", uv.shape(), 3);
  const std::size_t n = uv.dim(0), m = uv.dim(1), dn = uv.dim(2);
  if (cv.dim(0) != m || cv.dim(1) != n) shape_error("coupled_sum", cv.shape(), uv.shape());

  Tensor<T> out({n, dn});
  const auto cm = mat(cv.data(), m, n);
  for (std::size_t j = 0; j < n; ++j) {
    vec(out.data() + j * dn, dn).noalias() = mat(uv.data() + j * m * dn, m, dn).transpose() * cm.col(j);
  }
  return c.tape->record("coupled_sum", std::move(out), {c, u}, [c, u, n, m, dn](Tape<T>& tape, const Tensor<T>& g) {
    auto* dc = tape.grad(c);
    auto* du = tape.grad(u);
    const T* cd = tape.value(c.id).data();
    const T* ud = tape.value(u.id).data();
    for (std::size_t j = 0; j < n; ++j) {
      const auto gj = vec(g.data() + j * dn, dn);
      if (du) mat(du->data() + j * m * dn, m, dn).noalias() += mat(cd, m, n).col(j) * gj.transpose();
      if (dc) mat(dc->data(), m, n).col(j).noalias() += mat(ud + j * m * dn, m, dn) * gj;
    }
  });
}

template <typename T>
Var<T> agreement(Var<T> q, Var<T> u) {
  const auto& qv = q.value();
  const auto& uv = u.value();
  require_rank("agreement (parents)", qv.shape(), 2);
  require_rank("agreement (predictions)", uv.shape(), 3);
  const std::size_t n = uv.dim(0), m = uv.dim(1), dn = uv.dim(2);
  if (qv.dim(0) != n || qv.dim(1) != dn) shape_error("agreement", qv.shape(), uv.shape());

  Tensor<T> out({m, n});
  auto om = mat(out.data(), m, n);
  for (std::size_t j = 0; j < n; ++j) {
    om.col(j).noalias() = mat(uv.data() + j * m * dn, m, dn) * vec(qv.data() + j * dn, dn);
  }
  return q.tape->record("agreement", std::move(out), {q, u}, [q, u, n, m, dn](Tape<T>& tape, const Tensor<T>& g) {
    auto* dq = tape.grad(q);
    auto* du = tape.grad(u);
    const T* qd = tape.value(q.id).data();
    const T* ud = tape.value(u.id).data();
    const auto gm = mat(g.data(), m, n);
    for (std::size_t j = 0; j < n; ++j) {
      if (du) mat(du->data() + j * m * dn, m, dn).noalias() += gm.col(j) * vec(qd + j * dn, dn).transpose();
      if (dq) vec(dq->data() + j * dn, dn).noalias() += mat(ud + j * m * dn, m, dn).transpose() * gm.col(j);
    }
  });
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  Tensor<T> mask(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& v : mask.values()) v = rng.uniform() < rate ? T(0) : keep_scale;
  return mul_const(x, mask);
}

#define CAPSAR_INSTANTIATE_OPS(T)                                                         \
  template void squash_into<T>(std::span<const T>, std::span<T>);                         \
  template Tensor<T> squash<T>(const Tensor<T>&);                                         \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                   \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                              \
  template Var<T> affine<T>(Var<T>, Var<T>, Var<T>);                                      \
  template Var<T> add<T>(Var<T>, Var<T>);                                                 \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                 \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                 \
  template Var<T> scale<T>(Var<T>, T);                                                    \
  template Var<T> sum<T>(Var<T>);                                                         \
  template Var<T> mul_const<T>(Var<T>, const Tensor<T>&);                                 \
  template Var<T> scale_rows_const<T>(Var<T>, std::span<const T>);                        \
  template Var<T> reshape<T>(Var<T>, Shape);                                              \
  template Var<T> concat_cols<T>(Var<T>, Var<T>);                                         \
  template Var<T> stack_rows<T>(const std::vector<Var<T>>&, std::size_t);                 \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                   \
  template Var<T> gru_step<T>(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>);            \
  template Var<T> conv1d_same<T>(Var<T>, Var<T>, Var<T>);                                 \
  template Var<T> squash_rows<T>(Var<T>);                                                 \
  template Var<T> softmax_rows<T>(Var<T>);                                                \
  template Var<T> row_norms<T>(Var<T>);                                                   \
  template Var<T> shared_transform<T>(Var<T>, Var<T>);                                    \
  template Var<T> coupled_sum<T>(Var<T>, Var<T>);                                         \
  template Var<T> agreement<T>(Var<T>, Var<T>);                                           \
  template Var<T> dropout<T>(Var<T>, double, Rng&, bool);

CAPSAR_INSTANTIATE_OPS(float)
CAPSAR_INSTANTIATE_OPS(double)

#undef CAPSAR_INSTANTIATE_OPS

}  // namespace capsar
