// SPDX-License-Identifier: Apache-2.0
#include "stproph/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stproph/error.hpp"

namespace stproph::num {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

bool any_grad(Var a) { return a.tape->requires_grad(a); }
bool any_grad(Var a, Var b) { return a.tape->requires_grad(a) || b.tape->requires_grad(b); }

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
  return *a.tape;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor out = matmul(t.value(a), t.value(b));
  return t.record(std::move(out), "matmul", any_grad(a, b), [&t, a, b](const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
    if (t.requires_grad(a)) {
      Tensor da({n, k});
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = g.row_ptr(i);
        double* darow = da.row_ptr(i);
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bv.row_ptr(p);
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
          darow[p] = s;
        }
      }
      t.accumulate(a, da, "matmul");
    }
    if (t.requires_grad(b)) {
      Tensor db({k, m});
      for (std::size_t i = 0; i < n; ++i) {
        const double* arow = av.row_ptr(i);
        const double* grow = g.row_ptr(i);
        for (std::size_t p = 0; p < k; ++p) {
          const double ap = arow[p];
          if (ap == 0.0) continue;
          double* dbrow = db.row_ptr(p);
          for (std::size_t j = 0; j < m; ++j) dbrow[j] += ap * grow[j];
        }
      }
      t.accumulate(b, db, "matmul");
    }
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor out = add(t.value(a), t.value(b));
  return t.record(std::move(out), "add", any_grad(a, b), [&t, a, b](const Tensor& g) {
    t.accumulate(a, g, "add");
    t.accumulate(b, g, "add");
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor out = sub(t.value(a), t.value(b));
  return t.record(std::move(out), "sub", any_grad(a, b), [&t, a, b](const Tensor& g) {
    t.accumulate(a, g, "sub");
    if (t.requires_grad(b)) t.accumulate(b, scaled(g, -1.0), "sub");
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), "mul", any_grad(a, b), [&t, a, b](const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor da = g;
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= bv[i];
      t.accumulate(a, da, "mul");
    }
    if (t.requires_grad(b)) {
      Tensor db = g;
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] *= av[i];
      t.accumulate(b, db, "mul");
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.record(scaled(t.value(a), s), "scale", any_grad(a),
                  [&t, a, s](const Tensor& g) { t.accumulate(a, scaled(g, s), "scale"); });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (auto& v : out.storage()) v += s;
  return t.record(std::move(out), "add_scalar", any_grad(a),
                  [&t, a](const Tensor& g) { t.accumulate(a, g, "add_scalar"); });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  const Tensor& av = t.value(a);
  const Tensor& rv = t.value(row);
  require_rank2(av, "add_row");
  if (rv.size() != av.cols()) {
    throw ShapeError("add_row: row " + shape_string(rv.shape()) + " does not match " + shape_string(av.shape()));
  }
  Tensor out = av;
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += rv[j];
  return t.record(std::move(out), "add_row", any_grad(a, row), [&t, a, row, c](const Tensor& g) {
    t.accumulate(a, g, "add_row");
    if (t.requires_grad(row)) {
      Tensor dr(t.value(row).shape());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) dr[j] += g(i, j);
      t.accumulate(row, dr, "add_row");
    }
  });
}

Var tanh(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (auto& v : out.storage()) v = std::tanh(v);
  const std::size_t self = t.size();
  return t.record(std::move(out), "tanh", any_grad(a), [&t, a, self](const Tensor& g) {
    const Tensor& y = t.value(Var{&t, self});
    Tensor da = g;
    for (std::size_t i = 0; i < da.size(); ++i) da[i] *= 1.0 - y[i] * y[i];
    t.accumulate(a, da, "tanh");
  });
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

Var softplus(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (auto& v : out.storage()) v = softplus(v);
  return t.record(std::move(out), "softplus", any_grad(a), [&t, a](const Tensor& g) {
    const Tensor& x = t.value(a);
    Tensor da = g;
    for (std::size_t i = 0; i < da.size(); ++i) {
      const double xi = x[i];
      const double sig = xi >= 0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
      da[i] *= sig;
    }
    t.accumulate(a, da, "softplus");
  });
}

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax");
  Tensor out = a;
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* row = out.row_ptr(i);
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= s;
  }
  return out;
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const std::size_t self = t.size();
  return t.record(softmax_rows(t.value(a)), "softmax", any_grad(a), [&t, a, self](const Tensor& g) {
    const Tensor& y = t.value(Var{&t, self});
    Tensor da(y.shape());
    const std::size_t c = y.cols();
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < c; ++j) da(i, j) = y(i, j) * (g(i, j) - dot);
    }
    t.accumulate(a, da, "softmax");
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t n = t.value(parts.front()).rows();
  std::size_t total = 0;
  bool rg = false;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    require_rank2(v, "concat_cols");
    if (v.rows() != n) {
      throw ShapeError("concat_cols: row counts differ, " + shape_string(t.value(parts.front()).shape()) + " vs " +
                       shape_string(v.shape()));
    }
    total += v.cols();
    rg = rg || t.requires_grad(p);
  }
  Tensor out({n, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    for (std::size_t i = 0; i < n; ++i) std::copy(v.row_ptr(i), v.row_ptr(i) + v.cols(), out.row_ptr(i) + offset);
    offset += v.cols();
  }
  return t.record(std::move(out), "concat_cols", rg, [&t, parts, n](const Tensor& g) {
    std::size_t offset = 0;
    for (Var p : parts) {
      const std::size_t c = t.value(p).cols();
      if (t.requires_grad(p)) {
        Tensor dp({n, c});
        for (std::size_t i = 0; i < n; ++i) std::copy(g.row_ptr(i) + offset, g.row_ptr(i) + offset + c, dp.row_ptr(i));
        t.accumulate(p, dp, "concat_cols");
      }
      offset += c;
    }
  });
}

Var gather_rows(Var a, const std::vector<std::size_t>& index) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  require_rank2(av, "gather_rows");
  const std::size_t c = av.cols();
  Tensor out({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.rows()) throw ShapeError("gather_rows: index out of range");
    std::copy(av.row_ptr(index[i]), av.row_ptr(index[i]) + c, out.row_ptr(i));
  }
  return t.record(std::move(out), "gather_rows", any_grad(a), [&t, a, index, c](const Tensor& g) {
    Tensor da(t.value(a).shape());
    for (std::size_t i = 0; i < index.size(); ++i) {
      double* dst = da.row_ptr(index[i]);
      const double* src = g.row_ptr(i);
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    t.accumulate(a, da, "gather_rows");
  });
}

Var take_cols(Var a, const std::vector<std::size_t>& index, std::size_t k) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  require_rank2(av, "take_cols");
  if (index.size() != av.rows() * k) throw ShapeError("take_cols: index matrix does not match rows");
  Tensor out({av.rows(), k});
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t c = index[i * k + j];
      if (c >= av.cols()) throw ShapeError("take_cols: index out of range");
      out(i, j) = av(i, c);
    }
  return t.record(std::move(out), "take_cols", any_grad(a), [&t, a, index, k](const Tensor& g) {
    Tensor da(t.value(a).shape());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < k; ++j) da(i, index[i * k + j]) += g(i, j);
    t.accumulate(a, da, "take_cols");
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  require_rank2(av, "slice_cols");
  if (begin + count > av.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") exceed width " + std::to_string(av.cols()));
  }
  Tensor out({av.rows(), count});
  for (std::size_t i = 0; i < av.rows(); ++i) std::copy_n(av.row_ptr(i) + begin, count, out.row_ptr(i));
  return t.record(std::move(out), "slice_cols", any_grad(a), [&t, a, begin, count](const Tensor& g) {
    Tensor da(t.value(a).shape());
    for (std::size_t i = 0; i < g.rows(); ++i) std::copy_n(g.row_ptr(i), count, da.row_ptr(i) + begin);
    t.accumulate(a, da, "slice_cols");
  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = *a.tape;
  Tensor out = t.value(a).reshaped(std::move(shape));
  return t.record(std::move(out), "reshape", any_grad(a), [&t, a](const Tensor& g) {
    t.accumulate(a, g.reshaped(t.value(a).shape()), "reshape");
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : t.value(a).storage()) s += v;
  return t.record(Tensor({1, 1}, {s}), "sum", any_grad(a), [&t, a](const Tensor& g) {
    t.accumulate(a, Tensor(t.value(a).shape(), g[0]), "sum");
  });
}

Var mean(Var a) {
  Tape& t = *a.tape;
  const double n = static_cast<double>(t.value(a).size());
  double s = 0.0;
  for (double v : t.value(a).storage()) s += v;
  return t.record(Tensor({1, 1}, {s / n}), "mean", any_grad(a), [&t, a, n](const Tensor& g) {
    t.accumulate(a, Tensor(t.value(a).shape(), g[0] / n), "mean");
  });
}

Var dropout_with_mask(Var a, const Tensor& mask) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  require_same(av, mask, "dropout");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return t.record(std::move(out), "dropout", any_grad(a), [&t, a, mask](const Tensor& g) {
    Tensor da = g;
    for (std::size_t i = 0; i < da.size(); ++i) da[i] *= mask[i];
    t.accumulate(a, da, "dropout");
  });
}

Var dropout(Var a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  Tensor mask(a.value().shape());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.storage()) m = rng.uniform() < rate ? 0.0 : keep;
  return dropout_with_mask(a, mask);
}

}  // namespace stproph::num
