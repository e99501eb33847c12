#include "graphmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "graphmoe/errors.hpp"
#include "graphmoe/kernels.hpp"

namespace graphmoe {
namespace {

using detail::Node;

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Rows/cols view of the last axis: vectors are a single row.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw ShapeError(std::string(op) + ": expected a vector or matrix, got " + shape_str(t.shape()));
}

template <class F>
Tensor unary(const Tensor& a, const char* op, F&& f, std::function<void(Node&)> bw) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(a.shape(), std::move(out), {a}, op, std::move(bw));
}

}  // namespace

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad)
      kernels::gemm_nt(m, k, n, self.grad.data(), pb.value.data(), pa.ensure_grad().data(), true);
    if (pb.requires_grad)
      kernels::gemm_tn(k, n, m, pa.value.data(), self.grad.data(), pb.ensure_grad().data(), true);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: cannot multiply " + shape_str(a.shape()) + " by transpose of " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n);
  kernels::gemm_nt(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_result({m, n}, std::move(out), {a, b}, "matmul_nt", [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad)
      kernels::gemm_nn(m, k, n, self.grad.data(), pb.value.data(), pa.ensure_grad().data(), true);
    if (pb.requires_grad)
      kernels::gemm_tn(n, k, m, self.grad.data(), pa.value.data(), pb.ensure_grad().data(), true);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result({c, r}, std::move(out), {a}, "transpose", [r, c](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  kernels::active().add(a.data().data(), b.data().data(), out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a, b}, "add", [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& in = parent(self, p);
      if (in.requires_grad) kernels::active().axpy(1.0, self.grad.data(), in.ensure_grad().data(), self.grad.size());
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) kernels::active().axpy(1.0, self.grad.data(), pa.ensure_grad().data(), self.grad.size());
    if (pb.requires_grad) kernels::active().axpy(-1.0, self.grad.data(), pb.ensure_grad().data(), self.grad.size());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  kernels::active().mul(a.data().data(), b.data().data(), out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const auto& kt = kernels::active();
    if (pa.requires_grad) kt.mul_acc(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), self.grad.size());
    if (pb.requires_grad) kt.mul_acc(self.grad.data(), pa.value.data(), pb.ensure_grad().data(), self.grad.size());
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_result(a.shape(), std::move(out), {a, b}, "div", [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const std::size_t n = self.grad.size();
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i] * self.value[i] / pb.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  kernels::active().scale(s, out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a}, "scale", [s](Node& self) {
    kernels::active().axpy(s, self.grad.data(), parent(self, 0).ensure_grad().data(), self.grad.size());
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  const double sv = s.item();
  std::vector<double> out(a.data().begin(), a.data().end());
  kernels::active().scale(sv, out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a, s}, "mul_scalar", [](Node& self) {
    Node& pa = parent(self, 0);
    Node& ps = parent(self, 1);
    const auto& kt = kernels::active();
    if (pa.requires_grad) kt.axpy(ps.value[0], self.grad.data(), pa.ensure_grad().data(), self.grad.size());
    if (ps.requires_grad) ps.ensure_grad()[0] += kt.dot(self.grad.data(), pa.value.data(), self.grad.size());
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(std::max(x, kProbEps)); }, [](Node& self) {
    Node& in = parent(self, 0);
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in.value[i] > kProbEps) g[i] += self.grad[i] / in.value[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  kernels::active().relu(a.data().data(), out.data(), out.size());
  return make_result(a.shape(), std::move(out), {a}, "relu", [](Node& self) {
    Node& in = parent(self, 0);
    kernels::active().relu_backward(in.value.data(), self.grad.data(), in.ensure_grad().data(), self.grad.size());
  });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, "softplus",
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](Node& self) {
        Node& in = parent(self, 0);
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (1.0 + std::exp(-in.value[i]));
      });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (bias.numel() != c)
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " for rows of " + shape_str(x.shape()));
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    kernels::active().add(x.data().data() + i * c, bias.data().data(), out.data() + i * c, c);
  return make_result(x.shape(), std::move(out), {x, bias}, "add_row_bias", [r, c](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    const auto& kt = kernels::active();
    if (px.requires_grad) kt.axpy(1.0, self.grad.data(), px.ensure_grad().data(), r * c);
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < r; ++i) kt.axpy(1.0, self.grad.data() + i * c, g.data(), c);
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& g) {
  require_rank(x, 2, "scale_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (g.numel() != r)
    throw ShapeError("scale_rows: gains " + shape_str(g.shape()) + " for rows of " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < r; ++i) kernels::active().scale(g.at(i), out.data() + i * c, c);
  return make_result(x.shape(), std::move(out), {x, g}, "scale_rows", [r, c](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    const auto& kt = kernels::active();
    if (px.requires_grad) {
      auto& gx = px.ensure_grad();
      for (std::size_t i = 0; i < r; ++i) kt.axpy(pg.value[i], self.grad.data() + i * c, gx.data() + i * c, c);
    }
    if (pg.requires_grad) {
      auto& gg = pg.ensure_grad();
      for (std::size_t i = 0; i < r; ++i) gg[i] += kt.dot(self.grad.data() + i * c, px.value.data() + i * c, c);
    }
  });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {a}, "sum", [](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  require_rank(a, 2, "sum_axis");
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto x = a.data();
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i) kernels::active().axpy(1.0, x.data() + i * c, out.data(), c);
    return make_result({c}, std::move(out), {a}, "sum_axis0", [r, c](Node& self) {
      auto& g = parent(self, 0).ensure_grad();
      for (std::size_t i = 0; i < r; ++i) kernels::active().axpy(1.0, self.grad.data(), g.data() + i * c, c);
    });
  }
  if (axis != 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j];
  return make_result({r}, std::move(out), {a}, "sum_axis1", [r, c](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i];
  });
}

// ---------------------------------------------------------------- structural

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, "reshape", [](Node& self) {
    kernels::active().axpy(1.0, self.grad.data(), parent(self, 0).ensure_grad().data(), self.grad.size());
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t rank = parts[0].rank();
  if (rank == 1 && axis == 0) {
    std::vector<double> out;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
      require_rank(p, 1, "concat");
      out.insert(out.end(), p.data().begin(), p.data().end());
      sizes.push_back(p.numel());
    }
    const std::size_t n = out.size();
    return make_result({n}, std::move(out), parts, "concat", [sizes](Node& self) {
      std::size_t off = 0;
      for (std::size_t p = 0; p < sizes.size(); ++p) {
        Node& in = parent(self, p);
        if (in.requires_grad) kernels::active().axpy(1.0, self.grad.data() + off, in.ensure_grad().data(), sizes[p]);
        off += sizes[p];
      }
    });
  }
  if (rank != 2 || axis > 1) throw ShapeError("concat: unsupported rank/axis");
  std::vector<std::size_t> widths;
  std::size_t rows = parts[0].dim(0), cols = parts[0].dim(1);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require_rank(parts[p], 2, "concat");
    if (axis == 0) {
      if (parts[p].dim(1) != cols)
        throw ShapeError("concat axis 0: " + shape_str(parts[0].shape()) + " vs " + shape_str(parts[p].shape()));
      widths.push_back(parts[p].dim(0));
    } else {
      if (parts[p].dim(0) != rows)
        throw ShapeError("concat axis 1: " + shape_str(parts[0].shape()) + " vs " + shape_str(parts[p].shape()));
      widths.push_back(parts[p].dim(1));
    }
  }
  if (axis == 0) {
    std::vector<double> out;
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    rows = out.size() / cols;
    return make_result({rows, cols}, std::move(out), parts, "concat0", [widths, cols](Node& self) {
      std::size_t off = 0;
      for (std::size_t p = 0; p < widths.size(); ++p) {
        Node& in = parent(self, p);
        const std::size_t n = widths[p] * cols;
        if (in.requires_grad) kernels::active().axpy(1.0, self.grad.data() + off, in.ensure_grad().data(), n);
        off += n;
      }
    });
  }
  cols = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  std::vector<double> out(rows * cols);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto x = parts[p].data();
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(x.data() + i * widths[p], widths[p], out.data() + i * cols + off);
    off += widths[p];
  }
  return make_result({rows, cols}, std::move(out), parts, "concat1", [widths, rows, cols](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      Node& in = parent(self, p);
      if (in.requires_grad) {
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < rows; ++i)
          kernels::active().axpy(1.0, self.grad.data() + i * cols + off, g.data() + i * widths[p], widths[p]);
      }
      off += widths[p];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.dim(0)) throw ShapeError("slice_rows: range out of bounds for " + shape_str(a.shape()));
  const std::size_t c = a.dim(1);
  std::vector<double> out(a.data().begin() + begin * c, a.data().begin() + end * c);
  return make_result({end - begin, c}, std::move(out), {a}, "slice_rows", [begin, c](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    kernels::active().axpy(1.0, self.grad.data(), g.data() + begin * c, self.grad.size());
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  if (begin > end || end > a.dim(1)) throw ShapeError("slice_cols: range out of bounds for " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(a.data().data() + i * c + begin, w, out.data() + i * w);
  return make_result({r, w}, std::move(out), {a}, "slice_cols", [r, c, w, begin](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      kernels::active().axpy(1.0, self.grad.data() + i * w, g.data() + i * c + begin, w);
  });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  require_rank(a, 2, "gather_rows");
  const std::size_t c = a.dim(1);
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.dim(0)) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(a.data().data() + rows[i] * c, c, out.data() + i * c);
  }
  return make_result({rows.size(), c}, std::move(out), {a}, "gather_rows", [rows, c](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i)
      kernels::active().axpy(1.0, self.grad.data() + i * c, g.data() + rows[i] * c, c);
  });
}

Tensor scatter_add_rows(const Tensor& base, const Tensor& src, const std::vector<std::size_t>& rows) {
  require_rank(base, 2, "scatter_add_rows");
  require_rank(src, 2, "scatter_add_rows");
  const std::size_t c = base.dim(1);
  if (src.dim(1) != c || src.dim(0) != rows.size())
    throw ShapeError("scatter_add_rows: src " + shape_str(src.shape()) + " into " + shape_str(base.shape()));
  std::vector<double> out(base.data().begin(), base.data().end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= base.dim(0)) throw ShapeError("scatter_add_rows: row index out of range");
    kernels::active().add(out.data() + rows[i] * c, src.data().data() + i * c, out.data() + rows[i] * c, c);
  }
  return make_result(base.shape(), std::move(out), {base, src}, "scatter_add_rows", [rows, c](Node& self) {
    Node& pb = parent(self, 0);
    Node& ps = parent(self, 1);
    if (pb.requires_grad) kernels::active().axpy(1.0, self.grad.data(), pb.ensure_grad().data(), self.grad.size());
    if (ps.requires_grad) {
      auto& g = ps.ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        kernels::active().axpy(1.0, self.grad.data() + rows[i] * c, g.data() + i * c, c);
    }
  });
}

Tensor gather_flat(const Tensor& a, const std::vector<std::size_t>& idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.numel()) throw ShapeError("gather_flat: index out of range");
    out[i] = a.data()[idx[i]];
  }
  return make_result({idx.size()}, std::move(out), {a}, "gather_flat", [idx](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor scatter_add_flat(const Tensor& src, const std::vector<std::size_t>& idx, std::size_t n) {
  if (idx.size() != src.numel()) throw ShapeError("scatter_add_flat: index count differs from source size");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw ShapeError("scatter_add_flat: index out of range");
    out[idx[i]] += src.data()[i];
  }
  return make_result({n}, std::move(out), {src}, "scatter_add_flat", [idx](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i] += self.grad[idx[i]];
  });
}

// ---------------------------------------------------------------- probability

Tensor softmax(const Tensor& v) {
  const auto [r, c] = rows_cols(v, "softmax");
  const auto x = v.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax: NaN input at row " + std::to_string(i));
      mx = std::max(mx, row[j]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax: non-finite input at row " + std::to_string(i));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  return make_result(v.shape(), std::move(out), {v}, "softmax", [r = r, c = c](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    const auto& kt = kernels::active();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      const double d = kt.dot(y, gy, c);
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - d);
    }
  });
}

Tensor normalize(const Tensor& v) {
  const auto [r, c] = rows_cols(v, "normalize");
  const auto x = v.data();
  std::vector<double> out(x.size());
  std::vector<double> sums(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += x[i * c + j];
    const double s = std::max(sums[i], kProbEps);
    sums[i] = s;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / s;
  }
  return make_result(v.shape(), std::move(out), {v}, "normalize", [r = r, c = c, sums](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double d = 0.0;
      for (std::size_t j = 0; j < c; ++j) d += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (gy[j] - d) / sums[i];
    }
  });
}

Sorted sort_descending_with_grad(const Tensor& v) {
  const auto [r, c] = rows_cols(v, "sort_descending_with_grad");
  const auto x = v.data();
  std::vector<std::size_t> perm(r * c);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    auto first = perm.begin() + static_cast<std::ptrdiff_t>(i * c);
    std::iota(first, first + static_cast<std::ptrdiff_t>(c), std::size_t{0});
    const double* row = x.data() + i * c;
    std::stable_sort(first, first + static_cast<std::ptrdiff_t>(c),
                     [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[perm[i * c + j]];
  }
  Tensor values = make_result(v.shape(), std::move(out), {v}, "sort_desc", [r = r, c = c, perm](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + perm[i * c + j]] += self.grad[i * c + j];
  });
  return {std::move(values), std::move(perm)};
}

namespace {

void check_probability(std::span<const double> p, const char* op) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw ContractViolation(std::string(op) + ": p has a negative or NaN entry");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9)
    throw ContractViolation(std::string(op) + ": p sums to " + std::to_string(s) + ", not 1");
}

double kl_row(const double* p, const double* q, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j)
    s += p[j] * (std::log(std::max(p[j], kProbEps)) - std::log(std::max(q[j], kProbEps)));
  return s;
}

void kl_row_backward(double g, const double* p, const double* q, double* gp, double* gq, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    if (gp) {
      const double lp = std::log(std::max(p[j], kProbEps));
      gp[j] += g * (lp - std::log(std::max(q[j], kProbEps)) + (p[j] > kProbEps ? 1.0 : 0.0));
    }
    if (gq && q[j] > kProbEps) gq[j] -= g * p[j] / q[j];
  }
}

}  // namespace

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  require_rank(p, 1, "kl_divergence");
  require_same_shape(p, q, "kl_divergence");
  check_probability(p.data(), "kl_divergence");
  const std::size_t n = p.numel();
  const double v = kl_row(p.data().data(), q.data().data(), n);
  return make_result({}, {v}, {p, q}, "kl_divergence", [n](Node& self) {
    Node& pp = parent(self, 0);
    Node& pq = parent(self, 1);
    kl_row_backward(self.grad[0], pp.value.data(), pq.value.data(),
                    pp.requires_grad ? pp.ensure_grad().data() : nullptr,
                    pq.requires_grad ? pq.ensure_grad().data() : nullptr, n);
  });
}

Tensor kl_divergence_rows(const Tensor& p, const Tensor& q) {
  require_rank(q, 2, "kl_divergence_rows");
  const std::size_t r = q.dim(0), c = q.dim(1);
  const bool shared = p.rank() == 1;
  if (shared ? p.dim(0) != c : p.shape() != q.shape())
    throw ShapeError("kl_divergence_rows: p " + shape_str(p.shape()) + " vs q " + shape_str(q.shape()));
  for (std::size_t i = 0; i < (shared ? 1 : r); ++i)
    check_probability(p.data().subspan(i * c, c), "kl_divergence_rows");
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i)
    out[i] = kl_row(p.data().data() + (shared ? 0 : i * c), q.data().data() + i * c, c);
  return make_result({r}, std::move(out), {p, q}, "kl_divergence_rows", [r, c, shared](Node& self) {
    Node& pp = parent(self, 0);
    Node& pq = parent(self, 1);
    double* gp = pp.requires_grad ? pp.ensure_grad().data() : nullptr;
    double* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t po = shared ? 0 : i * c;
      kl_row_backward(self.grad[i], pp.value.data() + po, pq.value.data() + i * c, gp ? gp + po : nullptr,
                      gq ? gq + i * c : nullptr, c);
    }
  });
}

// ---------------------------------------------------------------- network pieces

Tensor layer_norm_rows(const Tensor& x, double eps) {
  require_rank(x, 2, "layer_norm_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  const auto in = x.data();
  std::vector<double> out(r * c);
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = in.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * inv_std[i];
  }
  return make_result(x.shape(), std::move(out), {x}, "layer_norm", [r, c, inv_std](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    const double inv_c = 1.0 / static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        mg += gy[j];
        mgy += gy[j] * y[j];
      }
      mg *= inv_c;
      mgy *= inv_c;
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += inv_std[i] * (gy[j] - mg - y[j] * mgy);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  if (targets.size() != r) throw ShapeError("cross_entropy: target count differs from logit rows");
  const auto x = logits.data();
  std::vector<double> probs(r * c, 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= c) throw ShapeError("cross_entropy: target id out of range");
    const double* row = x.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += probs[i * c + j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    total += mx + std::log(s) - row[targets[i]];
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  return make_result({}, {total / denom}, {logits}, "cross_entropy", [r, c, targets, probs, denom](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    const double s = self.grad[0] / denom;
    for (std::size_t i = 0; i < r; ++i) {
      if (targets[i] < 0) continue;
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += s * probs[i * c + j];
      g[i * c + static_cast<std::size_t>(targets[i])] -= s;
    }
  });
}

}  // namespace graphmoe
