#include "avrl/ops.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace avrl::ops {
namespace {

Tensor* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.value().size() == b.value().size() && a.rows() == b.rows(), op,
          "shape mismatch " + a.value().shape_string() + " vs " + b.value().shape_string());
}

// Four fixed partial sums, combined in a fixed order.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

Tensor transposed(const Tensor& t) {
  const auto r = t.rows(), c = t.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  }
  return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const auto n = a.rows(), k = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul",
          "inner dims " + a.value().shape_string() + " x " + b.value().shape_string());
  // Every inner loop runs along the shared dimension k.
  Tensor bt = transposed(b.value());
  Tensor out = Tensor::matrix(n, m);
  const double* av = a.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = dot(av + i * k, bt.data() + j * k, k);
  }
  return make_result(std::move(out), {a, b}, [n, k, m, bt = std::move(bt)](Node& self) {
    const double* g = self.grad.data();
    if (Tensor* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        double* dst = ga->data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g[i * m + j];
          if (gij != 0.0) axpy(gij, bt.data() + j * k, dst, k);
        }
      }
    }
    if (Tensor* gb = parent_grad(self, 1)) {
      const double* av = parent_value(self, 0).data();
      Tensor gbt = Tensor::matrix(m, k);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g[i * m + j];
          if (gij != 0.0) axpy(gij, av + i * k, gbt.data() + j * k, k);
        }
      }
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t j = 0; j < m; ++j) (*gb)[p * m + j] += gbt[j * k + p];
      }
    }
  }, "matmul");
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Tensor* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  }, "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  }, "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const auto& bv = parent_value(self, 1);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      const auto& av = parent_value(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  }, "mul");
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
    }
  }, "scale");
}

Var add_bias(const Var& a, const Var& bias) {
  const auto n = a.rows(), c = a.cols();
  require(bias.value().size() == c, "add_bias",
          "bias size " + std::to_string(bias.value().size()) + " vs cols " + std::to_string(c));
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bias.value()[j];
  }
  return make_result(std::move(out), {a, bias}, [n, c](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[j] += self.grad[i * c + j];
      }
    }
  }, "add_bias");
}

Var linear(const Var& x, const Var& w, const Var& b) { return add_bias(matmul(x, w), b); }

Var gelu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const auto& x = parent_value(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double xi = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
        (*g)[i] += self.grad[i] * (cdf + xi * pdf);
      }
    }
  }, "gelu");
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const auto& x = parent_value(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (x[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  }, "relu");
}

Var log(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::log(v);
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const auto& x = parent_value(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / x[i];
    }
  }, "log");
}

Var exp(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  Tensor cached = out;
  return make_result(std::move(out), {a}, [y = std::move(cached)](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * y[i];
    }
  }, "exp");
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v < lo ? lo : (v > hi ? hi : v);
  return make_result(std::move(out), {a}, [lo, hi](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const auto& x = parent_value(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (x[i] >= lo && x[i] <= hi) (*g)[i] += self.grad[i];
      }
    }
  }, "clamp");
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto n = x.rows(), c = x.cols();
  require(gamma.value().size() == c && beta.value().size() == c, "layer_norm",
          "affine size mismatch");
  Tensor out = Tensor(x.value().shape());
  Tensor xhat = Tensor::matrix(n, c);
  std::vector<double> inv_std(n);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xv[i * c + j] - mu) * inv_std[i];
      xhat[i * c + j] = h;
      out[i * c + j] = h * gamma.value()[j] + beta.value()[j];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const auto& gv = parent_value(self, 1);
    const double* dy = self.grad.data();
    if (Tensor* gg = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*gg)[j] += dy[i * c + j] * xhat[i * c + j];
      }
    }
    if (Tensor* gb = parent_grad(self, 2)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += dy[i * c + j];
      }
    }
    if (Tensor* gx = parent_grad(self, 0)) {
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < n; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = dy[i * c + j] * gv[j];
          s1 += dh;
          s2 += dh * xhat[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
          const double dh = dy[i * c + j] * gv[j];
          (*gx)[i * c + j] += inv_std[i] * (dh - inv_c * s1 - xhat[i * c + j] * inv_c * s2);
        }
      }
    }
  }, "layer_norm");
}

Var softmax_rows(const Var& a) {
  const auto n = a.rows(), c = a.cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    auto r = out.row(i);
    double mx = r[0];
    for (double v : r) mx = v > mx ? v : mx;
    double s = 0.0;
    for (auto& v : r) {
      v = std::exp(v - mx);
      s += v;
    }
    for (auto& v : r) v /= s;
  }
  Tensor y = out;
  return make_result(std::move(out), {a}, [n, c, y = std::move(y)](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          (*g)[i * c + j] += y[i * c + j] * (self.grad[i * c + j] - dot);
        }
      }
    }
  }, "softmax_rows");
}

Var log_softmax_rows(const Var& a) {
  const auto n = a.rows(), c = a.cols();
  Tensor out = a.value();
  Tensor probs = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = out.row(i);
    double mx = r[0];
    for (double v : r) mx = v > mx ? v : mx;
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      r[j] -= lse;
      probs[i * c + j] = std::exp(r[j]);
    }
  }
  return make_result(std::move(out), {a}, [n, c, probs = std::move(probs)](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += self.grad[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          (*g)[i * c + j] += self.grad[i * c + j] - probs[i * c + j] * s;
        }
      }
    }
  }, "log_softmax_rows");
}

Var transpose(const Var& a) {
  const auto n = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(c, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * n + i] = a.value()[i * c + j];
  }
  return make_result(std::move(out), {a}, [n, c](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[j * n + i];
      }
    }
  }, "transpose");
}

Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  require(rows * cols == a.value().size(), "reshape", "element count mismatch");
  Tensor out = a.value();
  out.reshape({rows, cols});
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  }, "reshape");
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const auto n = a.rows(), c = a.cols();
  require(begin <= end && end <= c, "slice_cols", "range out of bounds");
  const auto w = end - begin;
  Tensor out = Tensor::matrix(n, w);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.value()[i * c + begin + j];
  }
  return make_result(std::move(out), {a}, [n, c, w, begin](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) (*g)[i * c + begin + j] += self.grad[i * w + j];
      }
    }
  }, "slice_cols");
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const auto n = a.rows(), c = a.cols();
  require(begin <= end && end <= n, "slice_rows", "range out of bounds");
  Tensor out = Tensor::matrix(end - begin, c);
  std::copy(a.value().data() + begin * c, a.value().data() + end * c, out.data());
  return make_result(std::move(out), {a}, [c, begin](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * c + i] += self.grad[i];
    }
  }, "slice_rows");
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const auto n = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rows() == n, "concat_cols", "row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out = Tensor::matrix(n, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto w = widths[k];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = parts[k].value()[i * w + j];
    }
    off += w;
  }
  return make_result(std::move(out), parts, [n, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const auto w = widths[k];
      if (Tensor* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * total + off + j];
        }
      }
      off += w;
    }
  }, "concat_cols");
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const auto c = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows", "column count mismatch");
    sizes.push_back(p.value().size());
    total += p.rows();
  }
  Tensor out = Tensor::matrix(total, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return make_result(std::move(out), parts, [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (Tensor* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < sizes[k]; ++i) (*g)[i] += self.grad[off + i];
      }
      off += sizes[k];
    }
  }, "concat_rows");
}

Var gather_rows(const Var& x, std::vector<std::int64_t> index, std::size_t k) {
  require(k > 0 && index.size() % k == 0, "gather_rows", "index size not a multiple of k");
  const auto n = x.rows(), c = x.cols();
  const auto out_rows = index.size() / k;
  for (auto idx : index) {
    if (idx >= static_cast<std::int64_t>(n)) require(false, "gather_rows", "index out of range");
  }
  Tensor out = Tensor::matrix(out_rows, k * c);
  const double* xv = x.value().data();
  for (std::size_t r = 0; r < out_rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto idx = index[r * k + j];
      if (idx < 0) continue;
      std::copy(xv + idx * c, xv + (idx + 1) * c, out.data() + (r * k + j) * c);
    }
  }
  return make_result(std::move(out), {x}, [index = std::move(index), c](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const double* dy = self.grad.data();
      for (std::size_t p = 0; p < index.size(); ++p) {
        const auto idx = index[p];
        if (idx < 0) continue;
        double* dst = g->data() + idx * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += dy[p * c + j];
      }
    }
  }, "gather_rows");
}

Var block_mean(const Var& x, std::size_t k) {
  const auto n = x.rows();
  require(k > 0 && x.cols() % k == 0, "block_mean", "cols not divisible by k");
  const auto c = x.cols() / k;
  const double inv = 1.0 / static_cast<double>(k);
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < k; ++b) {
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += x.value()[(i * k + b) * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= inv;
  }
  return make_result(std::move(out), {x}, [n, k, c, inv](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t b = 0; b < k; ++b) {
          for (std::size_t j = 0; j < c; ++j) (*g)[(i * k + b) * c + j] += inv * self.grad[i * c + j];
        }
      }
    }
  }, "block_mean");
}

Var row_normalize(const Var& x, double eps) {
  const auto n = x.rows(), c = x.cols();
  Tensor out = x.value();
  std::vector<double> denom(n);
  std::vector<bool> floored(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] * out[i * c + j];
    const double norm = std::sqrt(s);
    floored[i] = norm <= eps;
    denom[i] = floored[i] ? eps : norm;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= denom[i];
  }
  Tensor y = out;
  return make_result(std::move(out), {x},
                     [n, c, y = std::move(y), denom = std::move(denom),
                      floored = std::move(floored)](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        if (floored[i]) {
          for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[i * c + j] / denom[i];
          continue;
        }
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * self.grad[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          (*g)[i * c + j] += (self.grad[i * c + j] - y[i * c + j] * dot) / denom[i];
        }
      }
    }
  }, "row_normalize");
}

Var row_dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "row_dot");
  const auto n = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.value()[i * c + j] * b.value()[i * c + j];
    out[i] = s;
  }
  return make_result(std::move(out), {a, b}, [n, c](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Tensor* g = parent_grad(self, p)) {
        const auto& other = parent_value(self, 1 - p);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[i] * other[i * c + j];
        }
      }
    }
  }, "row_dot");
}

Var pick(const Var& a, const std::vector<std::size_t>& cols) {
  const auto n = a.rows(), c = a.cols();
  require(cols.size() == n, "pick", "one column per row required");
  Tensor out = Tensor::matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    require(cols[i] < c, "pick", "column out of range");
    out[i] = a.value()[i * c + cols[i]];
  }
  return make_result(std::move(out), {a}, [cols, c](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < cols.size(); ++i) (*g)[i * c + cols[i]] += self.grad[i];
    }
  }, "pick");
}

Var replace_rows(const Var& x, const std::vector<bool>& replace, const Var& fill) {
  const auto n = x.rows(), c = x.cols();
  require(replace.size() == n, "replace_rows", "flag count must equal row count");
  require(fill.value().size() == c, "replace_rows",
          "fill size " + std::to_string(fill.value().size()) + " vs cols " + std::to_string(c));
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    if (!replace[i]) continue;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = fill.value()[j];
  }
  return make_result(std::move(out), {x, fill}, [replace, n, c](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) {
        if (replace[i]) continue;
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[i * c + j];
      }
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) {
        if (!replace[i]) continue;
        for (std::size_t j = 0; j < c; ++j) (*g)[j] += self.grad[i * c + j];
      }
    }
  }, "replace_rows");
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_result(Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (auto& v : g->values()) v += self.grad[0];
    }
  }, "sum");
}

Var mean(const Var& a) {
  require(a.value().size() > 0, "mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var dropout(const Var& a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  require(p < 1.0, "dropout", "p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  Tensor m(a.value().shape());
  for (auto& v : m.values()) v = keep(rng) ? s : 0.0;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return make_result(std::move(out), {a}, [m = std::move(m)](Node& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * m[i];
    }
  }, "dropout");
}

}  // namespace avrl::ops
