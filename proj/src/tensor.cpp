// SPDX-License-Identifier: Apache-2.0
#include "mpa/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mpa/error.hpp"
#include "mpa/rng.hpp"

namespace mpa {

namespace {

thread_local bool t_grad_enabled = true;

std::size_t product(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void require_matrix(const Tensor& a, const char* op) {
  if (!a.defined() || a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         (a.defined() ? shape_string(a.shape()) : "undefined"));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) +
                         " does not match " + shape_string(b.shape()));
  }
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!t_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Gradient buffer of t, allocated on first use.
std::vector<double>& grad_of(const Tensor& t) {
  auto& impl = t.impl();
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

Tensor make_output(Shape shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

// c[m x n] (+)= op(a) * op(b).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0) std::fill(c, c + m * ldc, 0.0);
    return;
  }
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(product(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  if (product(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape) + " needs " +
                         std::to_string(product(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({}, value, requires_grad);
}

std::size_t Tensor::rows() const {
  return rank() == 2 ? impl_->shape[0] : 1;
}

std::size_t Tensor::cols() const {
  if (rank() == 0) return 1;
  return impl_->shape.back();
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor of shape " + shape_string(shape()) +
                        " is not a scalar");
  }
  return impl_->data[0];
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

// ---- Tape -----------------------------------------------------------------

void Tape::record(const Tensor& output, std::function<void()> backward) {
  entries_.push_back({output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : "undefined"));
  }
  std::size_t end = entries_.size();
  while (end > 0 && !entries_[end - 1].output.same_storage(loss)) --end;
  if (end == 0) throw ContractError("backward: loss is not recorded on the tape");

  for (std::size_t i = 0; i < end; ++i) entries_[i].output.zero_grad();
  grad_of(loss)[0] = 1.0;
  for (std::size_t i = end; i-- > 0;) entries_[i].backward();
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: shape " + shape_string(a.shape()) +
                         " incompatible with " + shape_string(b.shape()));
  }
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_output({m, n}, rg);
  gemm(false, false, m, n, k, a.data().data(), k, b.data().data(), n, 0.0,
       out.data().data(), n);
  if (rg) {
    Tape::current().record(out, [a, b, out, m, n, k] {
      const double* dout = out.grad().data();
      if (a.requires_grad()) {
        gemm(false, true, m, k, n, dout, n, b.data().data(), n, 1.0,
             grad_of(a).data(), k);
      }
      if (b.requires_grad()) {
        gemm(true, false, k, n, m, a.data().data(), k, dout, n, 1.0,
             grad_of(b).data(), n);
      }
    });
  }
  return out;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_transposed");
  require_matrix(b, "matmul_transposed");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_transposed: shape " + shape_string(a.shape()) +
                         " incompatible with transposed " + shape_string(b.shape()));
  }
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_output({m, n}, rg);
  gemm(false, true, m, n, k, a.data().data(), k, b.data().data(), k, 0.0,
       out.data().data(), n);
  if (rg) {
    Tape::current().record(out, [a, b, out, m, n, k] {
      const double* dout = out.grad().data();
      if (a.requires_grad()) {
        gemm(false, false, m, k, n, dout, n, b.data().data(), k, 1.0,
             grad_of(a).data(), k);
      }
      if (b.requires_grad()) {
        gemm(true, false, n, k, m, dout, n, a.data().data(), k, 1.0,
             grad_of(b).data(), k);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output({n, m}, rg);
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  if (rg) {
    Tape::current().record(out, [a, out, m, n] {
      auto& ga = grad_of(a);
      auto dout = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += dout[j * m + i];
    });
  }
  return out;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data(), y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  if (rg) {
    Tape::current().record(out, [a, b, out] {
      auto dout = out.grad();
      if (a.requires_grad()) {
        auto& g = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i];
      }
      if (b.requires_grad()) {
        auto& g = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data(), y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] - y[i];
  if (rg) {
    Tape::current().record(out, [a, b, out] {
      auto dout = out.grad();
      if (a.requires_grad()) {
        auto& g = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i];
      }
      if (b.requires_grad()) {
        auto& g = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= dout[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data(), y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
  if (rg) {
    Tape::current().record(out, [a, b, out] {
      auto dout = out.grad();
      auto x = a.data(), y = b.data();
      if (a.requires_grad()) {
        auto& g = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i] * y[i];
      }
      if (b.requires_grad()) {
        auto& g = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * factor;
  if (rg) {
    Tape::current().record(out, [a, out, factor] {
      auto dout = out.grad();
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i] * factor;
    });
  }
  return out;
}

Tensor add_row_vector(const Tensor& a, const Tensor& bias) {
  require_matrix(a, "add_row_vector");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_row_vector: bias " + shape_string(bias.shape()) +
                         " does not fit rows of " + shape_string(a.shape()));
  }
  const bool rg = any_requires_grad({&a, &bias});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data(), b = bias.data();
  auto z = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) z[i * n + j] = x[i * n + j] + b[j];
  if (rg) {
    Tape::current().record(out, [a, bias, out, m, n] {
      auto dout = out.grad();
      if (a.requires_grad()) {
        auto& g = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i];
      }
      if (bias.requires_grad()) {
        auto& g = grad_of(bias);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += dout[i * n + j];
      }
    });
  }
  return out;
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  const bool rg = any_requires_grad({&a});
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total, rg);
  if (rg) {
    Tape::current().record(out, [a, out] {
      const double d = out.grad()[0];
      for (auto& g : grad_of(a)) g += d;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---- nonlinearities -------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    double* dst = y.data() + i * n;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN input");
      peak = std::max(peak, row[j]);
    }
    if (!std::isfinite(peak)) {
      throw NumericError("softmax_rows: row " + std::to_string(i) +
                         " has no finite entry");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(row[j] - peak);
      total += dst[j];
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= total;
  }
  if (rg) {
    Tape::current().record(out, [a, out, m, n] {
      auto y = out.data();
      auto dy = out.grad();
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += y[i * n + j] * (dy[i * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                 double eps) {
  require_matrix(a, "layernorm");
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layernorm: gain " + shape_string(gain.shape()) +
                         " / bias " + shape_string(bias.shape()) +
                         " do not fit rows of " + shape_string(a.shape()));
  }
  const bool rg = any_requires_grad({&a, &gain, &bias});
  Tensor out = make_output(a.shape(), rg);
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto rstd = std::make_shared<std::vector<double>>(m);
  auto x = a.data(), gv = gain.data(), bv = bias.data();
  auto y = out.data();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu *= inv_n;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var *= inv_n;
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * r;
      (*xhat)[i * n + j] = h;
      y[i * n + j] = h * gv[j] + bv[j];
    }
  }
  if (rg) {
    Tape::current().record(out, [a, gain, bias, out, xhat, rstd, m, n, inv_n] {
      auto dy = out.grad();
      auto gv = gain.data();
      const auto& h = *xhat;
      if (gain.requires_grad()) {
        auto& gg = grad_of(gain);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += dy[i * n + j] * h[i * n + j];
      }
      if (bias.requires_grad()) {
        auto& gb = grad_of(bias);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += dy[i * n + j];
      }
      if (a.requires_grad()) {
        auto& ga = grad_of(a);
        for (std::size_t i = 0; i < m; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = dy[i * n + j] * gv[j];
            s1 += dh;
            s2 += dh * h[i * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = dy[i * n + j] * gv[j];
            ga[i * n + j] += (*rstd)[i] * (dh - inv_n * s1 - h[i * n + j] * inv_n * s2);
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& a) {
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
  if (rg) {
    Tape::current().record(out, [a, out] {
      auto x = a.data();
      auto dy = out.grad();
      auto& g = grad_of(a);
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
        g[i] += dy[i] * (cdf + x[i] * pdf);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output(a.shape(), rg);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (rg) {
    Tape::current().record(out, [a, out] {
      auto x = a.data();
      auto dy = out.grad();
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) g[i] += dy[i];
    });
  }
  return out;
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout: rate must be below 1");
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output(a.shape(), rg);
  auto keep = std::make_shared<std::vector<double>>(a.numel());
  const double kept_scale = 1.0 / (1.0 - rate);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    (*keep)[i] = rng.uniform() >= rate ? kept_scale : 0.0;
    y[i] = x[i] * (*keep)[i];
  }
  if (rg) {
    Tape::current().record(out, [a, out, keep] {
      auto dy = out.grad();
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * (*keep)[i];
    });
  }
  return out;
}

// ---- indexing -------------------------------------------------------------

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_matrix(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols();
  for (auto r : rows) {
    if (r >= m) {
      throw IndexError("gather_rows: row " + std::to_string(r) +
                       " out of range for " + shape_string(a.shape()));
    }
  }
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output({rows.size(), n}, rg);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data() + rows[i] * n, n, y.data() + i * n);
  if (rg) {
    Tape::current().record(
        out, [a, out, idx = std::vector<std::size_t>(rows.begin(), rows.end()), n] {
          auto dy = out.grad();
          auto& g = grad_of(a);
          for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += dy[i * n + j];
        });
  }
  return out;
}

Tensor block(const Tensor& a, std::size_t row0, std::size_t nrows,
             std::size_t col0, std::size_t ncols) {
  require_matrix(a, "block");
  const std::size_t n = a.cols();
  if (row0 + nrows > a.rows() || col0 + ncols > n) {
    throw IndexError("block: [" + std::to_string(row0) + "+" + std::to_string(nrows) +
                     ", " + std::to_string(col0) + "+" + std::to_string(ncols) +
                     "] exceeds " + shape_string(a.shape()));
  }
  const bool rg = any_requires_grad({&a});
  Tensor out = make_output({nrows, ncols}, rg);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < nrows; ++i)
    std::copy_n(x.data() + (row0 + i) * n + col0, ncols, y.data() + i * ncols);
  if (rg) {
    Tape::current().record(out, [a, out, row0, nrows, col0, ncols, n] {
      auto dy = out.grad();
      auto& g = grad_of(a);
      for (std::size_t i = 0; i < nrows; ++i)
        for (std::size_t j = 0; j < ncols; ++j)
          g[(row0 + i) * n + col0 + j] += dy[i * ncols + j];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: " + shape_string(p.shape()) +
                           " does not match " + shape_string(parts.front().shape()));
    }
    n += p.cols();
    rg = rg || any_requires_grad({&p});
  }
  Tensor out = make_output({m, n}, rg);
  auto y = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    auto x = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(x.data() + i * w, w, y.data() + i * n + offset);
    offset += w;
  }
  if (rg) {
    Tape::current().record(out, [parts, out, m, n] {
      auto dy = out.grad();
      std::size_t offset = 0;
      for (const auto& p : parts) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          auto& g = grad_of(p);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += dy[i * n + offset + j];
        }
        offset += w;
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: " + shape_string(p.shape()) +
                           " does not match " + shape_string(parts.front().shape()));
    }
    m += p.rows();
    rg = rg || any_requires_grad({&p});
  }
  Tensor out = make_output({m, n}, rg);
  auto y = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), y.begin() + offset);
    offset += p.numel();
  }
  if (rg) {
    Tape::current().record(out, [parts, out] {
      auto dy = out.grad();
      std::size_t offset = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          auto& g = grad_of(p);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

// ---- losses ---------------------------------------------------------------

Tensor cross_entropy_from_logits(const Tensor& logits,
                                 std::span<const std::size_t> targets) {
  require_matrix(logits, "cross_entropy_from_logits");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(logits.shape()));
  }
  if (m == 0) throw ContractError("cross_entropy_from_logits: no rows");
  for (auto t : targets) {
    if (t >= v) {
      throw IndexError("cross_entropy_from_logits: target " + std::to_string(t) +
                       " out of range for " + std::to_string(v) + " classes");
    }
  }
  const bool rg = any_requires_grad({&logits});
  auto lse = std::make_shared<std::vector<double>>(m);
  auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = z.data() + i * v;
    double peak = row[0];
    for (std::size_t j = 1; j < v; ++j) peak = std::max(peak, row[j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < v; ++j) acc += std::exp(row[j] - peak);
    (*lse)[i] = peak + std::log(acc);
    total += (*lse)[i] - row[targets[i]];
  }
  if (std::isnan(total)) throw NumericError("cross_entropy_from_logits: NaN loss");
  Tensor out = Tensor::scalar(total / static_cast<double>(m), rg);
  if (rg) {
    Tape::current().record(
        out, [logits, out, lse, m, v,
              tg = std::vector<std::size_t>(targets.begin(), targets.end())] {
          const double d = out.grad()[0] / static_cast<double>(m);
          auto z = logits.data();
          auto& g = grad_of(logits);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < v; ++j)
              g[i * v + j] += d * std::exp(z[i * v + j] - (*lse)[i]);
            g[i * v + tg[i]] -= d;
          }
        });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  const std::size_t n = logits.numel();
  if (labels.size() != n) {
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_string(logits.shape()));
  }
  if (n == 0) throw ContractError("bce_with_logits: no entries");
  const bool rg = any_requires_grad({&logits});
  auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // -y log s(z) - (1-y) log(1-s(z)) = max(z,0) - z y + log(1 + e^{-|z|})
    total += std::max(z[i], 0.0) - z[i] * labels[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  if (std::isnan(total)) throw NumericError("bce_with_logits: NaN loss");
  Tensor out = Tensor::scalar(total / static_cast<double>(n), rg);
  if (rg) {
    Tape::current().record(
        out, [logits, out, n, y = std::vector<double>(labels.begin(), labels.end())] {
          const double d = out.grad()[0] / static_cast<double>(n);
          auto z = logits.data();
          auto& g = grad_of(logits);
          for (std::size_t i = 0; i < n; ++i) {
            const double s = z[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-z[i]))
                                         : std::exp(z[i]) / (1.0 + std::exp(z[i]));
            g[i] += d * (s - y[i]);
          }
        });
  }
  return out;
}

Tensor detach(const Tensor& a) {
  Tensor out = a.clone();
  out.set_requires_grad(false);
  return out;
}

// ---- gradient oracle ------------------------------------------------------

std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           Tensor x, double step,
                                           std::span<const std::size_t> indices) {
  if (step <= 0.0) throw ContractError("finite_difference_grad: step must be positive");
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(indices.size());
  auto values = x.data();
  for (auto i : indices) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f();
    values[i] = saved - step;
    const double down = f();
    values[i] = saved;
    out.push_back((up - down) / (2.0 * step));
  }
  return out;
}

Tensor finite_difference_grad(const std::function<double()>& f, Tensor x,
                              double step) {
  std::vector<std::size_t> all(x.numel());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return Tensor::from_data(x.shape(), finite_difference_grad(f, x, step, all));
}

}  // namespace mpa
