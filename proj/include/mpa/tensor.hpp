// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, clone() makes a
// deep copy. Operations on tensors that require gradients append a backward
// closure to the calling thread's Tape; backward() replays the tape in reverse.
// Matrices are rank-2 and row-major; vectors (biases, gains) are rank-1.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mpa {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double operator()(std::size_t r, std::size_t c) const {
    return impl_->data[r * cols() + c];
  }
  double item() const;

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl& impl() const { return *impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of differentiable operations. Entries are appended in
// execution order, so every entry's inputs precede it.
class Tape {
 public:
  void record(const Tensor& output, std::function<void()> backward);
  // Seeds d(loss)/d(loss) = 1 and visits every entry up to the loss once, in
  // reverse. Intermediate gradients are reset first; leaf gradients accumulate
  // across calls until cleared by the caller.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  // The tape used by operations on the calling thread.
  static Tape& current();

 private:
  struct Entry {
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
};

bool grad_enabled();

// Disables recording for its lifetime (evaluation, sampling).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Runs backward on the current thread's tape.
void backward(const Tensor& loss);

// ---- operations ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T, used for query-key products.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[m x n] + bias[n] on every row.
Tensor add_row_vector(const Tensor& a, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row-wise softmax with max subtraction. Entries may be -inf (masked) as long
// as every row keeps one finite entry; NaN raises NumericError.
Tensor softmax_rows(const Tensor& a);
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor block(const Tensor& a, std::size_t row0, std::size_t nrows,
             std::size_t col0, std::size_t ncols);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

// Mean over rows of -log softmax(logits)[i, targets[i]], in log-space.
Tensor cross_entropy_from_logits(const Tensor& logits,
                                 std::span<const std::size_t> targets);
// Mean binary cross-entropy of sigmoid(logits) against labels in {0, 1},
// evaluated as a stable log-sigmoid.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

// Same values, cut from the gradient graph.
Tensor detach(const Tensor& a);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate
// of x. f must read x's current values and be deterministic.
Tensor finite_difference_grad(const std::function<double()>& f, Tensor x,
                              double step);
// Same, restricted to the listed flat indices.
std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           Tensor x, double step,
                                           std::span<const std::size_t> indices);

}  // namespace mpa
