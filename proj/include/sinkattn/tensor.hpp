#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sinkattn/errors.hpp"

namespace sinkattn {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major tensor of 64-bit floats. Copy of a Tensor is a cheap
// handle copy; both handles address the same storage. Ops always allocate
// fresh output storage (no views, no aliasing).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  std::size_t ndim() const { return st_->shape.size(); }
  std::size_t numel() const { return st_->data.size(); }
  std::size_t dim(std::size_t i) const { return st_->shape[i]; }

  std::vector<double>& vec() { return st_->data; }
  const std::vector<double>& vec() const { return st_->data; }
  double* data() { return st_->data.data(); }
  const double* data() const { return st_->data.data(); }

  bool requires_grad() const { return st_->requires_grad; }
  // Enabling grad allocates zeroed grad storage; disabling releases it.
  void set_requires_grad(bool v);

  bool has_grad() const { return !st_->grad.empty(); }
  std::vector<double>& grad_vec();
  const std::vector<double>& grad_vec() const;
  double* grad() { return grad_vec().data(); }
  void zero_grad();

  // Scalar access; throws ShapeError unless numel() == 1.
  double item() const;

  // Identity of underlying storage (keys optimizer state, detects aliasing).
  const void* storage_id() const { return st_.get(); }

  Tensor clone() const;  // deep copy, grad not copied

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> st_;
};

// Reverse-mode tape. Ops append one backward closure per recorded node in
// execution order; backward() replays them once, in reverse, then clears.
class Tape {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  friend void backward(const Tensor& loss, Tape& tape);

 private:
  std::vector<std::function<void()>> nodes_;
};

// ---- primitive ops -------------------------------------------------------
// Every op validates shapes, checks its output for NaN/Inf (throws
// NumericalError instead of propagating), and records a backward rule on
// `tape` when tape != nullptr and an input requires grad.

// Batched matrix product a[..,m,k] * b[..,k,n]. Leading batch dims must
// match or broadcast from size 1.
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
// a[..,m,k] * b[..,n,k]^T -> [..,m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, double s, Tape* tape = nullptr);
Tensor silu(const Tensor& a, Tape* tape = nullptr);
Tensor sum(const Tensor& a, Tape* tape = nullptr);  // -> scalar

// Row softmax over the last axis with numerically stable max-subtraction.
// `allowed`, when non-null, points at numel(a)/last_dim rows of last_dim
// bytes (row-major, 1 = keep); masked entries come out exactly 0. A fully
// masked row raises NumericalError("empty attention row").
Tensor softmax_rows(const Tensor& a, const std::uint8_t* allowed = nullptr, Tape* tape = nullptr);

// Root-mean-square normalization over the last axis, eps 1e-6, then
// elementwise weight.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, Tape* tape = nullptr);

// Mean negative log-likelihood of targets under row-softmax of logits[n,V].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, Tape* tape = nullptr);

// Gather rows of table[V,d] -> [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, Tape* tape = nullptr);

Tensor reshape(const Tensor& a, Shape new_shape, Tape* tape = nullptr);

// Row/column block ops on 2-D tensors (head split/merge, group slicing).
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count, Tape* tape = nullptr);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count, Tape* tape = nullptr);
Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape = nullptr);
Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape = nullptr);

// Cyclic roll of the rows of a 2-D tensor: out[t] = a[(t + shift) mod n].
Tensor roll_rows(const Tensor& a, std::ptrdiff_t shift, Tape* tape = nullptr);

// Rotary position encoding of x[n,D] (D even, pairs (2i, 2i+1)), with the
// effective position positions[t] / interp_factor.
Tensor rope(const Tensor& x, const std::vector<std::size_t>& positions, double theta,
            double interp_factor, Tape* tape = nullptr);

// Seeds d(loss)/d(loss) = 1, replays the tape in reverse, clears it.
// Requires a scalar loss.
void backward(const Tensor& loss, Tape& tape);

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)
// for the scalar-valued f, whose graph must read x's storage. f is called
// with a tape for the analytic pass and with nullptr for probe evaluations.
double finite_diff_check(const std::function<Tensor(Tape*)>& f, Tensor x, double h);

void check_finite(const Tensor& t, const char* op_name);

}  // namespace sinkattn
