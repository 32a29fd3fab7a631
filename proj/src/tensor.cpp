#include "sinkattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace sinkattn {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.st_ = std::make_shared<Storage>();
  t.st_->shape = std::move(shape);
  t.st_->data.assign(shape_numel(t.st_->shape), 0.0);
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.vec().begin(), t.vec().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_to_string(shape) + " does not match data length " +
                     std::to_string(data.size()));
  }
  Tensor t;
  t.st_ = std::make_shared<Storage>();
  t.st_->shape = std::move(shape);
  t.st_->data = std::move(data);
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool v) {
  st_->requires_grad = v;
  if (v) {
    st_->grad.assign(st_->data.size(), 0.0);
  } else {
    st_->grad.clear();
    st_->grad.shrink_to_fit();
  }
}

std::vector<double>& Tensor::grad_vec() {
  if (st_->grad.empty() && !st_->data.empty()) {
    throw StateError("tensor has no grad storage (requires_grad is off)");
  }
  return st_->grad;
}

const std::vector<double>& Tensor::grad_vec() const {
  if (st_->grad.empty() && !st_->data.empty()) {
    throw StateError("tensor has no grad storage (requires_grad is off)");
  }
  return st_->grad;
}

void Tensor::zero_grad() {
  if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
  }
  return st_->data[0];
}

Tensor Tensor::clone() const {
  return Tensor::from_data(shape(), vec(), false);
}

void check_finite(const Tensor& t, const char* op_name) {
  for (double v : t.vec()) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(op_name) + ": non-finite value in result");
    }
  }
}

namespace {

// Output of an op requires grad (and gets recorded) only when a tape is
// active and some input carries grad.
bool tracked(const Tape* tape, const Tensor& a) { return tape != nullptr && a.requires_grad(); }
bool tracked(const Tape* tape, const Tensor& a, const Tensor& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

// c[m,n] += or = a[m,k] * b[k,n]
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += or = a[m,k] * b[n,k]^T
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

// c[k,n] += or = a[m,k]^T * b[m,n]
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

struct BatchLayout {
  std::size_t count = 1;           // number of output batch entries
  std::vector<std::size_t> dims;   // output batch dims
  std::vector<std::size_t> a_strides, b_strides;  // per-dim entry strides (0 = broadcast)
};

BatchLayout batch_layout(const Shape& a, const Shape& b, const char* op) {
  if (a.size() < 2 || b.size() < 2) {
    throw ShapeError(std::string(op) + ": operands must have >= 2 dims, got " +
                     shape_to_string(a) + " and " + shape_to_string(b));
  }
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch between " + shape_to_string(a) + " and " +
                     shape_to_string(b));
  }
  BatchLayout bl;
  const std::size_t nbatch = a.size() - 2;
  bl.dims.resize(nbatch);
  bl.a_strides.assign(nbatch, 0);
  bl.b_strides.assign(nbatch, 0);
  for (std::size_t i = 0; i < nbatch; ++i) {
    if (a[i] == b[i]) {
      bl.dims[i] = a[i];
    } else if (a[i] == 1) {
      bl.dims[i] = b[i];
    } else if (b[i] == 1) {
      bl.dims[i] = a[i];
    } else {
      throw ShapeError(std::string(op) + ": batch dims incompatible between " + shape_to_string(a) +
                       " and " + shape_to_string(b));
    }
    bl.count *= bl.dims[i];
  }
  // entry strides in units of one matrix
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = nbatch; i-- > 0;) {
    bl.a_strides[i] = (a[i] == 1 && bl.dims[i] != 1) ? 0 : sa;
    bl.b_strides[i] = (b[i] == 1 && bl.dims[i] != 1) ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return bl;
}

void batch_offsets(const BatchLayout& bl, std::size_t flat, std::size_t& off_a, std::size_t& off_b) {
  off_a = 0;
  off_b = 0;
  for (std::size_t i = bl.dims.size(); i-- > 0;) {
    const std::size_t idx = flat % bl.dims[i];
    flat /= bl.dims[i];
    off_a += idx * bl.a_strides[i];
    off_b += idx * bl.b_strides[i];
  }
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, Tape* tape, bool b_transposed) {
  const char* op = b_transposed ? "matmul_nt" : "matmul";
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  BatchLayout bl = batch_layout(sa, sb, op);
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t bk = b_transposed ? sb[sb.size() - 1] : sb[sb.size() - 2];
  const std::size_t n = b_transposed ? sb[sb.size() - 2] : sb[sb.size() - 1];
  if (k != bk) {
    throw ShapeError(std::string(op) + ": inner dimensions disagree between " + shape_to_string(sa) +
                     " and " + shape_to_string(sb));
  }
  Shape out_shape(bl.dims);
  out_shape.push_back(m);
  out_shape.push_back(n);

  Tensor out = Tensor::zeros(out_shape, tracked(tape, a, b));
  const std::size_t a_mat = m * k, b_mat = k * n, o_mat = m * n;
  for (std::size_t e = 0; e < bl.count; ++e) {
    std::size_t oa, ob;
    batch_offsets(bl, e, oa, ob);
    const double* pa = a.data() + oa * a_mat;
    const double* pb = b.data() + ob * b_mat;
    double* po = out.data() + e * o_mat;
    if (b_transposed) {
      mm_nt(pa, pb, po, m, k, n, false);
    } else {
      mm_nn(pa, pb, po, m, k, n, false);
    }
  }
  check_finite(out, op);

  if (out.requires_grad()) {
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to, bl, m, k, n, b_transposed]() mutable {
      const std::size_t a_mat = m * k, b_mat = k * n, o_mat = m * n;
      for (std::size_t e = 0; e < bl.count; ++e) {
        std::size_t oa, ob;
        batch_offsets(bl, e, oa, ob);
        const double* g = to.grad() + e * o_mat;
        if (ta.requires_grad()) {
          double* ga = ta.grad() + oa * a_mat;
          const double* pb = tb.data() + ob * b_mat;
          // da = g * b^T (nn layout) or g * b (nt layout)
          if (b_transposed) {
            mm_nn(g, pb, ga, m, n, k, true);
          } else {
            mm_nt(g, pb, ga, m, n, k, true);
          }
        }
        if (tb.requires_grad()) {
          double* gb = tb.grad() + ob * b_mat;
          const double* pa = ta.data() + oa * a_mat;
          // db = a^T * g (nn) or g^T * a (nt)
          if (b_transposed) {
            mm_tn(g, pa, gb, m, n, k, true);
          } else {
            mm_tn(pa, g, gb, m, k, n, true);
          }
        }
      }
    });
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch between " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) { return matmul_impl(a, b, tape, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape) { return matmul_impl(a, b, tape, true); }

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), tracked(tape, a, b));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(out, "add");
  if (out.requires_grad()) {
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to]() mutable {
      const std::size_t n2 = to.numel();
      if (ta.requires_grad())
        for (std::size_t i = 0; i < n2; ++i) ta.grad()[i] += to.grad()[i];
      if (tb.requires_grad())
        for (std::size_t i = 0; i < n2; ++i) tb.grad()[i] += to.grad()[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), tracked(tape, a, b));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(out, "mul");
  if (out.requires_grad()) {
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to]() mutable {
      const std::size_t n2 = to.numel();
      if (ta.requires_grad())
        for (std::size_t i = 0; i < n2; ++i) ta.grad()[i] += to.grad()[i] * tb.data()[i];
      if (tb.requires_grad())
        for (std::size_t i = 0; i < n2; ++i) tb.grad()[i] += to.grad()[i] * ta.data()[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s, Tape* tape) {
  Tensor out = Tensor::zeros(a.shape(), tracked(tape, a));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  check_finite(out, "scale");
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to, s]() mutable {
      const std::size_t n2 = to.numel();
      for (std::size_t i = 0; i < n2; ++i) ta.grad()[i] += to.grad()[i] * s;
    });
  }
  return out;
}

Tensor silu(const Tensor& a, Tape* tape) {
  Tensor out = Tensor::zeros(a.shape(), tracked(tape, a));
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out.data()[i] = x / (1.0 + std::exp(-x));
  }
  check_finite(out, "silu");
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to]() mutable {
      const std::size_t n2 = to.numel();
      for (std::size_t i = 0; i < n2; ++i) {
        const double x = ta.data()[i];
        const double sig = 1.0 / (1.0 + std::exp(-x));
        ta.grad()[i] += to.grad()[i] * sig * (1.0 + x * (1.0 - sig));
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a, Tape* tape) {
  double acc = 0.0;
  for (double v : a.vec()) acc += v;
  Tensor out = Tensor::scalar(acc, tracked(tape, a));
  check_finite(out, "sum");
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to]() mutable {
      const double g = to.grad()[0];
      const std::size_t n2 = ta.numel();
      for (std::size_t i = 0; i < n2; ++i) ta.grad()[i] += g;
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& a, const std::uint8_t* allowed, Tape* tape) {
  if (a.ndim() < 1) throw ShapeError("softmax_rows: needs at least 1 dim");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  Tensor out = Tensor::zeros(a.shape(), tracked(tape, a));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * n;
    const std::uint8_t* keep = allowed ? allowed + r * n : nullptr;
    double* y = out.data() + r * n;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep || keep[j]) m = std::max(m, x[j]);
    }
    if (m == -std::numeric_limits<double>::infinity()) {
      throw NumericalError("softmax_rows: empty attention row " + std::to_string(r));
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep || keep[j]) {
        y[j] = std::exp(x[j] - m);
        z += y[j];
      } else {
        y[j] = 0.0;
      }
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  check_finite(out, "softmax_rows");
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to, n, rows]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = to.data() + r * n;
        const double* g = to.grad() + r * n;
        double* gx = ta.grad() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * p[j];
        for (std::size_t j = 0; j < n; ++j) gx[j] += p[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, Tape* tape) {
  if (x.ndim() < 1 || weight.ndim() != 1) throw ShapeError("rmsnorm: bad ranks");
  const std::size_t d = x.shape().back();
  if (weight.dim(0) != d) {
    throw ShapeError("rmsnorm: weight length " + std::to_string(weight.dim(0)) +
                     " does not match last dim " + std::to_string(d));
  }
  constexpr double kEps = 1e-6;
  const std::size_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape(), tracked(tape, x, weight));
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data() + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
    ms /= static_cast<double>(d);
    inv_rms[r] = 1.0 / std::sqrt(ms + kEps);
    double* y = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) y[j] = xi[j] * inv_rms[r] * weight.data()[j];
  }
  check_finite(out, "rmsnorm");
  if (out.requires_grad()) {
    Tensor tx = x, tw = weight, to = out;
    tape->record([tx, tw, to, inv_rms, d, rows]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = tx.data() + r * d;
        const double* g = to.grad() + r * d;
        const double ir = inv_rms[r];
        if (tw.requires_grad()) {
          double* gw = tw.grad();
          for (std::size_t j = 0; j < d; ++j) gw[j] += g[j] * xi[j] * ir;
        }
        if (tx.requires_grad()) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += g[j] * tw.data()[j] * xi[j];
          const double c = dot * ir * ir * ir / static_cast<double>(d);
          double* gx = tx.grad() + r * d;
          for (std::size_t j = 0; j < d; ++j) gx[j] += g[j] * tw.data()[j] * ir - c * xi[j];
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, Tape* tape) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be 2-D");
  const std::size_t n = logits.dim(0);
  const std::size_t v = logits.dim(1);
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
  }
  double total = 0.0;
  std::vector<double> lse(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = logits.data() + r * v;
    double m = x[0];
    for (std::size_t j = 1; j < v; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - m);
    lse[r] = m + std::log(z);
    total += lse[r] - x[targets[r]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n), tracked(tape, logits));
  check_finite(out, "cross_entropy");
  if (out.requires_grad()) {
    Tensor tl = logits, to = out;
    tape->record([tl, to, targets, lse, n, v]() mutable {
      const double g = to.grad()[0] / static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) {
        const double* x = tl.data() + r * v;
        double* gx = tl.grad() + r * v;
        for (std::size_t j = 0; j < v; ++j) {
          const double p = std::exp(x[j] - lse[r]);
          gx[j] += g * (p - (static_cast<std::size_t>(targets[r]) == j ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, Tape* tape) {
  if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
  const std::size_t v = table.dim(0);
  const std::size_t d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
  }
  Tensor out = Tensor::zeros({ids.size(), d}, tracked(tape, table));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = table.data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  check_finite(out, "embedding_lookup");
  if (out.requires_grad()) {
    Tensor tt = table, to = out;
    tape->record([tt, to, ids, d]() mutable {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double* dst = tt.grad() + static_cast<std::size_t>(ids[i]) * d;
        const double* g = to.grad() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape new_shape, Tape* tape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                     shape_to_string(new_shape));
  }
  Tensor out = Tensor::from_data(std::move(new_shape), a.vec(), tracked(tape, a));
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to]() mutable {
      const std::size_t n2 = to.numel();
      for (std::size_t i = 0; i < n2; ++i) ta.grad()[i] += to.grad()[i];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count, Tape* tape) {
  if (a.ndim() != 2) throw ShapeError("slice_rows: tensor must be 2-D");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (begin + count > rows) {
    throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") exceeds " + std::to_string(rows) + " rows");
  }
  Tensor out = Tensor::zeros({count, cols}, tracked(tape, a));
  std::copy(a.data() + begin * cols, a.data() + (begin + count) * cols, out.data());
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to, begin, count, cols]() mutable {
      double* g = ta.grad() + begin * cols;
      const double* go = to.grad();
      for (std::size_t i = 0; i < count * cols; ++i) g[i] += go[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count, Tape* tape) {
  if (a.ndim() != 2) throw ShapeError("slice_cols: tensor must be 2-D");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (begin + count > cols) {
    throw IndexError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") exceeds " + std::to_string(cols) +
                     " cols");
  }
  Tensor out = Tensor::zeros({rows, count}, tracked(tape, a));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a.data() + r * cols + begin, a.data() + r * cols + begin + count,
              out.data() + r * count);
  }
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to, begin, count, cols, rows]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        double* g = ta.grad() + r * cols + begin;
        const double* go = to.grad() + r * count;
        for (std::size_t j = 0; j < count; ++j) g[j] += go[j];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
    rg = rg || tracked(tape, p);
  }
  Tensor out = Tensor::zeros({rows, cols}, rg);
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), out.data() + at);
    at += p.numel();
  }
  if (out.requires_grad()) {
    std::vector<Tensor> tp = parts;
    Tensor to = out;
    tape->record([tp, to]() mutable {
      std::size_t at2 = 0;
      for (Tensor& p : tp) {
        if (p.requires_grad()) {
          const double* g = to.grad() + at2;
          for (std::size_t i = 0; i < p.numel(); ++i) p.grad()[i] += g[i];
        }
        at2 += p.numel();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.dim(1);
    rg = rg || tracked(tape, p);
  }
  Tensor out = Tensor::zeros({rows, cols}, rg);
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(p.data() + r * pc, p.data() + (r + 1) * pc, out.data() + r * cols + at);
    }
    at += pc;
  }
  if (out.requires_grad()) {
    std::vector<Tensor> tp = parts;
    Tensor to = out;
    tape->record([tp, to, rows, cols]() mutable {
      std::size_t at2 = 0;
      for (Tensor& p : tp) {
        const std::size_t pc = p.dim(1);
        if (p.requires_grad()) {
          for (std::size_t r = 0; r < rows; ++r) {
            const double* g = to.grad() + r * cols + at2;
            double* gp = p.grad() + r * pc;
            for (std::size_t j = 0; j < pc; ++j) gp[j] += g[j];
          }
        }
        at2 += pc;
      }
    });
  }
  return out;
}

Tensor roll_rows(const Tensor& a, std::ptrdiff_t shift, Tape* tape) {
  if (a.ndim() != 2) throw ShapeError("roll_rows: tensor must be 2-D");
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(a.dim(0));
  const std::size_t cols = a.dim(1);
  const std::ptrdiff_t s = ((shift % rows) + rows) % rows;
  Tensor out = Tensor::zeros(a.shape(), tracked(tape, a));
  for (std::ptrdiff_t t = 0; t < rows; ++t) {
    const std::ptrdiff_t src = (t + s) % rows;
    std::copy(a.data() + src * cols, a.data() + (src + 1) * cols, out.data() + t * cols);
  }
  if (out.requires_grad()) {
    Tensor ta = a, to = out;
    tape->record([ta, to, s, rows, cols]() mutable {
      for (std::ptrdiff_t t = 0; t < rows; ++t) {
        const std::ptrdiff_t src = (t + s) % rows;
        double* g = ta.grad() + src * cols;
        const double* go = to.grad() + t * cols;
        for (std::size_t j = 0; j < cols; ++j) g[j] += go[j];
      }
    });
  }
  return out;
}

namespace {

void rope_rotate(const double* x, double* y, std::size_t n, std::size_t d,
                 const std::vector<std::size_t>& positions, double theta, double interp_factor,
                 bool inverse) {
  std::vector<double> freqs(d / 2);
  for (std::size_t i = 0; i * 2 < d; ++i) {
    freqs[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d));
  }
  for (std::size_t t = 0; t < n; ++t) {
    const double p = static_cast<double>(positions[t]) / interp_factor;
    const double* xi = x + t * d;
    double* yi = y + t * d;
    for (std::size_t i = 0; i * 2 < d; ++i) {
      const double ang = p * freqs[i];
      const double c = std::cos(ang);
      const double s = inverse ? -std::sin(ang) : std::sin(ang);
      const double a = xi[2 * i], b = xi[2 * i + 1];
      yi[2 * i] = c * a - s * b;
      yi[2 * i + 1] = s * a + c * b;
    }
  }
}

}  // namespace

Tensor rope(const Tensor& x, const std::vector<std::size_t>& positions, double theta,
            double interp_factor, Tape* tape) {
  if (x.ndim() != 2) throw ShapeError("rope: tensor must be 2-D [n, head_dim]");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (d % 2 != 0) throw ConfigError("rope: head_dim must be even, got " + std::to_string(d));
  if (positions.size() != n) throw ShapeError("rope: positions length mismatch");
  if (interp_factor < 1.0) throw ConfigError("rope: interp_factor must be >= 1");
  Tensor out = Tensor::zeros(x.shape(), tracked(tape, x));
  rope_rotate(x.data(), out.data(), n, d, positions, theta, interp_factor, false);
  check_finite(out, "rope");
  if (out.requires_grad()) {
    Tensor tx = x, to = out;
    tape->record([tx, to, positions, theta, interp_factor, n, d]() mutable {
      // gradient of a rotation is the inverse rotation of the output grad,
      // accumulated into the input grad
      std::vector<double> tmp(n * d);
      rope_rotate(to.grad(), tmp.data(), n, d, positions, theta, interp_factor, true);
      double* g = tx.grad();
      for (std::size_t i = 0; i < n * d; ++i) g[i] += tmp[i];
    });
  }
  return out;
}

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw StateError("backward: loss is not attached to the tape (requires_grad off)");
  }
  Tensor seed = loss;  // handle copy, shared storage
  seed.grad_vec()[0] += 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
  tape.clear();
}

double finite_diff_check(const std::function<Tensor(Tape*)>& f, Tensor x, double h) {
  if (h <= 0.0) throw ConfigError("finite_diff_check: h must be positive");
  if (!x.requires_grad()) x.set_requires_grad(true);

  Tape tape;
  x.zero_grad();
  Tensor loss = f(&tape);
  backward(loss, tape);
  std::vector<double> analytic = x.grad_vec();

  double max_rel = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double fp = f(nullptr).item();
    x.data()[i] = saved - h;
    const double fm = f(nullptr).item();
    x.data()[i] = saved;
    const double num = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[i] - num) / (std::abs(analytic[i]) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace sinkattn
