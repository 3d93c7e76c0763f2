#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every tensor is viewed as a matrix: `cols()` is the last dimension and
// `rows()` the product of the others. Ops are free functions in `spot::ops`
// taking the Tape as first argument; a non-recording Tape evaluates values
// only (inference).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spot/error.hpp"
#include "spot/rng.hpp"

namespace spot {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline constexpr std::size_t kLeaf = std::numeric_limits<std::size_t>::max();

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::size_t tape_index = kLeaf;  // position of the producing op, kLeaf for leaves
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
  std::size_t rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : numel() / c;
  }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() const { return node_->value; }
  const std::vector<T>& vec() const { return node_->value; }

  T operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T& operator()(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() const {
    if (node_->grad.empty()) node_->grad.assign(numel(), T(0));
    return node_->grad;
  }
  void zero_grad() const { node_->grad.clear(); }

  std::size_t tape_index() const { return node_->tape_index; }
  TensorNode<T>* node() const { return node_.get(); }

  // Deep copy of the values as a fresh leaf.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of differentiable ops. Backward walks the records in
// exact reverse order; gradients into a node accumulate additively.
template <class T>
class Tape {
 public:
  struct Entry {
    std::string name;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  // Whether an op over `inputs` needs a record.
  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs)
      if (t->defined() && t->requires_grad()) return true;
    return false;
  }
  bool wants_grad(const std::vector<Tensor<T>>& inputs) const {
    if (!recording_) return false;
    for (const auto& t : inputs)
      if (t.requires_grad()) return true;
    return false;
  }

  void record(std::string name, std::vector<Tensor<T>> inputs, Tensor<T>& output,
              std::function<void()> backward) {
    output.set_requires_grad(true);
    output.node()->tape_index = entries_.size();
    entries_.push_back({std::move(name), std::move(inputs), output, std::move(backward)});
  }

  void backward(Tensor<T>& loss) {
    if (done_) throw Error("backward called twice without reset");
    if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (entries_.empty()) throw Error("backward on an empty tape");
    if (!loss.requires_grad()) throw Error("loss does not depend on any differentiable input");
    loss.mutable_grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (it->output.has_grad()) it->backward();
    done_ = true;
  }

  void reset() {
    entries_.clear();
    done_ = false;
  }

 private:
  bool recording_;
  bool done_ = false;
  std::vector<Entry> entries_;
};

namespace ops {

namespace detail {

template <class T>
void check_finite(const char* op, const Tensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
}

template <class T>
[[noreturn]] void mismatch(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

// Row vector usable as a per-column bias for `a`.
template <class T>
bool is_row_of(const Tensor<T>& bias, const Tensor<T>& a) {
  return bias.numel() == a.cols() && bias.rows() == 1;
}

// dst += src * s
template <class T>
void axpy(std::span<T> dst, std::span<const T> src, T s = T(1)) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

// C[m x n] += A[m x k] * B[k x n]; per output, products are added in ascending k.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] += s;
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bi = b + i * n;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) detail::mismatch("matmul", a, b);
  auto out = Tensor<T>::zeros({m, n});
  detail::gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  detail::check_finite("matmul", out);
  if (tape.wants_grad({&a, &b})) {
    tape.record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      auto g = out.grad();
      if (a.requires_grad())
        detail::gemm_nt(g.data(), b.data().data(), a.mutable_grad().data(), m, n, k);
      if (b.requires_grad())
        detail::gemm_tn(a.data().data(), g.data(), b.mutable_grad().data(), m, k, n);
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto out = Tensor<T>::zeros({c, r});
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[j * r + i] = x[i * c + j];
  if (tape.wants_grad({&a})) {
    tape.record("transpose", {a}, out, [a, out, r, c]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

// a + b with b either the same shape as a or a row vector broadcast over rows.
template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape() || (a.numel() == b.numel() && a.cols() == b.cols());
  const bool bcast = !same && detail::is_row_of(b, a);
  if (!same && !bcast) detail::mismatch("add", a, b);
  auto out = a.detach();
  auto o = out.mutable_data();
  auto y = b.data();
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += y[bcast ? i % c : i];
  detail::check_finite("add", out);
  if (tape.wants_grad({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b, out, bcast, c]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) detail::axpy(a.mutable_grad(), g);
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bcast ? i % c : i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel() || a.cols() != b.cols()) detail::mismatch("mul", a, b);
  auto out = a.detach();
  auto o = out.mutable_data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= y[i];
  detail::check_finite("mul", out);
  if (tape.wants_grad({&a, &b})) {
    tape.record("mul", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T s) {
  auto out = a.detach();
  for (T& v : out.mutable_data()) v *= s;
  detail::check_finite("scale", out);
  if (tape.wants_grad({&a})) {
    tape.record("scale", {a}, out, [a, out, s]() mutable { detail::axpy(a.mutable_grad(), out.grad(), s); });
  }
  return out;
}

// a * s where s is a differentiable one-element tensor.
template <class T>
Tensor<T> mul_scalar(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) detail::mismatch("mul_scalar", a, s);
  const T sv = s.item();
  auto out = a.detach();
  for (T& v : out.mutable_data()) v *= sv;
  detail::check_finite("mul_scalar", out);
  if (tape.wants_grad({&a, &s})) {
    tape.record("mul_scalar", {a, s}, out, [a, s, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) detail::axpy(a.mutable_grad(), g, s.item());
      if (s.requires_grad()) {
        T acc = 0;
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
        s.mutable_grad()[0] += acc;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), a.vec());
  if (tape.wants_grad({&a})) {
    tape.record("reshape", {a}, out, [a, out]() mutable { detail::axpy(a.mutable_grad(), out.grad()); });
  }
  return out;
}

template <class T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::vector<T> data;
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) detail::mismatch("concat_rows", parts.front(), p);
    data.insert(data.end(), p.data().begin(), p.data().end());
    r += p.rows();
  }
  Tensor<T> out({r, c}, std::move(data));
  if (tape.wants_grad(parts)) {
    tape.record("concat_rows", parts, out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto p : parts) {
        if (p.requires_grad()) detail::axpy(p.mutable_grad(), g.subspan(off, p.numel()));
        off += p.numel();
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) detail::mismatch("concat_cols", parts.front(), p);
    c += p.cols();
  }
  auto out = Tensor<T>::zeros({r, c});
  auto o = out.mutable_data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().begin() + i * pc, pc, o.begin() + i * c + off);
    off += pc;
  }
  if (tape.wants_grad(parts)) {
    tape.record("concat_cols", parts, out, [parts, out, r, c]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto p : parts) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * c + off + j];
        }
        off += pc;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin > end || end > c) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  auto out = Tensor<T>::zeros({r, w});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(a.data().begin() + i * c + begin, w, o.begin() + i * w);
  if (tape.wants_grad({&a})) {
    tape.record("slice_cols", {a}, out, [a, out, r, c, w, begin]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += g[i * w + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& a, std::span<const std::size_t> indices) {
  const std::size_t c = a.cols(), r = a.rows();
  auto out = Tensor<T>::zeros({indices.size(), c});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= r) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.data().begin() + indices[i] * c, c, o.begin() + i * c);
  }
  if (tape.wants_grad({&a})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tape.record("gather_rows", {a}, out, [a, out, idx, c]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
    });
  }
  return out;
}

template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& a, const std::vector<std::size_t>& indices) {
  return gather_rows(tape, a, std::span<const std::size_t>(indices));
}

template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(tape, a, idx);
}

template <class T>
Tensor<T> gather_cols(Tape<T>& tape, const Tensor<T>& a, std::span<const std::size_t> indices) {
  const std::size_t r = a.rows(), c = a.cols(), w = indices.size();
  auto out = Tensor<T>::zeros({r, w});
  auto o = out.mutable_data();
  for (std::size_t j = 0; j < w; ++j)
    if (indices[j] >= c) throw ShapeError("gather_cols: index out of range");
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) o[i * w + j] = a.data()[i * c + indices[j]];
  if (tape.wants_grad({&a})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tape.record("gather_cols", {a}, out, [a, out, idx, r, c]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      const std::size_t w = idx.size();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * c + idx[j]] += g[i * w + j];
    });
  }
  return out;
}

namespace detail {

// Row-wise softmax restricted to `allowed` entries (all entries if empty).
// Max, exponentials and the normalizer are accumulated in ascending column order.
template <class T>
void softmax_rows(std::span<const T> x, std::span<T> y, std::size_t r, std::size_t c,
                  std::span<const std::uint8_t> allowed) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.data() + i * c;
    T* yi = y.data() + i * c;
    const std::uint8_t* mi = allowed.empty() ? nullptr : allowed.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (!mi || mi[j]) mx = std::max(mx, xi[j]);
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      yi[j] = (!mi || mi[j]) ? std::exp(xi[j] - mx) : T(0);
      sum += yi[j];
    }
    if (sum > T(0))
      for (std::size_t j = 0; j < c; ++j) yi[j] /= sum;
  }
}

template <class T>
void softmax_rows_backward(std::span<const T> y, std::span<const T> g, std::span<T> gx,
                           std::size_t r, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i) {
    T dot = 0;
    for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
    for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
  }
}

}  // namespace detail

template <class T>
Tensor<T> softmax_lastdim(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto out = Tensor<T>::zeros(a.shape());
  detail::softmax_rows<T>(a.data(), out.mutable_data(), r, c, {});
  detail::check_finite("softmax_lastdim", out);
  if (tape.wants_grad({&a})) {
    tape.record("softmax_lastdim", {a}, out, [a, out, r, c]() mutable {
      detail::softmax_rows_backward<T>(out.data(), out.grad(), a.mutable_grad(), r, c);
    });
  }
  return out;
}

// Softmax over the entries with allowed[i] != 0; disallowed entries get exactly
// zero probability. A row with no allowed entry is all zeros.
template <class T>
Tensor<T> masked_softmax_lastdim(Tape<T>& tape, const Tensor<T>& a, std::span<const std::uint8_t> allowed) {
  const std::size_t r = a.rows(), c = a.cols();
  if (allowed.size() != a.numel()) throw ShapeError("masked_softmax_lastdim: mask size mismatch");
  auto out = Tensor<T>::zeros(a.shape());
  detail::softmax_rows<T>(a.data(), out.mutable_data(), r, c, allowed);
  detail::check_finite("masked_softmax_lastdim", out);
  if (tape.wants_grad({&a})) {
    tape.record("masked_softmax_lastdim", {a}, out, [a, out, r, c]() mutable {
      detail::softmax_rows_backward<T>(out.data(), out.grad(), a.mutable_grad(), r, c);
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(kLayerNormEps)) {
  const std::size_t r = a.rows(), c = a.cols();
  if (gain.numel() != c || bias.numel() != c) detail::mismatch("layer_norm", a, gain);
  auto out = Tensor<T>::zeros(a.shape());
  std::vector<T> xhat(a.numel()), inv_std(r);
  auto x = a.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += x[i * c + j];
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = x[i * c + j] - mean;
      var += d * d;
    }
    var /= T(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x[i * c + j] - mean) * inv_std[i];
      o[i * c + j] = xhat[i * c + j] * gain.data()[j] + bias.data()[j];
    }
  }
  detail::check_finite("layer_norm", out);
  if (tape.wants_grad({&a, &gain, &bias})) {
    tape.record("layer_norm", {a, gain, bias}, out,
                [a, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c]() mutable {
                  auto g = out.grad();
                  if (gain.requires_grad()) {
                    auto gg = gain.mutable_grad();
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
                  }
                  if (bias.requires_grad()) {
                    auto gb = bias.mutable_grad();
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                  }
                  if (a.requires_grad()) {
                    auto ga = a.mutable_grad();
                    auto w = gain.data();
                    for (std::size_t i = 0; i < r; ++i) {
                      T sum_d = 0, sum_dx = 0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = g[i * c + j] * w[j];
                        sum_d += d;
                        sum_dx += d * xhat[i * c + j];
                      }
                      for (std::size_t j = 0; j < c; ++j) {
                        const T d = g[i * c + j] * w[j];
                        ga[i * c + j] +=
                            inv_std[i] * (d - sum_d / T(c) - xhat[i * c + j] * sum_dx / T(c));
                      }
                    }
                  }
                });
  }
  return out;
}

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
  auto out = a.detach();
  for (T& v : out.mutable_data()) v = v > T(0) ? v : T(0);
  if (tape.wants_grad({&a})) {
    tape.record("relu", {a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) ga[i] += g[i];
    });
  }
  return out;
}

// x[N x in] * weight[in x out] + bias[out]
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const std::size_t n = x.rows(), in = x.cols(), out_dim = weight.cols();
  if (weight.rows() != in) detail::mismatch("linear", x, weight);
  if (bias.numel() != out_dim) detail::mismatch("linear", weight, bias);
  auto out = Tensor<T>::zeros({n, out_dim});
  auto o = out.mutable_data();
  detail::gemm_nn(x.data().data(), weight.data().data(), o.data(), n, in, out_dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out_dim; ++j) o[i * out_dim + j] += bias.data()[j];
  detail::check_finite("linear", out);
  if (tape.wants_grad({&x, &weight, &bias})) {
    tape.record("linear", {x, weight, bias}, out, [x, weight, bias, out, n, in, out_dim]() mutable {
      auto g = out.grad();
      if (x.requires_grad())
        detail::gemm_nt(g.data(), weight.data().data(), x.mutable_grad().data(), n, out_dim, in);
      if (weight.requires_grad())
        detail::gemm_tn(x.data().data(), g.data(), weight.mutable_grad().data(), n, in, out_dim);
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
      }
    });
  }
  return out;
}

// Identifies one dropout application; the mask is a pure function of the key.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t op_id = 0;

  std::uint64_t stream() const noexcept {
    return rng::mix64(rng::derive(seed, "dropout", step) ^ rng::mix64(op_id + 1));
  }
};

template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& a, double p, bool train, DropoutKey key) {
  if (!(p >= 0.0 && p < 1.0)) throw Error("dropout: p must lie in [0, 1)");
  if (!train || p == 0.0) return a;
  const std::uint64_t stream = key.stream();
  const T keep_scale = T(1) / T(1.0 - p);
  std::vector<T> mask(a.numel());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = rng::counter_uniform(stream, i) >= p ? keep_scale : T(0);
  auto out = a.detach();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mask[i];
  if (tape.wants_grad({&a})) {
    tape.record("dropout", {a}, out, [a, out, mask = std::move(mask)]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
    });
  }
  return out;
}

// Rows scaled to unit Euclidean norm; all-zero rows stay zero.
template <class T>
Tensor<T> l2_normalize_lastdim(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  auto out = a.detach();
  std::vector<T> norms(r);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += o[i * c + j] * o[i * c + j];
    norms[i] = std::sqrt(ss);
    if (norms[i] > T(0))
      for (std::size_t j = 0; j < c; ++j) o[i * c + j] /= norms[i];
  }
  detail::check_finite("l2_normalize_lastdim", out);
  if (tape.wants_grad({&a})) {
    tape.record("l2_normalize_lastdim", {a}, out, [a, out, norms = std::move(norms), r, c]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < r; ++i) {
        if (norms[i] == T(0)) continue;
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  auto out = Tensor<T>::scalar(s);
  detail::check_finite("sum", out);
  if (tape.wants_grad({&a})) {
    tape.record("sum", {a}, out, [a, out]() mutable {
      const T g = out.grad()[0];
      for (T& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(tape, sum(tape, a), T(1) / T(a.numel()));
}

// Sum of one-element tensors; skips undefined entries. Returns 0 if nothing remains.
template <class T>
Tensor<T> add_scalars(Tape<T>& tape, const std::vector<Tensor<T>>& terms) {
  std::vector<Tensor<T>> live;
  for (const auto& t : terms)
    if (t.defined()) live.push_back(t);
  if (live.empty()) return Tensor<T>::scalar(T(0));
  return sum(tape, concat_rows(tape, live));
}

// Numerically stable binary cross-entropy with logits, averaged over entries.
template <class T>
T bce_with_logits_value(T x, T t) {
  return std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
}

template <class T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> bce_with_logits_mean(Tape<T>& tape, const Tensor<T>& logits, std::span<const T> targets) {
  const std::size_t n = logits.numel();
  if (targets.size() != n) throw ShapeError("bce_with_logits_mean: target length mismatch");
  if (n == 0) throw ShapeError("bce_with_logits_mean: empty input");
  T acc = 0;
  auto x = logits.data();
  for (std::size_t i = 0; i < n; ++i) acc += bce_with_logits_value(x[i], targets[i]);
  auto out = Tensor<T>::scalar(acc / T(n));
  detail::check_finite("bce_with_logits_mean", out);
  if (tape.wants_grad({&logits})) {
    std::vector<T> tgt(targets.begin(), targets.end());
    tape.record("bce_with_logits_mean", {logits}, out, [logits, out, tgt = std::move(tgt), n]() mutable {
      const T g = out.grad()[0] / T(n);
      auto gx = logits.mutable_grad();
      auto x = logits.data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g * (sigmoid_value(x[i]) - tgt[i]);
    });
  }
  return out;
}

inline constexpr double kDiceSmooth = 1.0;

// 1 - (2 sum(p t) + s) / (sum p + sum t + s) with p = sigmoid(logits).
template <class T>
Tensor<T> dice_with_logits(Tape<T>& tape, const Tensor<T>& logits, std::span<const T> targets) {
  const std::size_t n = logits.numel();
  if (targets.size() != n) throw ShapeError("dice_with_logits: target length mismatch");
  const T s = T(kDiceSmooth);
  std::vector<T> p(n);
  T inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = sigmoid_value(logits.data()[i]);
    inter += p[i] * targets[i];
    sp += p[i];
    st += targets[i];
  }
  const T num = T(2) * inter + s, den = sp + st + s;
  auto out = Tensor<T>::scalar(T(1) - num / den);
  detail::check_finite("dice_with_logits", out);
  if (tape.wants_grad({&logits})) {
    std::vector<T> tgt(targets.begin(), targets.end());
    tape.record("dice_with_logits", {logits}, out,
                [logits, out, p = std::move(p), tgt = std::move(tgt), num, den, n]() mutable {
                  const T g = out.grad()[0];
                  auto gx = logits.mutable_grad();
                  for (std::size_t i = 0; i < n; ++i) {
                    const T dl_dp = -(T(2) * tgt[i] * den - num) / (den * den);
                    gx[i] += g * dl_dp * p[i] * (T(1) - p[i]);
                  }
                });
  }
  return out;
}

// Weighted mean cross-entropy: sum_i w_i * (-log softmax(logits_i)[target_i]) / sum_i w_i.
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::size_t> targets,
                        std::span<const T> weights) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r || weights.size() != r) throw ShapeError("cross_entropy: row count mismatch");
  std::vector<T> prob(logits.numel());
  detail::softmax_rows<T>(logits.data(), prob, r, c, {});
  T acc = 0, wsum = 0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] >= c) throw ShapeError("cross_entropy: target class out of range");
    const T* xi = logits.data().data() + i * c;
    const T mx = *std::max_element(xi, xi + c);
    T se = 0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(xi[j] - mx);
    acc += weights[i] * (mx + std::log(se) - xi[targets[i]]);
    wsum += weights[i];
  }
  if (!(wsum > T(0))) throw Error("cross_entropy: weights sum to zero");
  auto out = Tensor<T>::scalar(acc / wsum);
  detail::check_finite("cross_entropy", out);
  if (tape.wants_grad({&logits})) {
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    std::vector<T> w(weights.begin(), weights.end());
    tape.record("cross_entropy", {logits}, out,
                [logits, out, prob = std::move(prob), tg = std::move(tg), w = std::move(w), wsum, r, c]() mutable {
                  const T g = out.grad()[0] / wsum;
                  auto gx = logits.mutable_grad();
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                      gx[i * c + j] += g * w[i] * (prob[i * c + j] - (j == tg[i] ? T(1) : T(0)));
                });
  }
  return out;
}

}  // namespace ops

}  // namespace spot
