#pragma once

// Dense double-precision tensors with a reverse-mode gradient tape.
//
// A Tensor is a value (shape + row-major values). Tensors created through
// Tape::variable() are leaves on that tape; every op applied to a tracked
// tensor records an entry on the same tape. Ops on untracked tensors simply
// compute values, so inference paths need no tape at all.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace come {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

enum class OpKind {
  add, sub, mul, scale, add_scalar, matmul, exp, log, relu, sqrt, reciprocal,
  clamp, logsumexp, softmax, p_norm, sum, mean, detach, mul_rows, div_rows,
  sub_rows, concat_cols, gather, take_rows, reshape
};

class Tape;

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

class Tensor {
 public:
  Tensor() : shape_{}, values_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (numel(shape_) != values_.size()) {
      throw ShapeError("tensor shape " + to_string(shape_) + " holds " + std::to_string(numel(shape_)) +
                       " values, got " + std::to_string(values_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor zeros(Shape shape) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return values_[0];
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node_id() const { return node_; }

 private:
  friend class Tape;
  Shape shape_;
  std::vector<double> values_;
  Tape* tape_ = nullptr;
  std::size_t node_ = kNoNode;
};

// Gives an op's backward closure writable access to the adjoints of its
// inputs. Untracked (constant) inputs have no adjoint; wants(k) is false.
class GradSink {
 public:
  explicit GradSink(std::vector<std::vector<double>*> slots) : slots_(std::move(slots)) {}
  bool wants(std::size_t k) const { return slots_[k] != nullptr; }
  std::span<double> input(std::size_t k) { return *slots_[k]; }

 private:
  std::vector<std::vector<double>*> slots_;
};

class Gradients {
 public:
  Gradients() = default;
  Gradients(std::unordered_map<std::size_t, std::vector<double>> leaf_grads,
            std::vector<Shape> node_shapes, const Tape* tape)
      : grads_(std::move(leaf_grads)), shapes_(std::move(node_shapes)), tape_(tape) {}

  // Total derivative of the loss with respect to a leaf; zeros when the leaf
  // does not reach the loss.
  Tensor wrt(const Tensor& leaf) const {
    if (leaf.tape() != tape_ || leaf.node_id() == kNoNode) {
      throw std::invalid_argument("gradient requested for a tensor that is not a leaf of this tape");
    }
    const Shape& shape = shapes_.at(leaf.node_id());
    auto it = grads_.find(leaf.node_id());
    if (it == grads_.end()) return Tensor::zeros(shape);
    return Tensor(shape, it->second);
  }

 private:
  std::unordered_map<std::size_t, std::vector<double>> grads_;
  std::vector<Shape> shapes_;
  const Tape* tape_ = nullptr;
};

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> upstream, GradSink& sink)>;

  struct Entry {
    OpKind kind;
    std::vector<std::size_t> inputs;  // kNoNode marks a constant input
    std::size_t output;
    BackwardFn backward;  // saved forward values live in the closure
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor variable(Tensor t) {
    t.tape_ = this;
    t.node_ = new_node(t.shape());
    leaves_.push_back(t.node_);
    return t;
  }

  Tensor record(OpKind kind, std::initializer_list<const Tensor*> inputs, Tensor out, BackwardFn fn) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Tensor* in : inputs) ids.push_back(in->tape() == this ? in->node_id() : kNoNode);
    out.tape_ = this;
    out.node_ = new_node(out.shape());
    entries_.push_back(Entry{kind, std::move(ids), out.node_, std::move(fn)});
    return out;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  Gradients backward(const Tensor& loss) const {
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    if (loss.tape() != this) throw std::invalid_argument("loss is not connected to this tape");
    std::vector<std::vector<double>> adjoint(shapes_.size());
    adjoint[loss.node_id()] = {1.0};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      const auto& upstream = adjoint[it->output];
      if (upstream.empty()) continue;
      std::vector<std::vector<double>*> slots;
      slots.reserve(it->inputs.size());
      for (std::size_t id : it->inputs) {
        if (id == kNoNode) {
          slots.push_back(nullptr);
          continue;
        }
        if (adjoint[id].empty()) adjoint[id].assign(numel(shapes_[id]), 0.0);
        slots.push_back(&adjoint[id]);
      }
      GradSink sink(std::move(slots));
      it->backward(upstream, sink);
    }
    std::unordered_map<std::size_t, std::vector<double>> leaf_grads;
    for (std::size_t id : leaves_) {
      if (!adjoint[id].empty()) leaf_grads.emplace(id, std::move(adjoint[id]));
    }
    return Gradients(std::move(leaf_grads), shapes_, this);
  }

 private:
  std::size_t new_node(const Shape& shape) {
    shapes_.push_back(shape);
    return shapes_.size() - 1;
  }

  std::vector<Entry> entries_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> leaves_;
};

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && t->tape() != tape) throw std::invalid_argument("tensors from different tapes cannot be combined");
    tape = t->tape();
  }
  return tape;
}

inline Tensor finish(OpKind kind, std::initializer_list<const Tensor*> inputs, Tensor out, Tape::BackwardFn fn) {
  Tape* tape = common_tape(inputs);
  if (!tape) return out;
  return tape->record(kind, inputs, std::move(out), std::move(fn));
}

// b either matches a's shape or is a vector matching a's last axis (bias).
inline bool broadcasts_last_axis(const Tensor& a, const Tensor& b) {
  return b.rank() == 1 && a.rank() >= 1 && b.shape()[0] == a.shape().back() && a.shape() != b.shape();
}

inline void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() || broadcasts_last_axis(a, b)) return;
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

// Splits a shape around `axis` into (outer, extent, inner) for strided reductions.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
  Shape reduced;
};

inline AxisView axis_view(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (rank == 0 || axis < 0 || axis >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  }
  AxisView v;
  for (int i = 0; i < rank; ++i) {
    if (i < axis) v.outer *= shape[i];
    if (i > axis) v.inner *= shape[i];
    if (i != axis) v.reduced.push_back(shape[i]);
  }
  v.extent = shape[axis];
  if (v.extent == 0) throw ShapeError("reduction over empty axis of shape " + to_string(shape));
  return v;
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return Tensor(a.shape(), std::move(out));
}

inline void check_rows(const Tensor& a, const Tensor& s, const char* op) {
  if (a.rank() != 2 || s.rank() != 1 || s.shape()[0] != a.shape()[0]) {
    throw ShapeError(std::string(op) + ": expected [B x K] and [B], got " + to_string(a.shape()) + " and " +
                     to_string(s.shape()));
  }
}

}  // namespace detail

// ---- elementwise arithmetic -------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_binary(a, b, "add");
  const bool bias = detail::broadcasts_last_axis(a, b);
  const std::size_t n = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[bias ? i % n : i];
  return detail::finish(OpKind::add, {&a, &b}, Tensor(a.shape(), std::move(out)),
                        [bias, n](std::span<const double> g, GradSink& s) {
                          if (s.wants(0)) {
                            auto ga = s.input(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (s.wants(1)) {
                            auto gb = s.input(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[bias ? i % n : i] += g[i];
                          }
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_binary(a, b, "sub");
  const bool bias = detail::broadcasts_last_axis(a, b);
  const std::size_t n = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[bias ? i % n : i];
  return detail::finish(OpKind::sub, {&a, &b}, Tensor(a.shape(), std::move(out)),
                        [bias, n](std::span<const double> g, GradSink& s) {
                          if (s.wants(0)) {
                            auto ga = s.input(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (s.wants(1)) {
                            auto gb = s.input(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[bias ? i % n : i] -= g[i];
                          }
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_binary(a, b, "mul");
  const bool bias = detail::broadcasts_last_axis(a, b);
  const std::size_t n = b.size();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[bias ? i % n : i];
  std::vector<double> av(a.values().begin(), a.values().end());
  std::vector<double> bv(b.values().begin(), b.values().end());
  return detail::finish(OpKind::mul, {&a, &b}, Tensor(a.shape(), std::move(out)),
                        [bias, n, av = std::move(av), bv = std::move(bv)](std::span<const double> g, GradSink& s) {
                          if (s.wants(0)) {
                            auto ga = s.input(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[bias ? i % n : i];
                          }
                          if (s.wants(1)) {
                            auto gb = s.input(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[bias ? i % n : i] += g[i] * av[i];
                          }
                        });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::finish(OpKind::scale, {&a}, detail::map_unary(a, [c](double x) { return c * x; }),
                        [c](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                        });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::finish(OpKind::add_scalar, {&a}, detail::map_unary(a, [c](double x) { return x + c; }),
                        [](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * b[p * n + j];
    }
  }
  std::vector<double> av(a.values().begin(), a.values().end());
  std::vector<double> bv(b.values().begin(), b.values().end());
  return detail::finish(
      OpKind::matmul, {&a, &b}, Tensor(Shape{m, n}, std::move(out)),
      [m, k, n, av = std::move(av), bv = std::move(bv)](std::span<const double> g, GradSink& s) {
        if (s.wants(0)) {  // dA = G * B^T
          auto ga = s.input(0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (s.wants(1)) {  // dB = A^T * G
          auto gb = s.input(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
        }
      });
}

// ---- elementwise functions --------------------------------------------------

inline Tensor exp(const Tensor& a) {
  Tensor out = detail::map_unary(a, [](double x) { return std::exp(x); });
  std::vector<double> saved(out.values().begin(), out.values().end());
  return detail::finish(OpKind::exp, {&a}, std::move(out),
                        [saved = std::move(saved)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * saved[i];
                        });
}

inline Tensor log(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] > 0.0)) {
      throw DomainError("log: non-positive value " + std::to_string(a[i]) + " at index " + std::to_string(i));
    }
  }
  std::vector<double> av(a.values().begin(), a.values().end());
  return detail::finish(OpKind::log, {&a}, detail::map_unary(a, [](double x) { return std::log(x); }),
                        [av = std::move(av)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
                        });
}

// Subgradient at exactly zero is 0.
inline Tensor relu(const Tensor& a) {
  std::vector<char> active(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) active[i] = a[i] > 0.0;
  return detail::finish(OpKind::relu, {&a}, detail::map_unary(a, [](double x) { return x > 0.0 ? x : 0.0; }),
                        [active = std::move(active)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (active[i]) ga[i] += g[i];
                        });
}

inline Tensor sqrt(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] > 0.0)) {
      throw DomainError("sqrt: non-positive value " + std::to_string(a[i]) + " at index " + std::to_string(i));
    }
  }
  Tensor out = detail::map_unary(a, [](double x) { return std::sqrt(x); });
  std::vector<double> saved(out.values().begin(), out.values().end());
  return detail::finish(OpKind::sqrt, {&a}, std::move(out),
                        [saved = std::move(saved)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / saved[i];
                        });
}

inline Tensor reciprocal(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0.0) throw DomainError("reciprocal: zero at index " + std::to_string(i));
  }
  Tensor out = detail::map_unary(a, [](double x) { return 1.0 / x; });
  std::vector<double> saved(out.values().begin(), out.values().end());
  return detail::finish(OpKind::reciprocal, {&a}, std::move(out),
                        [saved = std::move(saved)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * saved[i] * saved[i];
                        });
}

// Gradient passes where lo <= a <= hi.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  std::vector<char> inside(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) inside[i] = a[i] >= lo && a[i] <= hi;
  return detail::finish(OpKind::clamp, {&a},
                        detail::map_unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }),
                        [inside = std::move(inside)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (inside[i]) ga[i] += g[i];
                        });
}

// Forward is the identity; nothing flows back.
inline Tensor detach(const Tensor& a) { return Tensor(a.shape(), std::vector<double>(a.values().begin(), a.values().end())); }

// ---- reductions -------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return detail::finish(OpKind::sum, {&a}, Tensor::scalar(acc), [](std::span<const double> g, GradSink& s) {
    auto ga = s.input(0);
    for (double& v : ga) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor sum(const Tensor& a, int axis) {
  const auto v = detail::axis_view(a.shape(), axis);
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t e = 0; e < v.extent; ++e)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += a[(o * v.extent + e) * v.inner + i];
  return detail::finish(OpKind::sum, {&a}, Tensor(v.reduced, std::move(out)),
                        [v](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t o = 0; o < v.outer; ++o)
                            for (std::size_t e = 0; e < v.extent; ++e)
                              for (std::size_t i = 0; i < v.inner; ++i)
                                ga[(o * v.extent + e) * v.inner + i] += g[o * v.inner + i];
                        });
}

inline Tensor mean(const Tensor& a, int axis) {
  const auto v = detail::axis_view(a.shape(), axis);
  return scale(sum(a, axis), 1.0 / static_cast<double>(v.extent));
}

// max + log(sum(exp(a - max))) along `axis`; backward is softmax(a).
inline Tensor logsumexp(const Tensor& a, int axis = -1) {
  const auto v = detail::axis_view(a.shape(), axis);
  std::vector<double> out(v.outer * v.inner);
  std::vector<double> soft(a.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      auto idx = [&](std::size_t e) { return (o * v.extent + e) * v.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < v.extent; ++e) mx = std::max(mx, a[idx(e)]);
      double acc = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) acc += std::exp(a[idx(e)] - mx);
      const double lse = mx + std::log(acc);
      out[o * v.inner + i] = lse;
      for (std::size_t e = 0; e < v.extent; ++e) soft[idx(e)] = std::exp(a[idx(e)] - lse);
    }
  return detail::finish(OpKind::logsumexp, {&a}, Tensor(v.reduced, std::move(out)),
                        [v, soft = std::move(soft)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t o = 0; o < v.outer; ++o)
                            for (std::size_t e = 0; e < v.extent; ++e)
                              for (std::size_t i = 0; i < v.inner; ++i) {
                                const std::size_t k = (o * v.extent + e) * v.inner + i;
                                ga[k] += g[o * v.inner + i] * soft[k];
                              }
                        });
}

// exp(a - logsumexp(a)) along `axis`.
inline Tensor softmax(const Tensor& a, int axis = -1) {
  const auto v = detail::axis_view(a.shape(), axis);
  const Tensor lse = logsumexp(detach(a), axis);
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t e = 0; e < v.extent; ++e)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t k = (o * v.extent + e) * v.inner + i;
        out[k] = std::exp(a[k] - lse[o * v.inner + i]);
      }
  std::vector<double> saved = out;
  return detail::finish(OpKind::softmax, {&a}, Tensor(a.shape(), std::move(out)),
                        [v, saved = std::move(saved)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t o = 0; o < v.outer; ++o)
                            for (std::size_t i = 0; i < v.inner; ++i) {
                              double dot = 0.0;
                              for (std::size_t e = 0; e < v.extent; ++e) {
                                const std::size_t k = (o * v.extent + e) * v.inner + i;
                                dot += g[k] * saved[k];
                              }
                              for (std::size_t e = 0; e < v.extent; ++e) {
                                const std::size_t k = (o * v.extent + e) * v.inner + i;
                                ga[k] += saved[k] * (g[k] - dot);
                              }
                            }
                        });
}

// (sum |a|^p)^(1/p) along `axis`. The gradient of a zero-norm slice is 0.
inline Tensor p_norm(const Tensor& a, double p, int axis = -1) {
  if (!(p >= 1.0)) throw std::invalid_argument("p_norm: order must be >= 1, got " + std::to_string(p));
  const auto v = detail::axis_view(a.shape(), axis);
  std::vector<double> out(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double acc = 0.0;
      for (std::size_t e = 0; e < v.extent; ++e) {
        const double x = std::abs(a[(o * v.extent + e) * v.inner + i]);
        acc += p == 1.0 ? x : p == 2.0 ? x * x : std::pow(x, p);
      }
      out[o * v.inner + i] = p == 1.0 ? acc : p == 2.0 ? std::sqrt(acc) : std::pow(acc, 1.0 / p);
    }
  std::vector<double> av(a.values().begin(), a.values().end());
  std::vector<double> norms = out;
  return detail::finish(
      OpKind::p_norm, {&a}, Tensor(v.reduced, std::move(out)),
      [v, p, av = std::move(av), norms = std::move(norms)](std::span<const double> g, GradSink& s) {
        auto ga = s.input(0);
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t i = 0; i < v.inner; ++i) {
            const double n = norms[o * v.inner + i];
            if (n == 0.0) continue;
            const double up = g[o * v.inner + i];
            for (std::size_t e = 0; e < v.extent; ++e) {
              const std::size_t k = (o * v.extent + e) * v.inner + i;
              const double x = av[k];
              const double sign = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
              const double d = p == 1.0 ? sign : sign * std::pow(std::abs(x) / n, p - 1.0);
              ga[k] += up * d;
            }
          }
      });
}

// ---- row-wise ops for [B x K] matrices paired with a [B] vector --------------

inline Tensor mul_rows(const Tensor& a, const Tensor& s) {
  detail::check_rows(a, s, "mul_rows");
  const std::size_t k = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s[i / k];
  std::vector<double> av(a.values().begin(), a.values().end());
  std::vector<double> sv(s.values().begin(), s.values().end());
  return detail::finish(OpKind::mul_rows, {&a, &s}, Tensor(a.shape(), std::move(out)),
                        [k, av = std::move(av), sv = std::move(sv)](std::span<const double> g, GradSink& sink) {
                          if (sink.wants(0)) {
                            auto ga = sink.input(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv[i / k];
                          }
                          if (sink.wants(1)) {
                            auto gs = sink.input(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gs[i / k] += g[i] * av[i];
                          }
                        });
}

inline Tensor div_rows(const Tensor& a, const Tensor& s) {
  detail::check_rows(a, s, "div_rows");
  for (std::size_t r = 0; r < s.size(); ++r) {
    if (s[r] == 0.0) throw DomainError("div_rows: zero divisor at row " + std::to_string(r));
  }
  const std::size_t k = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / s[i / k];
  std::vector<double> sv(s.values().begin(), s.values().end());
  std::vector<double> saved = out;
  return detail::finish(OpKind::div_rows, {&a, &s}, Tensor(a.shape(), std::move(out)),
                        [k, sv = std::move(sv), saved = std::move(saved)](std::span<const double> g, GradSink& sink) {
                          if (sink.wants(0)) {
                            auto ga = sink.input(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / sv[i / k];
                          }
                          if (sink.wants(1)) {
                            auto gs = sink.input(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gs[i / k] -= g[i] * saved[i] / sv[i / k];
                          }
                        });
}

inline Tensor sub_rows(const Tensor& a, const Tensor& s) {
  detail::check_rows(a, s, "sub_rows");
  const std::size_t k = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - s[i / k];
  return detail::finish(OpKind::sub_rows, {&a, &s}, Tensor(a.shape(), std::move(out)),
                        [k](std::span<const double> g, GradSink& sink) {
                          if (sink.wants(0)) {
                            auto ga = sink.input(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (sink.wants(1)) {
                            auto gs = sink.input(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gs[i / k] -= g[i];
                          }
                        });
}

// Appends a [B] vector as an extra column of a [B x K] matrix.
inline Tensor concat_cols(const Tensor& a, const Tensor& col) {
  detail::check_rows(a, col, "concat_cols");
  const std::size_t b = a.rows(), k = a.cols();
  std::vector<double> out(b * (k + 1));
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < k; ++c) out[r * (k + 1) + c] = a[r * k + c];
    out[r * (k + 1) + k] = col[r];
  }
  return detail::finish(OpKind::concat_cols, {&a, &col}, Tensor(Shape{b, k + 1}, std::move(out)),
                        [b, k](std::span<const double> g, GradSink& sink) {
                          for (std::size_t r = 0; r < b; ++r) {
                            if (sink.wants(0)) {
                              auto ga = sink.input(0);
                              for (std::size_t c = 0; c < k; ++c) ga[r * k + c] += g[r * (k + 1) + c];
                            }
                            if (sink.wants(1)) sink.input(1)[r] += g[r * (k + 1) + k];
                          }
                        });
}

// out[r] = a[r, index[r]]
inline Tensor gather(const Tensor& a, std::span<const std::size_t> index) {
  if (a.rank() != 2 || index.size() != a.rows()) {
    throw ShapeError("gather: expected one index per row of " + to_string(a.shape()));
  }
  const std::size_t k = a.cols();
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= k) {
      throw std::out_of_range("gather: index " + std::to_string(idx[r]) + " at row " + std::to_string(r) +
                              " outside [0, " + std::to_string(k) + ")");
    }
    out[r] = a[r * k + idx[r]];
  }
  Tensor result(Shape{idx.size()}, std::move(out));
  return detail::finish(OpKind::gather, {&a}, std::move(result),
                        [k, idx = std::move(idx)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t r = 0; r < idx.size(); ++r) ga[r * k + idx[r]] += g[r];
                        });
}

// Selects whole rows of a [B x K] matrix.
inline Tensor take_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() != 2) throw ShapeError("take_rows: expected a matrix, got " + to_string(a.shape()));
  const std::size_t k = a.cols();
  std::vector<std::size_t> sel(rows.begin(), rows.end());
  std::vector<double> out;
  out.reserve(sel.size() * k);
  for (std::size_t r : sel) {
    if (r >= a.rows()) throw std::out_of_range("take_rows: row " + std::to_string(r) + " out of range");
    auto src = a.row(r);
    out.insert(out.end(), src.begin(), src.end());
  }
  Tensor result(Shape{sel.size(), k}, std::move(out));
  return detail::finish(OpKind::take_rows, {&a}, std::move(result),
                        [k, sel = std::move(sel)](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < sel.size(); ++i)
                            for (std::size_t c = 0; c < k; ++c) ga[sel[i] * k + c] += g[i * k + c];
                        });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return detail::finish(OpKind::reshape, {&a},
                        Tensor(std::move(shape), std::vector<double>(a.values().begin(), a.values().end())),
                        [](std::span<const double> g, GradSink& s) {
                          auto ga = s.input(0);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        });
}

// f - logsumexp(f) along the last axis of a [B x K] matrix.
inline Tensor log_softmax_rows(const Tensor& a) { return sub_rows(a, logsumexp(a, 1)); }

}  // namespace come
