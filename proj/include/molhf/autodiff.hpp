#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "molhf/error.hpp"
#include "molhf/rng.hpp"
#include "molhf/tensor.hpp"

namespace molhf {

/// A named trainable (or frozen buffer) tensor with a gradient slot.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Owns parameters in registration order; addresses are stable.
template <class T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> init, bool trainable = true) {
    for (const auto& p : params_)
      if (p->name == name) throw Error(ErrorCode::InvalidConfig, "duplicate parameter " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->grad = Tensor<T>(init.shape());
    p->value = std::move(init);
    p->trainable = trainable;
    params_.push_back(std::move(p));
    return *params_.back();
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T(0));
  }

  std::size_t scalar_count(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p->trainable || !trainable_only) n += p->value.size();
    return n;
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <class T>
class Tape;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  Node<T>* node = nullptr;

  const Tensor<T>& value() const { return node->value; }
  const Shape& shape() const { return node->value.shape(); }
  int dim(int axis) const { return node->value.dim(axis); }
  bool requires_grad() const { return node->requires_grad; }
  Tensor<T>& grad_buffer() const { return node->grad_buffer(); }
};

/// Ordered record of primitive applications. Nodes are appended in
/// topological order, so the backward sweep is a reverse walk.
template <class T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }

  /// Differentiable input whose gradient is read back with grad().
  Var<T> leaf(Tensor<T> v) { return push(std::move(v), recording_, {}); }

  Var<T> param(Parameter<T>& p) {
    const bool rg = recording_ && p.trainable;
    Parameter<T>* pp = &p;
    return push(p.value, rg, [pp](Node<T>& self) { pp->grad += self.grad; });
  }

  template <class Fn>
  Var<T> make(Tensor<T> value, std::initializer_list<Var<T>> parents, Fn&& fn) {
    bool rg = false;
    if (recording_)
      for (const auto& p : parents) rg = rg || p.requires_grad();
    if (!rg) return push(std::move(value), false, {});
    return push(std::move(value), true, std::function<void(Node<T>&)>(std::forward<Fn>(fn)));
  }

  template <class Fn>
  Var<T> make_n(Tensor<T> value, const std::vector<Var<T>>& parents, Fn&& fn) {
    bool rg = false;
    if (recording_)
      for (const auto& p : parents) rg = rg || p.requires_grad();
    if (!rg) return push(std::move(value), false, {});
    return push(std::move(value), true, std::function<void(Node<T>&)>(std::forward<Fn>(fn)));
  }

  /// Reverse sweep from a scalar output.
  void backward(Var<T> out, T seed = T(1)) {
    if (out.value().size() != 1)
      throw Error(ErrorCode::NonScalarOutput, "backward from " + shape_str(out.shape()));
    if (!out.requires_grad()) return;
    out.grad_buffer()[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(n);
    }
  }

  Tensor<T> grad(Var<T> v) const {
    return v.node->grad.empty() ? Tensor<T>(v.shape()) : v.node->grad;
  }

 private:
  Var<T> push(Tensor<T> v, bool rg, std::function<void(Node<T>&)> fn) {
    auto n = std::make_unique<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = rg;
    n->backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.back().get()};
  }

  bool recording_;
  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

/// Differentiable primitives. Every op checks shapes and throws ShapeMismatch.
namespace ad {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

/// (outer, extent, inner) decomposition of a row-major shape around an axis.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
  AxisView(const Shape& s, int axis) {
    require(axis >= 0 && axis < static_cast<int>(s.size()), "axis out of range");
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
    extent = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
      inner *= static_cast<std::size_t>(s[i]);
  }
};

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  a.value().require_same(b.value());
  return a.tape->make(a.value() + b.value(), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.grad_buffer() += self.grad;
    if (b.requires_grad()) b.grad_buffer() += self.grad;
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  a.value().require_same(b.value());
  return a.tape->make(a.value() - b.value(), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.grad_buffer() += self.grad;
    if (b.requires_grad()) b.grad_buffer() -= self.grad;
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  a.value().require_same(b.value());
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->make(std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) {
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value()[i];
    }
  });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  a.value().require_same(b.value());
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return a.tape->make(std::move(out), {a, b}, [a, b](Node<T>& self) {
    const auto& bv = b.value();
    if (a.requires_grad()) {
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / bv[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  return a.tape->make(a.value() * s, {a}, [a, s](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v += s;
  return a.tape->make(std::move(out), {a}, [a](Node<T>& self) { a.grad_buffer() += self.grad; });
}

template <class T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = std::exp(v);
  return a.tape->make(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

template <class T>
Var<T> log(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = std::log(v);
  return a.tape->make(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / a.value()[i];
  });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = detail::sigmoid(v);
  return a.tape->make(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

/// x·sigmoid(x)
template <class T>
Var<T> swish(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v * detail::sigmoid(v);
  return a.tape->make(std::move(out), {a}, [a](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = a.value()[i];
      const T s = detail::sigmoid(x);
      g[i] += self.grad[i] * (s + x * s * (T(1) - s));
    }
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  return a.tape->make(Tensor<T>::scalar(a.value().sum()), {a}, [a](Node<T>& self) {
    auto& g = a.grad_buffer();
    const T d = self.grad[0];
    for (auto& v : g.storage()) v += d;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  return a.tape->make(molhf::matmul(a.value(), b.value()), {a, b}, [a, b](Node<T>& self) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (a.requires_grad()) gemm_nt(self.grad.data(), b.value().data(), a.grad_buffer().data(), m, n, k);
    if (b.requires_grad()) gemm_tn(a.value().data(), self.grad.data(), b.grad_buffer().data(), k, m, n);
  });
}

/// Batched matmul: (B×m×k)·(B×k×n).
template <class T>
Var<T> bmm(Var<T> a, Var<T> b) {
  detail::require(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0) &&
                      a.dim(2) == b.dim(1),
                  "bmm " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out({batch, m, n});
  for (int i = 0; i < batch; ++i)
    gemm(a.value().data() + static_cast<std::size_t>(i) * m * k, b.value().data() + static_cast<std::size_t>(i) * k * n,
         out.data() + static_cast<std::size_t>(i) * m * n, m, k, n);
  return a.tape->make(std::move(out), {a, b}, [a, b, batch, m, k, n](Node<T>& self) {
    for (int i = 0; i < batch; ++i) {
      const T* go = self.grad.data() + static_cast<std::size_t>(i) * m * n;
      if (a.requires_grad())
        gemm_nt(go, b.value().data() + static_cast<std::size_t>(i) * k * n,
                a.grad_buffer().data() + static_cast<std::size_t>(i) * m * k, m, n, k);
      if (b.requires_grad())
        gemm_tn(a.value().data() + static_cast<std::size_t>(i) * m * k, go,
                b.grad_buffer().data() + static_cast<std::size_t>(i) * k * n, k, m, n);
    }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  detail::require(a.value().rank() == 2, "transpose needs rank 2");
  return a.tape->make(molhf::transpose(a.value()), {a}, [a](Node<T>& self) {
    a.grad_buffer() += molhf::transpose(self.grad);
  });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  return a.tape->make(a.value().reshaped(std::move(shape)), {a}, [a](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// out[i] = a[index[i]]; the backward pass scatters.
template <class T>
Var<T> gather(Var<T> a, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  detail::require(index->size() == shape_size(out_shape), "gather index/shape length");
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < index->size(); ++i) {
    detail::require((*index)[i] < a.value().size(), "gather index out of range");
    out[i] = a.value()[(*index)[i]];
  }
  return a.tape->make(std::move(out), {a}, [a, index](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += self.grad[i];
  });
}

template <class T>
Var<T> gather_rows(Var<T> a, const std::vector<int>& rows) {
  detail::require(a.value().rank() == 2, "gather_rows needs rank 2");
  const auto cols = static_cast<std::size_t>(a.dim(1));
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(rows.size() * cols);
  for (int r : rows) {
    detail::require(r >= 0 && r < a.dim(0), "gather_rows row out of range");
    for (std::size_t c = 0; c < cols; ++c) idx->push_back(static_cast<std::size_t>(r) * cols + c);
  }
  return gather(a, std::move(idx), Shape{static_cast<int>(rows.size()), a.dim(1)});
}

template <class T>
Var<T> slice(Var<T> a, int axis, int begin, int end) {
  detail::AxisView av(a.shape(), axis);
  detail::require(begin >= 0 && end <= static_cast<int>(av.extent) && begin < end, "slice bounds");
  Shape s = a.shape();
  s[static_cast<std::size_t>(axis)] = end - begin;
  Tensor<T> out(s);
  const std::size_t len = static_cast<std::size_t>(end - begin) * av.inner;
  for (std::size_t o = 0; o < av.outer; ++o) {
    const T* src = a.value().data() + (o * av.extent + static_cast<std::size_t>(begin)) * av.inner;
    std::copy(src, src + len, out.data() + o * len);
  }
  return a.tape->make(std::move(out), {a}, [a, av, begin, len](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t o = 0; o < av.outer; ++o) {
      T* dst = g.data() + (o * av.extent + static_cast<std::size_t>(begin)) * av.inner;
      const T* src = self.grad.data() + o * len;
      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  detail::require(!parts.empty(), "concat of nothing");
  Shape s = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    detail::require(ps.size() == s.size(), "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis) detail::require(ps[i] == s[i], "concat extent mismatch");
    total += ps[static_cast<std::size_t>(axis)];
  }
  s[static_cast<std::size_t>(axis)] = total;
  detail::AxisView av(s, axis);
  Tensor<T> out(s);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = static_cast<std::size_t>(p.dim(axis)) * av.inner;
    offsets.push_back(off);
    for (std::size_t o = 0; o < av.outer; ++o) {
      const T* src = p.value().data() + o * len;
      std::copy(src, src + len, out.data() + o * av.extent * av.inner + off);
    }
    off += len;
  }
  return parts[0].tape->make_n(std::move(out), parts, [parts, offsets, av, axis](Node<T>& self) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto& p = parts[k];
      if (!p.requires_grad()) continue;
      const std::size_t len = static_cast<std::size_t>(p.dim(axis)) * av.inner;
      auto& g = p.grad_buffer();
      for (std::size_t o = 0; o < av.outer; ++o) {
        const T* src = self.grad.data() + o * av.extent * av.inner + offsets[k];
        T* dst = g.data() + o * len;
        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
      }
    }
  });
}

template <class T>
Var<T> softmax(Var<T> a, int axis) {
  detail::AxisView av(a.shape(), axis);
  Tensor<T> out = a.value();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t in = 0; in < av.inner; ++in) {
      T* base = out.data() + o * av.extent * av.inner + in;
      T mx = base[0];
      for (std::size_t e = 1; e < av.extent; ++e) mx = std::max(mx, base[e * av.inner]);
      T z = 0;
      for (std::size_t e = 0; e < av.extent; ++e) {
        base[e * av.inner] = std::exp(base[e * av.inner] - mx);
        z += base[e * av.inner];
      }
      for (std::size_t e = 0; e < av.extent; ++e) base[e * av.inner] /= z;
    }
  return a.tape->make(std::move(out), {a}, [a, av](Node<T>& self) {
    auto& g = a.grad_buffer();
    for (std::size_t o = 0; o < av.outer; ++o)
      for (std::size_t in = 0; in < av.inner; ++in) {
        const std::size_t base = o * av.extent * av.inner + in;
        T dot = 0;
        for (std::size_t e = 0; e < av.extent; ++e)
          dot += self.value[base + e * av.inner] * self.grad[base + e * av.inner];
        for (std::size_t e = 0; e < av.extent; ++e) {
          const std::size_t i = base + e * av.inner;
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
  });
}

/// Adds bias[c] to every element whose index along `axis` is c.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias, int axis) {
  detail::AxisView av(a.shape(), axis);
  detail::require(bias.value().size() == av.extent, "bias length " + shape_str(bias.shape()));
  Tensor<T> out = a.value();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t e = 0; e < av.extent; ++e) {
      T* p = out.data() + (o * av.extent + e) * av.inner;
      const T b = bias.value()[e];
      for (std::size_t i = 0; i < av.inner; ++i) p[i] += b;
    }
  return a.tape->make(std::move(out), {a, bias}, [a, bias, av](Node<T>& self) {
    if (a.requires_grad()) a.grad_buffer() += self.grad;
    if (bias.requires_grad()) {
      auto& g = bias.grad_buffer();
      for (std::size_t o = 0; o < av.outer; ++o)
        for (std::size_t e = 0; e < av.extent; ++e) {
          const T* p = self.grad.data() + (o * av.extent + e) * av.inner;
          T acc = 0;
          for (std::size_t i = 0; i < av.inner; ++i) acc += p[i];
          g[e] += acc;
        }
    }
  });
}

/// Multiplies every element whose index along `axis` is c by v[c].
template <class T>
Var<T> mul_channel(Var<T> a, Var<T> v, int axis) {
  detail::AxisView av(a.shape(), axis);
  detail::require(v.value().size() == av.extent, "channel vector length " + shape_str(v.shape()));
  Tensor<T> out = a.value();
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t e = 0; e < av.extent; ++e) {
      T* p = out.data() + (o * av.extent + e) * av.inner;
      const T s = v.value()[e];
      for (std::size_t i = 0; i < av.inner; ++i) p[i] *= s;
    }
  return a.tape->make(std::move(out), {a, v}, [a, v, av](Node<T>& self) {
    for (std::size_t o = 0; o < av.outer; ++o)
      for (std::size_t e = 0; e < av.extent; ++e) {
        const std::size_t base = (o * av.extent + e) * av.inner;
        if (a.requires_grad()) {
          auto& g = a.grad_buffer();
          const T s = v.value()[e];
          for (std::size_t i = 0; i < av.inner; ++i) g[base + i] += self.grad[base + i] * s;
        }
        if (v.requires_grad()) {
          T acc = 0;
          for (std::size_t i = 0; i < av.inner; ++i) acc += self.grad[base + i] * a.value()[base + i];
          v.grad_buffer()[e] += acc;
        }
      }
  });
}

/// Broadcasts a one-element tensor to `shape`.
template <class T>
Var<T> expand_scalar(Var<T> s, Shape shape) {
  detail::require(s.value().size() == 1, "expand_scalar needs one element");
  Tensor<T> out(std::move(shape), s.value()[0]);
  return s.tape->make(std::move(out), {s}, [s](Node<T>& self) { s.grad_buffer()[0] += self.grad.sum(); });
}

/// Square matrix with v on the diagonal.
template <class T>
Var<T> embed_diag(Var<T> v) {
  const int n = static_cast<int>(v.value().size());
  Tensor<T> out({n, n});
  for (int i = 0; i < n; ++i) out.at(i, i) = v.value()[static_cast<std::size_t>(i)];
  return v.tape->make(std::move(out), {v}, [v, n](Node<T>& self) {
    auto& g = v.grad_buffer();
    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] += self.grad.at(i, i);
  });
}

/// 3×3 convolution, stride 1, zero padding 1. x: Cin×H×W, w: Cout×Cin×3×3, b: Cout.
template <class T>
Var<T> conv2d_3x3(Var<T> x, Var<T> w, Var<T> b) {
  detail::require(x.value().rank() == 3, "conv2d input must be C×H×W");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  detail::require(w.value().rank() == 4 && w.dim(1) == cin && w.dim(2) == 3 && w.dim(3) == 3,
                  "conv2d weight " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  const int cout = w.dim(0);
  detail::require(b.value().size() == static_cast<std::size_t>(cout), "conv2d bias length");
  const int hw = h * wd, kdim = cin * 9;
  auto cols = std::make_shared<Tensor<T>>(Shape{kdim, hw});
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols->data() + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < wd; ++xx) {
            const int sx = xx + kx - 1;
            if (sx >= 0 && sx < wd) row[y * wd + xx] = x.value().at(c, sy, sx);
          }
        }
      }
  Tensor<T> out({cout, h, wd});
  gemm(w.value().data(), cols->data(), out.data(), cout, kdim, hw);
  for (int o = 0; o < cout; ++o) {
    T* p = out.data() + static_cast<std::size_t>(o) * hw;
    const T bv = b.value()[static_cast<std::size_t>(o)];
    for (int i = 0; i < hw; ++i) p[i] += bv;
  }
  return x.tape->make(std::move(out), {x, w, b}, [x, w, b, cols, cin, h, wd, cout, hw, kdim](Node<T>& self) {
    if (w.requires_grad()) gemm_nt(self.grad.data(), cols->data(), w.grad_buffer().data(), cout, hw, kdim);
    if (b.requires_grad()) {
      auto& g = b.grad_buffer();
      for (int o = 0; o < cout; ++o) {
        const T* p = self.grad.data() + static_cast<std::size_t>(o) * hw;
        T acc = 0;
        for (int i = 0; i < hw; ++i) acc += p[i];
        g[static_cast<std::size_t>(o)] += acc;
      }
    }
    if (x.requires_grad()) {
      Tensor<T> dcols({kdim, hw});
      gemm_tn(w.value().data(), self.grad.data(), dcols.data(), kdim, cout, hw);
      auto& g = x.grad_buffer();
      for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const T* row = dcols.data() + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * hw;
            for (int y = 0; y < h; ++y) {
              const int sy = y + ky - 1;
              if (sy < 0 || sy >= h) continue;
              for (int xx = 0; xx < wd; ++xx) {
                const int sx = xx + kx - 1;
                if (sx >= 0 && sx < wd) g.at(c, sy, sx) += row[y * wd + xx];
              }
            }
          }
    }
  });
}

/// 1×1 convolution: per-position linear map over channels. w: Cout×Cin.
template <class T>
Var<T> conv1x1(Var<T> x, Var<T> w, Var<T> b) {
  detail::require(x.value().rank() == 3 && w.value().rank() == 2 && w.dim(1) == x.dim(0),
                  "conv1x1 weight " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  const int h = x.dim(1), wd = x.dim(2);
  auto flat = reshape(x, Shape{x.dim(0), h * wd});
  auto y = add_bias(matmul(w, flat), b, 0);
  return reshape(y, Shape{w.dim(0), h, wd});
}

/// Criss-cross attention weights for every pixel: (2N−1)×N×N. Slot m < N is
/// row position (i, m); slot N+r walks column j over rows i' ≠ i ascending.
template <class T>
Tensor<T> criss_cross_weights(const Tensor<T>& q, const Tensor<T>& k) {
  const int cq = q.dim(0), n = q.dim(1);
  const int slots = 2 * n - 1;
  Tensor<T> att({slots, n, n});
  std::vector<T> logit(static_cast<std::size_t>(slots));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      for (int m = 0; m < slots; ++m) {
        const int pi = m < n ? i : (m - n < i ? m - n : m - n + 1);
        const int pj = m < n ? m : j;
        T e = 0;
        for (int c = 0; c < cq; ++c) e += q.at(c, i, j) * k.at(c, pi, pj);
        logit[static_cast<std::size_t>(m)] = e;
      }
      T mx = logit[0];
      for (T v : logit) mx = std::max(mx, v);
      T z = 0;
      for (T& v : logit) {
        v = std::exp(v - mx);
        z += v;
      }
      for (int m = 0; m < slots; ++m) att.at(m, i, j) = logit[static_cast<std::size_t>(m)] / z;
    }
  return att;
}

/// Aggregates values over each pixel's row and column (2N−1 positions).
/// q, k: C'×N×N; v: C×N×N.
template <class T>
Var<T> criss_cross(Var<T> q, Var<T> k, Var<T> v) {
  detail::require(q.value().rank() == 3 && q.shape() == k.shape() && v.value().rank() == 3 &&
                      q.dim(1) == q.dim(2) && v.dim(1) == q.dim(1) && v.dim(2) == q.dim(2),
                  "criss_cross shapes " + shape_str(q.shape()) + " " + shape_str(k.shape()) + " " +
                      shape_str(v.shape()));
  const int n = q.dim(1), cv = v.dim(0), cq = q.dim(0);
  const int slots = 2 * n - 1;
  auto att = std::make_shared<Tensor<T>>(criss_cross_weights(q.value(), k.value()));
  auto pos = [n](int m, int i, int j) {
    const int pi = m < n ? i : (m - n < i ? m - n : m - n + 1);
    const int pj = m < n ? m : j;
    return std::pair<int, int>{pi, pj};
  };
  Tensor<T> out({cv, n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int m = 0; m < slots; ++m) {
        const T a = att->at(m, i, j);
        const auto [pi, pj] = pos(m, i, j);
        for (int c = 0; c < cv; ++c) out.at(c, i, j) += a * v.value().at(c, pi, pj);
      }
  return q.tape->make(std::move(out), {q, k, v}, [q, k, v, att, n, cv, cq, slots, pos](Node<T>& self) {
    std::vector<T> da(static_cast<std::size_t>(slots));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        T dot = 0;
        for (int m = 0; m < slots; ++m) {
          const auto [pi, pj] = pos(m, i, j);
          T acc = 0;
          for (int c = 0; c < cv; ++c) acc += self.grad.at(c, i, j) * v.value().at(c, pi, pj);
          da[static_cast<std::size_t>(m)] = acc;
          dot += acc * att->at(m, i, j);
          if (v.requires_grad()) {
            auto& gv = v.grad_buffer();
            const T a = att->at(m, i, j);
            for (int c = 0; c < cv; ++c) gv.at(c, pi, pj) += a * self.grad.at(c, i, j);
          }
        }
        for (int m = 0; m < slots; ++m) {
          const T de = att->at(m, i, j) * (da[static_cast<std::size_t>(m)] - dot);
          if (de == T(0)) continue;
          const auto [pi, pj] = pos(m, i, j);
          if (q.requires_grad()) {
            auto& gq = q.grad_buffer();
            for (int c = 0; c < cq; ++c) gq.at(c, i, j) += de * k.value().at(c, pi, pj);
          }
          if (k.requires_grad()) {
            auto& gk = k.grad_buffer();
            for (int c = 0; c < cq; ++c) gk.at(c, pi, pj) += de * q.value().at(c, i, j);
          }
        }
      }
  });
}

/// Σ [−½ln2π − log_std − ½((z−mean)/exp(log_std))²]
template <class T>
Var<T> gaussian_logp(Var<T> z, Var<T> mean, Var<T> log_std) {
  z.value().require_same(mean.value());
  z.value().require_same(log_std.value());
  const T half_log_2pi = T(0.5) * std::log(T(2) * std::numbers::pi_v<T>);
  T acc = 0;
  for (std::size_t i = 0; i < z.value().size(); ++i) {
    const T u = (z.value()[i] - mean.value()[i]) * std::exp(-log_std.value()[i]);
    acc += -half_log_2pi - log_std.value()[i] - T(0.5) * u * u;
  }
  return z.tape->make(Tensor<T>::scalar(acc), {z, mean, log_std}, [z, mean, log_std](Node<T>& self) {
    const T d = self.grad[0];
    for (std::size_t i = 0; i < z.value().size(); ++i) {
      const T inv = std::exp(-log_std.value()[i]);
      const T u = (z.value()[i] - mean.value()[i]) * inv;
      if (z.requires_grad()) z.grad_buffer()[i] -= d * u * inv;
      if (mean.requires_grad()) mean.grad_buffer()[i] += d * u * inv;
      if (log_std.requires_grad()) log_std.grad_buffer()[i] += d * (u * u - T(1));
    }
  });
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace ad

/// Names of the primitives with forward and reverse rules.
inline std::vector<std::string> primitive_set() {
  return {"add",    "sub",         "mul",          "div",       "scale",       "add_scalar",
          "exp",    "log",         "sigmoid",      "swish",     "sum",         "mean",
          "matmul", "bmm",         "transpose",    "reshape",   "gather",      "gather_rows",
          "slice",  "concat",      "softmax",      "add_bias",  "mul_channel", "expand_scalar",
          "embed_diag", "conv2d_3x3", "conv1x1",   "criss_cross", "gaussian_logp"};
}

}  // namespace molhf
