#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "molhf/error.hpp"

namespace molhf {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Value type; copies are deep.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_))
      throw Error(ErrorCode::ShapeMismatch,
                  "data length " + std::to_string(data_.size()) + " vs shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  const T& at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  T& at(int c, int i, int j) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
  }
  const T& at(int c, int i, int j) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
  }

  T item() const {
    if (data_.size() != 1) throw Error(ErrorCode::NonScalarOutput, "item() on " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw Error(ErrorCode::ShapeMismatch, "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

  T max_abs() const {
    T m = 0;
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  Tensor& operator+=(const Tensor& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator-=(const Tensor& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }

  bool operator==(const Tensor& o) const = default;

  void require_same(const Tensor& o) const {
    if (shape_ != o.shape_)
      throw Error(ErrorCode::ShapeMismatch, shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

 private:
  void check_shape() const {
    for (int d : shape_)
      if (d <= 0) throw Error(ErrorCode::ShapeMismatch, "non-positive extent in " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

/// ∞-norm distance between two equally shaped tensors.
template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same(b);
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// C = A·B for row-major matrices given by raw spans (m×k times k×n).
template <class T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, T(0));
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C (m×n) += Aᵀ·B where A is k×m and B is k×n.
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * m;
    const T* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C (m×n) += A·Bᵀ where A is m×k and B is n×k.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw Error(ErrorCode::ShapeMismatch, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  gemm(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "transpose needs rank 2");
  Tensor<T> t({a.dim(1), a.dim(0)});
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

template <class T>
Tensor<T> identity(int n) {
  Tensor<T> eye({n, n});
  for (int i = 0; i < n; ++i) eye.at(i, i) = 1;
  return eye;
}

/// LU factorization with partial pivoting, packed in place.
template <class T>
struct LuFactors {
  Tensor<T> lu;             // unit-lower L below the diagonal, U on and above
  std::vector<int> perm;    // row i of PA is row perm[i] of A
  int sign = 1;             // sign of the permutation

  static LuFactors factor(const Tensor<T>& a) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1))
      throw Error(ErrorCode::ShapeMismatch, "LU needs a square matrix");
    const int n = a.dim(0);
    LuFactors f{a, std::vector<int>(static_cast<std::size_t>(n)), 1};
    std::iota(f.perm.begin(), f.perm.end(), 0);
    Tensor<T>& m = f.lu;
    for (int col = 0; col < n; ++col) {
      int piv = col;
      for (int r = col + 1; r < n; ++r)
        if (std::abs(m.at(r, col)) > std::abs(m.at(piv, col))) piv = r;
      if (piv != col) {
        for (int j = 0; j < n; ++j) std::swap(m.at(piv, j), m.at(col, j));
        std::swap(f.perm[static_cast<std::size_t>(piv)], f.perm[static_cast<std::size_t>(col)]);
        f.sign = -f.sign;
      }
      const T d = m.at(col, col);
      if (d == T(0)) continue;
      for (int r = col + 1; r < n; ++r) {
        const T factor = m.at(r, col) / d;
        m.at(r, col) = factor;
        for (int j = col + 1; j < n; ++j) m.at(r, j) -= factor * m.at(col, j);
      }
    }
    return f;
  }

  /// log|det A|; -inf when singular.
  T log_abs_det() const {
    T acc = 0;
    for (int i = 0; i < lu.dim(0); ++i) acc += std::log(std::abs(lu.at(i, i)));
    return acc;
  }

  T min_abs_pivot() const {
    T m = std::abs(lu.at(0, 0));
    for (int i = 1; i < lu.dim(0); ++i) m = std::min(m, std::abs(lu.at(i, i)));
    return m;
  }

  /// Solves A·x = b for every column of b (n×m).
  Tensor<T> solve(const Tensor<T>& b) const {
    const int n = lu.dim(0);
    const int m = b.rank() == 1 ? 1 : b.dim(1);
    Tensor<T> x({n, m});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) x.at(i, j) = b[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]) * m + j];
    for (int j = 0; j < m; ++j) {
      for (int i = 0; i < n; ++i) {
        T acc = x.at(i, j);
        for (int p = 0; p < i; ++p) acc -= lu.at(i, p) * x.at(p, j);
        x.at(i, j) = acc;
      }
      for (int i = n - 1; i >= 0; --i) {
        T acc = x.at(i, j);
        for (int p = i + 1; p < n; ++p) acc -= lu.at(i, p) * x.at(p, j);
        x.at(i, j) = acc / lu.at(i, i);
      }
    }
    return x;
  }
};

template <class T>
Tensor<T> inverse(const Tensor<T>& a) {
  return LuFactors<T>::factor(a).solve(identity<T>(a.dim(0)));
}

}  // namespace molhf
