#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "molhf/autodiff.hpp"
#include "molhf/numerics.hpp"
#include "molhf/rng.hpp"
#include "molhf/tensor.hpp"

namespace molhf {

/// A layer output with its running log-determinant.
template <class T>
struct LayerIO {
  Var<T> value;
  Var<T> logdet;
};

template <class T>
Var<T> zero_scalar(Tape<T>& tape) {
  return tape.constant(Tensor<T>::scalar(T(0)));
}

template <class T>
void fill_normal(Tensor<T>& t, Rng& rng, T stddev) {
  for (auto& v : t.storage()) v = static_cast<T>(rng.normal()) * stddev;
}

/// r(u) = 2·sigmoid(swish(u)); r(0) = 1 and the range is bounded above by 2.
template <class T>
T rescale_r(T u) {
  return T(2) * ad::detail::sigmoid(u * ad::detail::sigmoid(u));
}

template <class T>
Var<T> rescale_r(Var<T> u) {
  return ad::scale(ad::sigmoid(ad::swish(u)), T(2));
}

/// Coupling network: conditioned half -> (s, t), both shaped like the other half.
template <class T>
using CouplingNet = std::function<std::pair<Var<T>, Var<T>>(Var<T>)>;

namespace detail {

inline void require_even(int extent, const char* what) {
  if (extent % 2 != 0) throw Error(ErrorCode::OddSplitAxis, std::string(what) + ": odd extent " + std::to_string(extent));
}

}  // namespace detail

/// y_cond = x_cond; y_other = x_other ⊙ r(s(x_cond)) + t(x_cond).
/// `swap` = false conditions on the first half along `axis`.
template <class T>
LayerIO<T> affine_coupling_forward(Var<T> x, int axis, bool swap, const CouplingNet<T>& net) {
  const int e = x.dim(axis);
  detail::require_even(e, "affine coupling");
  const int h = e / 2;
  Var<T> first = ad::slice(x, axis, 0, h);
  Var<T> second = ad::slice(x, axis, h, e);
  Var<T> cond = swap ? second : first;
  Var<T> other = swap ? first : second;
  auto [s, t] = net(cond);
  other.value().require_same(s.value());
  other.value().require_same(t.value());
  Var<T> r = rescale_r(s);
  for (T v : r.value().values())
    if (!(v >= T(1e-7))) throw Error(ErrorCode::ZeroScale, "rescale output below 1e-7");
  Var<T> y_other = ad::add(ad::mul(other, r), t);
  Var<T> y = swap ? ad::concat<T>({y_other, cond}, axis) : ad::concat<T>({cond, y_other}, axis);
  return {y, ad::sum(ad::log(r))};
}

template <class T>
Var<T> affine_coupling_inverse(Var<T> y, int axis, bool swap, const CouplingNet<T>& net) {
  const int e = y.dim(axis);
  detail::require_even(e, "affine coupling");
  const int h = e / 2;
  Var<T> first = ad::slice(y, axis, 0, h);
  Var<T> second = ad::slice(y, axis, h, e);
  Var<T> cond = swap ? second : first;
  Var<T> y_other = swap ? first : second;
  auto [s, t] = net(cond);
  Var<T> r = rescale_r(s);
  for (T v : r.value().values())
    if (!(v >= T(1e-7))) throw Error(ErrorCode::ZeroScale, "rescale output below 1e-7");
  Var<T> x_other = ad::div(ad::sub(y_other, t), r);
  return swap ? ad::concat<T>({x_other, cond}, axis) : ad::concat<T>({cond, x_other}, axis);
}

/// Per-channel affine normalization y = (x + bias)·exp(logs), data-initialized
/// so the first batch is zero-mean, unit-variance per channel. With axis = 1
/// on an n×d matrix this is the feature-wise (2D) variant.
template <class T>
class ActNorm {
 public:
  ActNorm(ParameterSet<T>& ps, const std::string& name, int channels, int axis)
      : name_(name),
        axis_(axis),
        bias_(&ps.add(name + ".bias", Tensor<T>({channels}))),
        logs_(&ps.add(name + ".logs", Tensor<T>({channels}))),
        init_flag_(&ps.add(name + ".initialized", Tensor<T>({1}), false)) {}

  LayerIO<T> forward(Var<T> x) const {
    if (capture_) capture_->push_back(x.value());
    Tape<T>& tape = *x.tape;
    Var<T> logs = tape.param(*logs_);
    Var<T> y = ad::mul_channel(ad::add_bias(x, tape.param(*bias_), axis_), ad::exp(logs), axis_);
    const T count = static_cast<T>(x.value().size() / logs_->value.size());
    return {y, ad::scale(ad::sum(logs), count)};
  }

  Var<T> inverse(Var<T> y) const {
    Tape<T>& tape = *y.tape;
    Var<T> neg_bias = ad::scale(tape.param(*bias_), T(-1));
    Var<T> inv_scale = ad::exp(ad::scale(tape.param(*logs_), T(-1)));
    return ad::add_bias(ad::mul_channel(y, inv_scale, axis_), neg_bias, axis_);
  }

  /// Sets bias = −mean and logs = −log(std) from the per-channel statistics
  /// of `batch` (pooled over samples and non-channel positions).
  void initialize(const std::vector<Tensor<T>>& batch) {
    const std::size_t ch = bias_->value.size();
    std::vector<double> sum(ch, 0.0), sq(ch, 0.0);
    double count = 0;
    for (const auto& x : batch) {
      ad::detail::AxisView av(x.shape(), axis_);
      if (av.extent != ch) throw Error(ErrorCode::ShapeMismatch, name_ + ": actnorm init batch channels");
      for (std::size_t o = 0; o < av.outer; ++o)
        for (std::size_t e = 0; e < av.extent; ++e)
          for (std::size_t i = 0; i < av.inner; ++i) {
            const double v = x[(o * av.extent + e) * av.inner + i];
            sum[e] += v;
            sq[e] += v * v;
          }
      count += static_cast<double>(av.outer * av.inner);
    }
    if (count == 0) throw Error(ErrorCode::EmptyBatch, name_ + ": empty actnorm init batch");
    for (std::size_t c = 0; c < ch; ++c) {
      const double mean = sum[c] / count;
      const double var = std::max(0.0, sq[c] / count - mean * mean);
      const double sd = std::sqrt(var);
      if (sd < 1e-6) throw Error(ErrorCode::ZeroStd, name_ + ": channel " + std::to_string(c) + " has std < 1e-6");
      bias_->value[c] = static_cast<T>(-mean);
      logs_->value[c] = static_cast<T>(-std::log(sd));
    }
    init_flag_->value[0] = 1;
  }

  bool initialized() const { return init_flag_->value[0] != T(0); }
  void set_capture(std::vector<Tensor<T>>* sink) { capture_ = sink; }
  const std::string& name() const { return name_; }
  Parameter<T>& bias() { return *bias_; }
  Parameter<T>& logs() { return *logs_; }

 private:
  std::string name_;
  int axis_;
  Parameter<T>* bias_;
  Parameter<T>* logs_;
  Parameter<T>* init_flag_;
  std::vector<Tensor<T>>* capture_ = nullptr;
};

/// Orthogonal matrix from Gram-Schmidt on a Gaussian draw.
template <class T>
Tensor<T> random_orthogonal(int c, Rng& rng) {
  for (;;) {
    Tensor<T> m({c, c});
    fill_normal(m, rng, T(1));
    bool ok = true;
    for (int i = 0; i < c && ok; ++i) {
      for (int p = 0; p < i; ++p) {
        T dot = 0;
        for (int k = 0; k < c; ++k) dot += m.at(i, k) * m.at(p, k);
        for (int k = 0; k < c; ++k) m.at(i, k) -= dot * m.at(p, k);
      }
      T norm = 0;
      for (int k = 0; k < c; ++k) norm += m.at(i, k) * m.at(i, k);
      norm = std::sqrt(norm);
      if (norm < T(1e-6)) ok = false;
      for (int k = 0; k < c; ++k) m.at(i, k) /= norm;
    }
    if (ok) return m;
  }
}

/// Invertible channel mixing W = P·L·(U + diag(sign·exp(log_s))). P and the
/// signs are fixed at construction; L, U and log_s train. On C×H×W tensors
/// (axis 0) this is a 1×1 convolution; on n×C matrices (axis 1) it maps
/// every row h to W·h.
template <class T>
class InvConvLU {
 public:
  InvConvLU(ParameterSet<T>& ps, const std::string& name, int channels, int axis, Rng& rng)
      : name_(name), axis_(axis), c_(channels) {
    if (axis != 0 && axis != 1) throw Error(ErrorCode::InvalidConfig, "InvConvLU axis must be 0 or 1");
    const Tensor<T> q = random_orthogonal<T>(channels, rng);
    const auto f = LuFactors<T>::factor(q);
    Tensor<T> lower({c_, c_}), upper({c_, c_}), log_s({c_}), sign({c_}), perm({c_});
    for (int i = 0; i < c_; ++i) {
      for (int j = 0; j < c_; ++j) {
        if (j < i) lower.at(i, j) = f.lu.at(i, j);
        if (j > i) upper.at(i, j) = f.lu.at(i, j);
      }
      const T d = f.lu.at(i, i);
      sign[static_cast<std::size_t>(i)] = d < 0 ? T(-1) : T(1);
      log_s[static_cast<std::size_t>(i)] = std::log(std::abs(d));
      perm[static_cast<std::size_t>(i)] = static_cast<T>(f.perm[static_cast<std::size_t>(i)]);
    }
    lower_ = &ps.add(name + ".lower", std::move(lower));
    upper_ = &ps.add(name + ".upper", std::move(upper));
    log_s_ = &ps.add(name + ".log_s", std::move(log_s));
    sign_ = &ps.add(name + ".sign", std::move(sign), false);
    perm_ = &ps.add(name + ".perm", std::move(perm), false);
  }

  /// Overwrites the factors (tests and hand-built examples).
  void set_factors(const std::vector<int>& perm, const Tensor<T>& lower, const Tensor<T>& upper,
                   const Tensor<T>& s) {
    for (int i = 0; i < c_; ++i) {
      perm_->value[static_cast<std::size_t>(i)] = static_cast<T>(perm[static_cast<std::size_t>(i)]);
      const T sv = s[static_cast<std::size_t>(i)];
      sign_->value[static_cast<std::size_t>(i)] = sv < 0 ? T(-1) : T(1);
      log_s_->value[static_cast<std::size_t>(i)] = std::log(std::abs(sv));
      for (int j = 0; j < c_; ++j) {
        lower_->value.at(i, j) = j < i ? lower.at(i, j) : T(0);
        upper_->value.at(i, j) = j > i ? upper.at(i, j) : T(0);
      }
    }
  }

  /// W composed on a tape (differentiable in L, U, log_s).
  Var<T> weight(Tape<T>& tape) const {
    Tensor<T> mask_l({c_, c_}), mask_u({c_, c_});
    for (int i = 0; i < c_; ++i)
      for (int j = 0; j < c_; ++j) {
        if (j < i) mask_l.at(i, j) = 1;
        if (j > i) mask_u.at(i, j) = 1;
      }
    Var<T> l = ad::add(ad::mul(tape.param(*lower_), tape.constant(std::move(mask_l))), tape.constant(identity<T>(c_)));
    Var<T> diag = ad::embed_diag(ad::mul(tape.param(*sign_), ad::exp(tape.param(*log_s_))));
    Var<T> u = ad::add(ad::mul(tape.param(*upper_), tape.constant(std::move(mask_u))), diag);
    return ad::matmul(tape.constant(permutation_matrix()), ad::matmul(l, u));
  }

  Tensor<T> weight_value() const {
    Tape<T> tape(false);
    return weight(tape).value();
  }

  LayerIO<T> forward(Var<T> x) const {
    Tape<T>& tape = *x.tape;
    Var<T> w = weight(tape);
    const T positions = static_cast<T>(x.value().size() / static_cast<std::size_t>(c_));
    Var<T> logdet = ad::scale(ad::sum(tape.param(*log_s_)), positions);
    return {apply(x, w), logdet};
  }

  Var<T> inverse(Var<T> y) const {
    Tape<T>& tape = *y.tape;
    return apply(y, tape.constant(molhf::inverse(weight_value())));
  }

  T logdet_per_position() const { return log_s_->value.sum(); }

 private:
  Var<T> apply(Var<T> x, Var<T> w) const {
    if (x.dim(axis_) != c_) throw Error(ErrorCode::ShapeMismatch, name_ + ": channel count");
    if (axis_ == 1) return ad::matmul(x, ad::transpose(w));
    Shape s = x.shape();
    Var<T> flat = ad::reshape(x, Shape{c_, static_cast<int>(x.value().size() / static_cast<std::size_t>(c_))});
    return ad::reshape(ad::matmul(w, flat), s);
  }

  Tensor<T> permutation_matrix() const {
    Tensor<T> p({c_, c_});
    for (int i = 0; i < c_; ++i) p.at(static_cast<int>(perm_->value[static_cast<std::size_t>(i)]), i) = 1;
    return p;
  }

  std::string name_;
  int axis_;
  int c_;
  Parameter<T>* lower_;
  Parameter<T>* upper_;
  Parameter<T>* log_s_;
  Parameter<T>* sign_;
  Parameter<T>* perm_;
};

namespace detail {

/// Flat source index for every element of the squeezed tensor.
inline std::shared_ptr<const std::vector<std::size_t>> squeeze_index(int c, int h, int w) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(static_cast<std::size_t>(c) * h * w);
  const int h2 = h / 2, w2 = w / 2;
  for (int ch = 0; ch < c; ++ch)
    for (int sub = 0; sub < 4; ++sub)
      for (int y = 0; y < h2; ++y)
        for (int x = 0; x < w2; ++x) {
          const int sy = 2 * y + sub / 2, sx = 2 * x + sub % 2;
          idx->push_back((static_cast<std::size_t>(ch) * h + sy) * w + sx);
        }
  return idx;
}

}  // namespace detail

/// Space-to-depth by 2: C×H×W -> 4C×(H/2)×(W/2). Sub-pixels are ordered
/// top-left, top-right, bottom-left, bottom-right within each channel.
template <class T>
Var<T> squeeze(Var<T> x) {
  if (x.value().rank() != 3) throw Error(ErrorCode::ShapeMismatch, "squeeze needs C×H×W");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw Error(ErrorCode::OddSpatialDim, "squeeze of " + shape_str(x.shape()));
  return ad::gather(x, detail::squeeze_index(c, h, w), Shape{4 * c, h / 2, w / 2});
}

template <class T>
Var<T> unsqueeze(Var<T> y) {
  if (y.value().rank() != 3 || y.dim(0) % 4) throw Error(ErrorCode::ShapeMismatch, "unsqueeze of " + shape_str(y.shape()));
  const int c = y.dim(0) / 4, h = y.dim(1) * 2, w = y.dim(2) * 2;
  const auto fwd = detail::squeeze_index(c, h, w);
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
  return ad::gather(y, std::shared_ptr<const std::vector<std::size_t>>(std::move(inv)), Shape{c, h, w});
}

template <class T>
struct SplitOutput {
  Var<T> keep;
  Var<T> z;
  Var<T> logp;
};

/// Conditional Gaussian prior for the half of h that leaves the flow:
/// z = first half along `axis`, scored under N(μ(keep), diag exp(logsd(keep))²)
/// where (μ, logsd) come from a zero-initialized map of the kept half. Image
/// tensors use a 3×3 convolution, node-feature matrices a per-node linear map.
template <class T>
class SplitPrior {
 public:
  enum class Kind { Linear, Conv3x3 };

  SplitPrior(ParameterSet<T>& ps, const std::string& name, int channels, Kind kind)
      : kind_(kind), channels_(channels) {
    detail::require_even(channels, "split prior");
    const int half = channels / 2;
    if (kind == Kind::Linear)
      weight_ = &ps.add(name + ".weight", Tensor<T>({half, channels}));
    else
      weight_ = &ps.add(name + ".weight", Tensor<T>({channels, half, 3, 3}));
    bias_ = &ps.add(name + ".bias", Tensor<T>({channels}));
  }

  int axis() const { return kind_ == Kind::Linear ? 1 : 0; }

  /// (μ, logsd) for the z half given the kept half.
  std::pair<Var<T>, Var<T>> prior(Var<T> keep) const {
    Tape<T>& tape = *keep.tape;
    Var<T> out = kind_ == Kind::Linear
                     ? ad::add_bias(ad::matmul(keep, tape.param(*weight_)), tape.param(*bias_), 1)
                     : ad::conv2d_3x3(keep, tape.param(*weight_), tape.param(*bias_));
    const int half = channels_ / 2;
    return {ad::slice(out, axis(), 0, half), ad::slice(out, axis(), half, channels_)};
  }

  SplitOutput<T> forward(Var<T> h) const {
    const int e = h.dim(axis());
    detail::require_even(e, "split");
    if (e != channels_) throw Error(ErrorCode::ShapeMismatch, "split prior channel count");
    Var<T> z = ad::slice(h, axis(), 0, e / 2);
    Var<T> keep = ad::slice(h, axis(), e / 2, e);
    auto [mu, logsd] = prior(keep);
    return {keep, z, ad::gaussian_logp(z, mu, logsd)};
  }

  /// Rebuilds h from the kept half and either a recorded z or a draw at
  /// temperature t.
  Var<T> inverse(Var<T> keep, const std::optional<Tensor<T>>& z, T temperature, Rng* rng) const {
    Tape<T>& tape = *keep.tape;
    Var<T> zv;
    if (z) {
      zv = tape.constant(*z);
    } else {
      auto [mu, logsd] = prior(keep);
      if (!rng) throw Error(ErrorCode::InvalidConfig, "sampling needs an rng");
      zv = tape.constant(sample_gaussian(mu.shape(), mu.value(), logsd.value(), temperature, *rng));
    }
    return ad::concat<T>({zv, keep}, axis());
  }

  /// Same as inverse() but also reports the z actually used.
  std::pair<Var<T>, Tensor<T>> inverse_with_z(Var<T> keep, const std::optional<Tensor<T>>& z, T temperature,
                                             Rng* rng) const {
    Var<T> h = inverse(keep, z, temperature, rng);
    return {h, ad::slice(h, axis(), 0, channels_ / 2).value()};
  }

 private:
  Kind kind_;
  int channels_;
  Parameter<T>* weight_;
  Parameter<T>* bias_;
};

/// log N(z; 0, σ²I) with σ = exp(log_sigma).
template <class T>
Var<T> isotropic_logp(Var<T> z, Var<T> log_sigma) {
  Tape<T>& tape = *z.tape;
  return ad::gaussian_logp(z, tape.constant(Tensor<T>(z.shape())), ad::expand_scalar(log_sigma, z.shape()));
}

/// Throws NonFinite naming `where` if any entry is NaN/Inf.
template <class T>
void require_finite(const Var<T>& v, const std::string& where) {
  if (!v.value().all_finite()) throw Error(ErrorCode::NonFinite, "non-finite output at " + where);
}

}  // namespace molhf
