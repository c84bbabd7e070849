#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "molhf/atomflow.hpp"
#include "molhf/autodiff.hpp"
#include "molhf/flowcore.hpp"

namespace molhf {

struct BondFlowConfig {
  int channels = 4;
  int n = 16;
  int blocks = 3;
  int steps = 2;
  int hidden = 32;
  int qk_width = 8;

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, "bond flow: " + m); };
    if (channels <= 0 || n <= 0 || blocks <= 0 || steps <= 0 || hidden <= 0 || qk_width <= 0)
      bad("sizes must be positive");
    if (n % (1 << blocks)) bad("n=" + std::to_string(n) + " must be divisible by 2^blocks");
  }
};

/// Weights of one criss-cross attention module over a C×N×N feature map.
template <class T>
struct CrissCrossParams {
  Parameter<T>* wq;
  Parameter<T>* bq;
  Parameter<T>* wk;
  Parameter<T>* bk;
  Parameter<T>* wv;
  Parameter<T>* bv;
  Parameter<T>* wo;
  Parameter<T>* bo;

  static CrissCrossParams make(ParameterSet<T>& ps, const std::string& name, int channels, int qk, Rng& rng) {
    auto w = [&](const std::string& n, int rows, int cols) -> Parameter<T>* {
      Tensor<T> t({rows, cols});
      fill_normal(t, rng, T(1) / std::sqrt(static_cast<T>(cols)));
      return &ps.add(name + "." + n, std::move(t));
    };
    auto b = [&](const std::string& n, int len) { return &ps.add(name + "." + n, Tensor<T>({len})); };
    CrissCrossParams p;
    p.wq = w("wq", qk, channels);
    p.bq = b("bq", qk);
    p.wk = w("wk", qk, channels);
    p.bk = b("bk", qk);
    p.wv = w("wv", channels, channels);
    p.bv = b("bv", channels);
    p.wo = w("wo", channels, channels);
    p.bo = b("bo", channels);
    return p;
  }
};

/// O = Wo·Σ_{row ∪ column} softmax(Q·K)·V + bo + H.
template <class T>
Var<T> cca(Var<T> h, const CrissCrossParams<T>& p) {
  Tape<T>& tape = *h.tape;
  Var<T> q = ad::conv1x1(h, tape.param(*p.wq), tape.param(*p.bq));
  Var<T> k = ad::conv1x1(h, tape.param(*p.wk), tape.param(*p.bk));
  Var<T> v = ad::conv1x1(h, tape.param(*p.wv), tape.param(*p.bv));
  Var<T> agg = ad::criss_cross(q, k, v);
  return ad::add(ad::conv1x1(agg, tape.param(*p.wo), tape.param(*p.bo)), h);
}

/// conv3×3 → swish → CCA → conv3×3 (zero-initialized) producing (s, t).
template <class T>
class CCANet {
 public:
  CCANet(ParameterSet<T>& ps, const std::string& name, int in, int out, int hidden, int qk, Rng& rng) : out_(out) {
    Tensor<T> w1({hidden, in, 3, 3});
    fill_normal(w1, rng, T(1) / std::sqrt(static_cast<T>(9 * in)));
    w1_ = &ps.add(name + ".conv1.weight", std::move(w1));
    b1_ = &ps.add(name + ".conv1.bias", Tensor<T>({hidden}));
    attn_ = CrissCrossParams<T>::make(ps, name + ".cca", hidden, qk, rng);
    w2_ = &ps.add(name + ".conv2.weight", Tensor<T>({2 * out, hidden, 3, 3}));
    b2_ = &ps.add(name + ".conv2.bias", Tensor<T>({2 * out}));
  }

  std::pair<Var<T>, Var<T>> operator()(Var<T> x) const {
    Tape<T>& tape = *x.tape;
    Var<T> h = ad::swish(ad::conv2d_3x3(x, tape.param(*w1_), tape.param(*b1_)));
    h = cca(h, attn_);
    Var<T> st = ad::conv2d_3x3(h, tape.param(*w2_), tape.param(*b2_));
    return {ad::slice(st, 0, 0, out_), ad::slice(st, 0, out_, 2 * out_)};
  }

 private:
  int out_;
  Parameter<T>* w1_;
  Parameter<T>* b1_;
  CrissCrossParams<T> attn_;
  Parameter<T>* w2_;
  Parameter<T>* b2_;
};

/// Multi-scale Glow over the bond tensor: per block squeeze → steps ×
/// (actnorm → invertible 1×1 conv → affine coupling with a CCA net) → [split].
template <class T>
class BondFlow {
 public:
  BondFlow(ParameterSet<T>& ps, const BondFlowConfig& cfg, Rng& rng, const std::string& prefix = "bond")
      : cfg_(cfg) {
    cfg.validate();
    int c = cfg.channels, n = cfg.n, step_index = 0;
    for (int i = 0; i < cfg.blocks; ++i) {
      c *= 4;
      n /= 2;
      Block blk;
      blk.c = c;
      blk.n = n;
      for (int s = 0; s < cfg.steps; ++s, ++step_index) {
        const std::string p = prefix + ".b" + std::to_string(i) + ".s" + std::to_string(s);
        blk.steps.push_back(Step{ActNorm<T>(ps, p + ".actnorm", c, 0), InvConvLU<T>(ps, p + ".invconv", c, 0, rng),
                                 CCANet<T>(ps, p + ".coupling", c / 2, c / 2, cfg.hidden, cfg.qk_width, rng),
                                 step_index % 2 == 1});
      }
      if (i + 1 < cfg.blocks) {
        blk.split.emplace(ps, prefix + ".b" + std::to_string(i) + ".split", c, SplitPrior<T>::Kind::Conv3x3);
        c /= 2;
      }
      blocks_.push_back(std::move(blk));
    }
  }

  const BondFlowConfig& config() const { return cfg_; }

  std::vector<Shape> latent_shapes() const {
    std::vector<Shape> out;
    for (const auto& b : blocks_) out.push_back(Shape{b.split ? b.c / 2 : b.c, b.n, b.n});
    return out;
  }

  FlowForward<T> forward(Var<T> a, Var<T> log_sigma) const {
    if (a.value().rank() != 3 || a.dim(0) != cfg_.channels || a.dim(1) != cfg_.n || a.dim(2) != cfg_.n)
      throw Error(ErrorCode::ShapeMismatch, "bond flow input " + shape_str(a.shape()));
    Tape<T>& tape = *a.tape;
    FlowForward<T> out;
    Var<T> logdet = zero_scalar(tape);
    Var<T> logp = zero_scalar(tape);
    Var<T> h = a;
    for (const Block& blk : blocks_) {
      h = squeeze(h);
      for (const auto& st : blk.steps) {
        auto r1 = st.norm.forward(h);
        require_finite(r1.value, st.norm.name());
        auto r2 = st.conv.forward(r1.value);
        auto r3 = affine_coupling_forward<T>(r2.value, 0, st.swap, st.net);
        require_finite(r3.value, st.norm.name() + " coupling");
        logdet = ad::add(logdet, ad::add(r1.logdet, ad::add(r2.logdet, r3.logdet)));
        h = r3.value;
      }
      if (blk.split) {
        auto sp = blk.split->forward(h);
        out.z.push_back(sp.z);
        logp = ad::add(logp, sp.logp);
        h = sp.keep;
      } else {
        out.z.push_back(h);
        logp = ad::add(logp, isotropic_logp(h, log_sigma));
      }
    }
    out.logdet = logdet;
    out.logp = ad::add(logp, logdet);
    return out;
  }

  Var<T> inverse(Tape<T>& tape, const std::vector<std::optional<Tensor<T>>>& z, Var<T> log_sigma, T temperature,
                 Rng* rng, std::vector<Tensor<T>>* used = nullptr) const {
    if (z.size() != blocks_.size()) throw Error(ErrorCode::ShapeMismatch, "bond flow needs one entry per level");
    const auto shapes = latent_shapes();
    if (used) used->assign(blocks_.size(), Tensor<T>());
    const std::size_t last = blocks_.size() - 1;
    Var<T> h;
    if (z[last]) {
      h = tape.constant(*z[last]);
    } else {
      if (!rng) throw Error(ErrorCode::InvalidConfig, "sampling needs an rng");
      const Tensor<T> zero(shapes[last]);
      Tensor<T> ls(shapes[last], log_sigma.value()[0]);
      h = tape.constant(sample_gaussian(shapes[last], zero, ls, temperature, *rng));
    }
    if (used) (*used)[last] = h.value();
    for (std::size_t ii = blocks_.size(); ii-- > 0;) {
      const Block& blk = blocks_[ii];
      if (blk.split) {
        auto [hh, zz] = blk.split->inverse_with_z(h, z[ii], temperature, rng);
        h = hh;
        if (used) (*used)[ii] = std::move(zz);
      }
      for (auto it = blk.steps.rbegin(); it != blk.steps.rend(); ++it) {
        h = affine_coupling_inverse<T>(h, 0, it->swap, it->net);
        h = it->conv.inverse(h);
        h = it->norm.inverse(h);
      }
      h = unsqueeze(h);
    }
    return h;
  }

  std::vector<ActNorm<T>*> actnorms() {
    std::vector<ActNorm<T>*> out;
    for (auto& b : blocks_)
      for (auto& s : b.steps) out.push_back(&s.norm);
    return out;
  }

 private:
  struct Step {
    ActNorm<T> norm;
    InvConvLU<T> conv;
    CCANet<T> net;
    bool swap;
  };
  struct Block {
    int c = 0, n = 0;
    std::vector<Step> steps;
    std::optional<SplitPrior<T>> split;
  };

  BondFlowConfig cfg_;
  std::vector<Block> blocks_;
};

}  // namespace molhf
