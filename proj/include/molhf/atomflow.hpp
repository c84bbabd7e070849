#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "molhf/autodiff.hpp"
#include "molhf/flowcore.hpp"
#include "molhf/tensor.hpp"

namespace molhf {

/// Multi-scale layout of the atom-matrix flow. Block 0 works on the input
/// resolution; block i > 0 first merges every coarsen[i-1] nodes.
struct AtomFlowConfig {
  int n = 16;
  int d = 4;
  int bond_channels = 4;
  std::vector<int> coarsen = {2, 2};
  int steps = 2;
  int rgcn_layers = 2;
  int hidden = 32;

  int blocks() const { return static_cast<int>(coarsen.size()) + 1; }

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, "atom flow: " + m); };
    if (n <= 0 || d <= 0 || steps <= 0 || rgcn_layers <= 0 || hidden <= 0) bad("sizes must be positive");
    if (bond_channels < 2) bad("need a no-bond channel and at least one bond channel");
    int nn = n, dd = d;
    for (std::size_t i = 0; i <= coarsen.size(); ++i) {
      if (i > 0) {
        const int k = coarsen[i - 1];
        if (k < 2 || k > 4) bad("coarsening factor must be 2, 3 or 4");
        if (nn % k) bad("n=" + std::to_string(n) + " not divisible by the coarsening factors");
        nn /= k;
        dd *= k;
      }
      if (dd % 2) bad("odd feature width " + std::to_string(dd) + " at block " + std::to_string(i));
      if (i < coarsen.size()) dd /= 2;
    }
  }
};

/// Hard assignment S (n × n/k): node r belongs to cluster r / k.
template <class T>
Tensor<T> assignment_matrix(int n, int k) {
  if (k <= 0 || n % k) throw Error(ErrorCode::IndivisibleN, std::to_string(n) + " % " + std::to_string(k));
  Tensor<T> s({n, n / k});
  for (int r = 0; r < n; ++r) s.at(r, r / k) = 1;
  return s;
}

/// Per-channel SᵀAS for the block-contiguous assignment: entry (p, q) counts
/// the bonds between clusters p and q.
template <class T>
Tensor<T> coarsen_structure(const Tensor<T>& a, int k) {
  if (a.rank() != 3 || a.dim(1) != a.dim(2)) throw Error(ErrorCode::ShapeMismatch, "coarsen needs b×n×n");
  const int b = a.dim(0), n = a.dim(1);
  if (k <= 0 || n % k) throw Error(ErrorCode::IndivisibleN, std::to_string(n) + " % " + std::to_string(k));
  const int m = n / k;
  Tensor<T> out({b, m, m});
  for (int c = 0; c < b; ++c)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) out.at(c, i / k, j / k) += a.at(c, i, j);
  return out;
}

/// Row c of the result is H[c·k] ‖ … ‖ H[c·k+k−1].
template <class T>
Var<T> merge_features(Var<T> h, int k) {
  if (h.value().rank() != 2 || k <= 0 || h.dim(0) % k)
    throw Error(ErrorCode::IndivisibleN, "merge of " + shape_str(h.shape()) + " by " + std::to_string(k));
  return ad::reshape(h, Shape{h.dim(0) / k, h.dim(1) * k});
}

template <class T>
Var<T> unmerge_features(Var<T> h, int k) {
  if (h.value().rank() != 2 || k <= 0 || h.dim(1) % k)
    throw Error(ErrorCode::IndivisibleN, "unmerge of " + shape_str(h.shape()) + " by " + std::to_string(k));
  return ad::reshape(h, Shape{h.dim(0) * k, h.dim(1) / k});
}

/// D⁻¹A_c for the bond channels 1..b−1, D_jj = Σ_{c≥1,i} A[c,i,j];
/// zero-degree rows stay zero.
template <class T>
std::vector<Tensor<T>> normalized_adjacency(const Tensor<T>& a) {
  const int b = a.dim(0), n = a.dim(1);
  std::vector<T> deg(static_cast<std::size_t>(n), T(0));
  for (int c = 1; c < b; ++c)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) deg[static_cast<std::size_t>(j)] += a.at(c, i, j);
  std::vector<Tensor<T>> out;
  for (int c = 1; c < b; ++c) {
    Tensor<T> m({n, n});
    for (int j = 0; j < n; ++j) {
      const T dj = deg[static_cast<std::size_t>(j)];
      if (dj == T(0)) continue;
      for (int k = 0; k < n; ++k) m.at(j, k) = a.at(c, j, k) / dj;
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// H' = Σ_c (D⁻¹A_c)·H·W_c + H·W_0.
template <class T>
Var<T> rgcn_conv(Var<T> h, const std::vector<Tensor<T>>& norm_adj, Var<T> w_self, const std::vector<Var<T>>& w_rel) {
  if (norm_adj.size() != w_rel.size()) throw Error(ErrorCode::ShapeMismatch, "one relation weight per bond channel");
  Tape<T>& tape = *h.tape;
  Var<T> out = ad::matmul(h, w_self);
  for (std::size_t c = 0; c < norm_adj.size(); ++c) {
    if (norm_adj[c].dim(0) != h.dim(0)) throw Error(ErrorCode::ShapeMismatch, "adjacency vs node count");
    out = ad::add(out, ad::matmul(tape.constant(norm_adj[c]), ad::matmul(h, w_rel[c])));
  }
  return out;
}

/// Coupling network over node features: an R-GCN stack on the conditioned
/// half, then a per-node MLP whose last layer starts at zero.
template <class T>
class GraphCouplingNet {
 public:
  GraphCouplingNet(ParameterSet<T>& ps, const std::string& name, int in, int out, int hidden, int layers,
                   int relations, Rng& rng)
      : out_(out) {
    int width = in;
    for (int l = 0; l < layers; ++l) {
      Layer layer;
      const T sd = T(1) / std::sqrt(static_cast<T>(width));
      const std::string p = name + ".rgcn" + std::to_string(l);
      Tensor<T> w({width, hidden});
      fill_normal(w, rng, sd);
      layer.self = &ps.add(p + ".w0", std::move(w));
      for (int r = 0; r < relations; ++r) {
        Tensor<T> wr({width, hidden});
        fill_normal(wr, rng, sd);
        layer.rel.push_back(&ps.add(p + ".w" + std::to_string(r + 1), std::move(wr)));
      }
      layer.bias = &ps.add(p + ".b", Tensor<T>({hidden}));
      layers_.push_back(std::move(layer));
      width = hidden;
    }
    Tensor<T> w1({hidden, hidden});
    fill_normal(w1, rng, T(1) / std::sqrt(static_cast<T>(hidden)));
    mlp_w1_ = &ps.add(name + ".mlp.w1", std::move(w1));
    mlp_b1_ = &ps.add(name + ".mlp.b1", Tensor<T>({hidden}));
    mlp_w2_ = &ps.add(name + ".mlp.w2", Tensor<T>({hidden, 2 * out}));
    mlp_b2_ = &ps.add(name + ".mlp.b2", Tensor<T>({2 * out}));
  }

  std::pair<Var<T>, Var<T>> operator()(Var<T> h, const std::vector<Tensor<T>>& norm_adj) const {
    Tape<T>& tape = *h.tape;
    for (const auto& layer : layers_) {
      std::vector<Var<T>> rel;
      for (auto* w : layer.rel) rel.push_back(tape.param(*w));
      h = ad::swish(ad::add_bias(rgcn_conv(h, norm_adj, tape.param(*layer.self), rel), tape.param(*layer.bias), 1));
    }
    h = ad::swish(ad::add_bias(ad::matmul(h, tape.param(*mlp_w1_)), tape.param(*mlp_b1_), 1));
    Var<T> st = ad::add_bias(ad::matmul(h, tape.param(*mlp_w2_)), tape.param(*mlp_b2_), 1);
    return {ad::slice(st, 1, 0, out_), ad::slice(st, 1, out_, 2 * out_)};
  }

 private:
  struct Layer {
    Parameter<T>* self = nullptr;
    std::vector<Parameter<T>*> rel;
    Parameter<T>* bias = nullptr;
  };
  int out_;
  std::vector<Layer> layers_;
  Parameter<T>* mlp_w1_;
  Parameter<T>* mlp_b1_;
  Parameter<T>* mlp_w2_;
  Parameter<T>* mlp_b2_;
};

/// Coupling over the feature (column) halves of H conditioned on a scale's
/// bond structure.
template <class T>
LayerIO<T> graph_coupling_forward(Var<T> h, const std::vector<Tensor<T>>& norm_adj, const GraphCouplingNet<T>& net,
                                  bool swap) {
  return affine_coupling_forward<T>(h, 1, swap, [&](Var<T> c) { return net(c, norm_adj); });
}

template <class T>
Var<T> graph_coupling_inverse(Var<T> h, const std::vector<Tensor<T>>& norm_adj, const GraphCouplingNet<T>& net,
                              bool swap) {
  return affine_coupling_inverse<T>(h, 1, swap, [&](Var<T> c) { return net(c, norm_adj); });
}

template <class T>
struct FlowForward {
  std::vector<Var<T>> z;  // finest level first
  Var<T> logp;            // priors + log-determinant
  Var<T> logdet;
};

/// f_{X|A}: per block [merge] → steps × (actnorm2D → LU permutation →
/// graph coupling) → [split], conditioned on the coarsened bond tensor.
template <class T>
class AtomFlow {
 public:
  AtomFlow(ParameterSet<T>& ps, const AtomFlowConfig& cfg, Rng& rng, const std::string& prefix = "atom")
      : cfg_(cfg) {
    cfg.validate();
    int n = cfg.n, d = cfg.d, step_index = 0;
    for (int i = 0; i < cfg.blocks(); ++i) {
      if (i > 0) {
        const int k = cfg.coarsen[static_cast<std::size_t>(i - 1)];
        n /= k;
        d *= k;
      }
      Block blk;
      blk.n = n;
      blk.d = d;
      for (int s = 0; s < cfg.steps; ++s, ++step_index) {
        const std::string p = prefix + ".b" + std::to_string(i) + ".s" + std::to_string(s);
        blk.steps.push_back(Step{ActNorm<T>(ps, p + ".actnorm", d, 1), InvConvLU<T>(ps, p + ".perm", d, 1, rng),
                                 GraphCouplingNet<T>(ps, p + ".coupling", d / 2, d / 2, cfg.hidden, cfg.rgcn_layers,
                                                     cfg.bond_channels - 1, rng),
                                 step_index % 2 == 1});
      }
      if (i + 1 < cfg.blocks()) {
        blk.split.emplace(ps, prefix + ".b" + std::to_string(i) + ".split", d, SplitPrior<T>::Kind::Linear);
        d /= 2;
      }
      blocks_.push_back(std::move(blk));
    }
  }

  const AtomFlowConfig& config() const { return cfg_; }

  /// Shapes of z⁰ … z^L.
  std::vector<Shape> latent_shapes() const {
    std::vector<Shape> out;
    for (const auto& b : blocks_) out.push_back(Shape{b.n, b.split ? b.d / 2 : b.d});
    return out;
  }

  /// Bond tensors per scale: A⁰ = a, Aⁱ = SᵀAⁱ⁻¹S.
  std::vector<Tensor<T>> coarse_structures(const Tensor<T>& a) const {
    std::vector<Tensor<T>> out{a};
    for (int k : cfg_.coarsen) out.push_back(coarsen_structure(out.back(), k));
    return out;
  }

  FlowForward<T> forward(Var<T> x, const Tensor<T>& a_onehot, Var<T> log_sigma) const {
    if (x.value().rank() != 2 || x.dim(0) != cfg_.n || x.dim(1) != cfg_.d)
      throw Error(ErrorCode::ShapeMismatch, "atom flow input " + shape_str(x.shape()));
    Tape<T>& tape = *x.tape;
    const auto structures = coarse_structures(a_onehot);
    FlowForward<T> out;
    Var<T> logdet = zero_scalar(tape);
    Var<T> logp = zero_scalar(tape);
    Var<T> h = x;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const Block& blk = blocks_[i];
      if (i > 0) h = merge_features(h, cfg_.coarsen[i - 1]);
      const auto adj = normalized_adjacency(structures[i]);
      for (const auto& st : blk.steps) {
        auto r1 = st.norm.forward(h);
        require_finite(r1.value, st.norm.name());
        auto r2 = st.perm.forward(r1.value);
        auto r3 = graph_coupling_forward(r2.value, adj, st.coupling, st.swap);
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

  /// Exact inverse for recorded levels; missing levels are drawn from their
  /// priors at `temperature`. `used`, when given, receives every level.
  Var<T> inverse(Tape<T>& tape, const std::vector<std::optional<Tensor<T>>>& z, const Tensor<T>& a_onehot,
                 Var<T> log_sigma, T temperature, Rng* rng, std::vector<Tensor<T>>* used = nullptr) const {
    if (z.size() != blocks_.size()) throw Error(ErrorCode::ShapeMismatch, "atom flow needs one entry per level");
    const auto structures = coarse_structures(a_onehot);
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
      const auto adj = normalized_adjacency(structures[ii]);
      for (auto it = blk.steps.rbegin(); it != blk.steps.rend(); ++it) {
        h = graph_coupling_inverse(h, adj, it->coupling, it->swap);
        h = it->perm.inverse(h);
        h = it->norm.inverse(h);
      }
      if (ii > 0) h = unmerge_features(h, cfg_.coarsen[ii - 1]);
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
    InvConvLU<T> perm;
    GraphCouplingNet<T> coupling;
    bool swap;
  };
  struct Block {
    int n = 0, d = 0;
    std::vector<Step> steps;
    std::optional<SplitPrior<T>> split;
  };

  AtomFlowConfig cfg_;
  std::vector<Block> blocks_;
};

}  // namespace molhf
