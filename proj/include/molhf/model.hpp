#pragma once

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "molhf/atomflow.hpp"
#include "molhf/bondflow.hpp"
#include "molhf/config.hpp"
#include "molhf/molgraph.hpp"

namespace molhf {

/// Latent levels of both flows, finest level first.
template <class T>
struct Latents {
  std::vector<Tensor<T>> bond;
  std::vector<Tensor<T>> atom;

  std::size_t size() const {
    std::size_t s = 0;
    for (const auto& t : bond) s += t.size();
    for (const auto& t : atom) s += t.size();
    return s;
  }

  /// Bond levels then atom levels, concatenated.
  Tensor<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(size());
    for (const auto* group : {&bond, &atom})
      for (const auto& t : *group) flat.insert(flat.end(), t.storage().begin(), t.storage().end());
    const int n = static_cast<int>(flat.size());
    return Tensor<T>({n}, std::move(flat));
  }

  /// Inverse of flatten() using this object's shapes.
  Latents unflatten(const Tensor<T>& flat) const {
    if (flat.size() != size()) throw Error(ErrorCode::ShapeMismatch, "latent vector length");
    Latents out = *this;
    std::size_t off = 0;
    for (auto* group : {&out.bond, &out.atom})
      for (auto& t : *group) {
        std::copy(flat.data() + off, flat.data() + off + t.size(), t.data());
        off += t.size();
      }
    return out;
  }

  static std::vector<std::optional<Tensor<T>>> as_optional(const std::vector<Tensor<T>>& v) {
    return {v.begin(), v.end()};
  }
};

template <class T>
struct ModelForward {
  FlowForward<T> bond;
  FlowForward<T> atom;
  Var<T> logp_a;
  Var<T> logp_x;
};

/// One generated tensor pair plus its discretized bond tensor.
template <class T>
struct Decoded {
  Tensor<T> x;
  Tensor<T> a;
  Tensor<T> a_onehot;
};

/// The joint model log P(G) = log P(A) + log P(X|A) with a bond flow and an
/// atom flow conditioned on the bonds. The final-level priors share one
/// learnable log σ.
template <class T>
class FlowModel {
 public:
  explicit FlowModel(const Config& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng(cfg_.seed).split(0x6d6f64656cULL);
    bond_ = std::make_unique<BondFlow<T>>(params_, cfg_.bond, rng);
    atom_ = std::make_unique<AtomFlow<T>>(params_, cfg_.atom, rng);
    log_sigma_ = &params_.add("log_sigma", Tensor<T>({1}));
  }
  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;

  const Config& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const BondFlow<T>& bond_flow() const { return *bond_; }
  const AtomFlow<T>& atom_flow() const { return *atom_; }
  Parameter<T>& log_sigma() { return *log_sigma_; }

  /// Forward pass on dequantized tensors; `a_onehot` conditions the atom flow.
  ModelForward<T> forward(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& a_onehot) const {
    Var<T> ls = tape.param(*log_sigma_);
    ModelForward<T> out;
    out.bond = bond_->forward(tape.leaf(a), ls);
    out.atom = atom_->forward(tape.leaf(x), a_onehot, ls);
    out.logp_a = out.bond.logp;
    out.logp_x = out.atom.logp;
    return out;
  }

  /// −[log P(Ã) + log P(X̃|A)] for one molecule.
  Var<T> nll(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& a_onehot) const {
    auto f = forward(tape, x, a, a_onehot);
    return ad::scale(ad::add(f.logp_a, f.logp_x), T(-1));
  }

  Latents<T> encode(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& a_onehot) const {
    Tape<T> tape(false);
    auto f = forward(tape, x, a, a_onehot);
    Latents<T> z;
    for (const auto& v : f.bond.z) z.bond.push_back(v.value());
    for (const auto& v : f.atom.z) z.atom.push_back(v.value());
    return z;
  }

  /// Inverse pass. Missing levels are drawn at `temperature` (bond levels
  /// first, then atom levels); `used` receives every level actually used.
  Decoded<T> decode(const std::vector<std::optional<Tensor<T>>>& zb, const std::vector<std::optional<Tensor<T>>>& za,
                    T temperature, Rng* rng, Latents<T>* used = nullptr) const {
    Tape<T> tape(false);
    Var<T> ls = tape.param(*log_sigma_);
    Decoded<T> out;
    out.a = bond_->inverse(tape, zb, ls, temperature, rng, used ? &used->bond : nullptr).value();
    out.a_onehot = onehot_bonds(out.a);
    out.x = atom_->inverse(tape, za, out.a_onehot, ls, temperature, rng, used ? &used->atom : nullptr).value();
    return out;
  }

  Decoded<T> decode(const Latents<T>& z) const {
    return decode(Latents<T>::as_optional(z.bond), Latents<T>::as_optional(z.atom), T(1), nullptr);
  }

  Decoded<T> sample(T temperature, Rng& rng) const {
    return decode(std::vector<std::optional<Tensor<T>>>(bond_->latent_shapes().size()),
                  std::vector<std::optional<Tensor<T>>>(atom_->latent_shapes().size()), temperature, &rng);
  }

  bool initialized() const {
    for (auto* an : const_cast<FlowModel*>(this)->all_actnorms())
      if (!an->initialized()) return false;
    return true;
  }

  /// Data-dependent actnorm initialization, layer by layer in flow order, on
  /// a batch of (x̃, ã, one-hot a) triples. Already initialized layers are
  /// left alone.
  void data_init(const std::vector<std::array<const Tensor<T>*, 3>>& batch) {
    if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "actnorm init needs data");
    auto run = [&](std::vector<ActNorm<T>*> layers, bool bond) {
      for (ActNorm<T>* an : layers) {
        if (an->initialized()) continue;
        std::vector<Tensor<T>> seen;
        an->set_capture(&seen);
        for (const auto& s : batch) {
          Tape<T> tape(false);
          Var<T> ls = tape.param(*log_sigma_);
          if (bond)
            bond_->forward(tape.constant(*s[1]), ls);
          else
            atom_->forward(tape.constant(*s[0]), *s[2], ls);
        }
        an->set_capture(nullptr);
        an->initialize(seen);
      }
    };
    run(bond_->actnorms(), true);
    run(atom_->actnorms(), false);
  }

 private:
  std::vector<ActNorm<T>*> all_actnorms() {
    auto v = bond_->actnorms();
    auto w = atom_->actnorms();
    v.insert(v.end(), w.begin(), w.end());
    return v;
  }

  Config cfg_;
  ParameterSet<T> params_;
  std::unique_ptr<BondFlow<T>> bond_;
  std::unique_ptr<AtomFlow<T>> atom_;
  Parameter<T>* log_sigma_;
};

}  // namespace molhf
