#pragma once

#include <functional>
#include <string>
#include <vector>

#include "molhf/model.hpp"
#include "molhf/numerics.hpp"

namespace molhf {

struct ConformanceRow {
  std::string layer;
  double roundtrip_error = 0;
  double logdet = 0;
  double logdet_fd = 0;
  double logdet_rel_error = 0;
  bool pass = false;
};

struct ConformanceTolerance {
  double roundtrip = 1e-4;
  double logdet_rel = 1e-3;
};

namespace detail {

inline void perturb(ParameterSet<double>& ps, Rng& rng, double scale) {
  for (auto& p : ps)
    if (p->trainable)
      for (auto& v : p->value.values()) v += scale * rng.normal();
}

inline Tensor<double> random_input(const Shape& s, Rng& rng) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

inline Tensor<double> concat_flat(const std::vector<Tensor<double>>& parts) {
  std::vector<double> flat;
  for (const auto& p : parts) flat.insert(flat.end(), p.storage().begin(), p.storage().end());
  const int n = static_cast<int>(flat.size());
  return Tensor<double>({n}, std::move(flat));
}

/// Random symmetric one-hot bond tensor with `channels` channels.
inline Tensor<double> random_bonds(int channels, int n, Rng& rng) {
  Tensor<double> a({channels, n, n});
  for (int i = 0; i < n; ++i) {
    a.at(0, i, i) = 1;
    for (int j = i + 1; j < n; ++j) {
      const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(channels)));
      a.at(c, i, j) = a.at(c, j, i) = 1;
    }
  }
  return a;
}

/// Checks a bijection given as forward (value + logdet) and inverse maps.
inline ConformanceRow check_bijection(const std::string& name, const Tensor<double>& x,
                                      const std::function<std::pair<Tensor<double>, double>(const Tensor<double>&)>& fwd,
                                      const std::function<Tensor<double>(const Tensor<double>&)>& inv,
                                      const ConformanceTolerance& tol) {
  ConformanceRow row;
  row.layer = name;
  auto [y, ld] = fwd(x);
  row.roundtrip_error = max_abs_diff(inv(y), x);
  row.logdet = ld;
  row.logdet_fd = fd_jacobian_logdet<double>([&](const Tensor<double>& v) { return fwd(v).first.reshaped({static_cast<int>(v.size())}); }, x);
  row.logdet_rel_error = relative_error(row.logdet, row.logdet_fd, 1e-6);
  row.pass = row.roundtrip_error <= tol.roundtrip && row.logdet_rel_error <= tol.logdet_rel;
  return row;
}

}  // namespace detail

/// Round trip and analytic-vs-finite-difference log-determinant for every
/// invertible layer and both full flows on small random configurations.
inline std::vector<ConformanceRow> layer_conformance(std::uint64_t seed = 1, ConformanceTolerance tol = {}) {
  using D = double;
  std::vector<ConformanceRow> rows;
  Rng rng(seed);

  {
    ParameterSet<D> ps;
    ActNorm<D> an(ps, "actnorm", 3, 0);
    detail::perturb(ps, rng, 0.5);
    rows.push_back(detail::check_bijection(
        "actnorm", detail::random_input({3, 2, 2}, rng),
        [&](const Tensor<D>& x) {
          Tape<D> t(false);
          auto r = an.forward(t.constant(x));
          return std::pair(r.value.value(), r.logdet.value()[0]);
        },
        [&](const Tensor<D>& y) {
          Tape<D> t(false);
          return an.inverse(t.constant(y)).value();
        },
        tol));
  }
  {
    ParameterSet<D> ps;
    ActNorm<D> an(ps, "actnorm2d", 4, 1);
    detail::perturb(ps, rng, 0.5);
    rows.push_back(detail::check_bijection(
        "actnorm2d", detail::random_input({3, 4}, rng),
        [&](const Tensor<D>& x) {
          Tape<D> t(false);
          auto r = an.forward(t.constant(x));
          return std::pair(r.value.value(), r.logdet.value()[0]);
        },
        [&](const Tensor<D>& y) {
          Tape<D> t(false);
          return an.inverse(t.constant(y)).value();
        },
        tol));
  }
  for (int axis : {0, 1}) {
    ParameterSet<D> ps;
    InvConvLU<D> conv(ps, "invconv", 4, axis, rng);
    detail::perturb(ps, rng, 0.3);
    const Shape s = axis == 0 ? Shape{4, 2, 2} : Shape{3, 4};
    rows.push_back(detail::check_bijection(
        axis == 0 ? "invconv_lu_1x1" : "invconv_lu_rows", detail::random_input(s, rng),
        [&](const Tensor<D>& x) {
          Tape<D> t(false);
          auto r = conv.forward(t.constant(x));
          return std::pair(r.value.value(), r.logdet.value()[0]);
        },
        [&](const Tensor<D>& y) {
          Tape<D> t(false);
          return conv.inverse(t.constant(y)).value();
        },
        tol));
  }
  rows.push_back(detail::check_bijection(
      "squeeze", detail::random_input({2, 4, 4}, rng),
      [&](const Tensor<D>& x) {
        Tape<D> t(false);
        return std::pair(squeeze(t.constant(x)).value(), 0.0);
      },
      [&](const Tensor<D>& y) {
        Tape<D> t(false);
        return unsqueeze(t.constant(y)).value();
      },
      tol));
  {
    ParameterSet<D> ps;
    CCANet<D> net(ps, "cca_coupling", 2, 2, 4, 2, rng);
    detail::perturb(ps, rng, 0.3);
    for (bool swap : {false, true})
      rows.push_back(detail::check_bijection(
          swap ? "cca_coupling_swap" : "cca_coupling", detail::random_input({4, 3, 3}, rng),
          [&](const Tensor<D>& x) {
            Tape<D> t(false);
            auto r = affine_coupling_forward<D>(t.constant(x), 0, swap, net);
            return std::pair(r.value.value(), r.logdet.value()[0]);
          },
          [&](const Tensor<D>& y) {
            Tape<D> t(false);
            return affine_coupling_inverse<D>(t.constant(y), 0, swap, net).value();
          },
          tol));
  }
  {
    ParameterSet<D> ps;
    GraphCouplingNet<D> net(ps, "graph_coupling", 2, 2, 4, 2, 3, rng);
    detail::perturb(ps, rng, 0.3);
    const auto adj = normalized_adjacency(detail::random_bonds(4, 4, rng));
    for (bool swap : {false, true})
      rows.push_back(detail::check_bijection(
          swap ? "graph_coupling_swap" : "graph_coupling", detail::random_input({4, 4}, rng),
          [&](const Tensor<D>& x) {
            Tape<D> t(false);
            auto r = graph_coupling_forward<D>(t.constant(x), adj, net, swap);
            return std::pair(r.value.value(), r.logdet.value()[0]);
          },
          [&](const Tensor<D>& y) {
            Tape<D> t(false);
            return graph_coupling_inverse<D>(t.constant(y), adj, net, swap).value();
          },
          tol));
  }
  {
    ParameterSet<D> ps;
    SplitPrior<D> sp(ps, "split_prior", 4, SplitPrior<D>::Kind::Linear);
    detail::perturb(ps, rng, 0.3);
    rows.push_back(detail::check_bijection(
        "split_prior", detail::random_input({3, 4}, rng),
        [&](const Tensor<D>& x) {
          Tape<D> t(false);
          auto r = sp.forward(t.constant(x));
          return std::pair(detail::concat_flat({r.z.value(), r.keep.value()}), 0.0);
        },
        [&](const Tensor<D>& y) {
          Tape<D> t(false);
          Tensor<D> z({3, 2}), keep({3, 2});
          std::copy(y.data(), y.data() + 6, z.data());
          std::copy(y.data() + 6, y.data() + 12, keep.data());
          return sp.inverse(t.constant(keep), z, 1.0, nullptr).value();
        },
        tol));
  }
  {
    ParameterSet<D> ps;
    AtomFlowConfig cfg;
    cfg.n = 4;
    cfg.d = 4;
    cfg.coarsen = {2};
    cfg.steps = 2;
    cfg.rgcn_layers = 1;
    cfg.hidden = 4;
    AtomFlow<D> flow(ps, cfg, rng);
    detail::perturb(ps, rng, 0.2);
    const Tensor<D> a = detail::random_bonds(4, 4, rng);
    const Tensor<D> ls({1});
    rows.push_back(detail::check_bijection(
        "atom_flow", detail::random_input({4, 4}, rng),
        [&](const Tensor<D>& x) {
          Tape<D> t(false);
          auto r = flow.forward(t.constant(x), a, t.constant(ls));
          std::vector<Tensor<D>> z;
          for (const auto& v : r.z) z.push_back(v.value());
          return std::pair(detail::concat_flat(z), r.logdet.value()[0]);
        },
        [&](const Tensor<D>& y) {
          Tape<D> t(false);
          std::vector<std::optional<Tensor<D>>> z;
          std::size_t off = 0;
          for (const auto& s : flow.latent_shapes()) {
            Tensor<D> part(s);
            std::copy(y.data() + off, y.data() + off + part.size(), part.data());
            off += part.size();
            z.emplace_back(std::move(part));
          }
          return flow.inverse(t, z, a, t.constant(ls), 1.0, nullptr).value();
        },
        tol));
  }
  {
    ParameterSet<D> ps;
    BondFlowConfig cfg;
    cfg.channels = 2;
    cfg.n = 4;
    cfg.blocks = 2;
    cfg.steps = 2;
    cfg.hidden = 4;
    cfg.qk_width = 2;
    BondFlow<D> flow(ps, cfg, rng);
    detail::perturb(ps, rng, 0.1);
    const Tensor<D> ls({1});
    rows.push_back(detail::check_bijection(
        "bond_flow", detail::random_input({2, 4, 4}, rng),
        [&](const Tensor<D>& x) {
          Tape<D> t(false);
          auto r = flow.forward(t.constant(x), t.constant(ls));
          std::vector<Tensor<D>> z;
          for (const auto& v : r.z) z.push_back(v.value());
          return std::pair(detail::concat_flat(z), r.logdet.value()[0]);
        },
        [&](const Tensor<D>& y) {
          Tape<D> t(false);
          std::vector<std::optional<Tensor<D>>> z;
          std::size_t off = 0;
          for (const auto& s : flow.latent_shapes()) {
            Tensor<D> part(s);
            std::copy(y.data() + off, y.data() + off + part.size(), part.data());
            off += part.size();
            z.emplace_back(std::move(part));
          }
          return flow.inverse(t, z, t.constant(ls), 1.0, nullptr).value();
        },
        tol));
  }
  return rows;
}

/// Two-channel bonds, one element, n = 2: both flows with one step each.
inline Config micro_config() {
  Config c = preset_config("toy");
  c.preset = "micro";
  c.elements = ElementTable({"C"}, {4});
  c.n = 2;
  c.d_pad = 2;
  c.atom.coarsen = {};
  c.atom.steps = 1;
  c.atom.rgcn_layers = 1;
  c.atom.hidden = 2;
  c.bond.blocks = 1;
  c.bond.steps = 1;
  c.bond.hidden = 2;
  c.bond.qk_width = 1;
  c.sync();
  c.atom.bond_channels = 2;
  c.bond.channels = 2;
  return c;
}

struct GradientCheck {
  std::size_t parameters = 0;
  double max_rel_error = 0;
  std::string worst;
};

/// Analytic NLL gradient against central differences over every trainable
/// scalar of the micro model (all parameters perturbed away from their
/// zero initialization first).
inline GradientCheck gradient_check(std::uint64_t seed = 2, double h = 1e-5, double floor = 1e-6) {
  using D = double;
  FlowModel<D> model(micro_config());
  Rng rng(seed);
  detail::perturb(model.params(), rng, 0.3);
  const auto& cfg = model.config();
  std::vector<std::array<Tensor<D>, 3>> batch;
  for (int s = 0; s < 2; ++s) {
    Tensor<D> a1h = detail::random_bonds(2, cfg.n, rng);
    Tensor<D> x({cfg.n, cfg.d_pad});
    for (int i = 0; i < cfg.n; ++i) x.at(i, static_cast<int>(rng.below(2))) = 1;
    Tensor<D> a = a1h;
    for (auto& v : x.values()) v += 0.9 * rng.uniform();
    for (auto& v : a.values()) v += 0.9 * rng.uniform();
    batch.push_back({std::move(x), std::move(a), std::move(a1h)});
  }
  auto loss = [&](bool record) {
    model.params().zero_grad();
    double total = 0;
    for (const auto& e : batch) {
      Tape<D> tape(record);
      Var<D> l = model.nll(tape, e[0], e[1], e[2]);
      total += l.value()[0] / static_cast<double>(batch.size());
      if (record) tape.backward(l, 1.0 / static_cast<double>(batch.size()));
    }
    return total;
  };
  loss(true);
  GradientCheck out;
  out.parameters = model.params().scalar_count();
  std::vector<Tensor<D>> grads;
  for (auto& p : model.params()) grads.push_back(p->grad);
  std::size_t k = 0;
  for (auto& p : model.params()) {
    const Tensor<D> g = grads[k++];
    if (!p->trainable) continue;
    auto vals = p->value.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = loss(false);
      vals[i] = orig - h;
      const double down = loss(false);
      vals[i] = orig;
      const double err = relative_error(g[i], (up - down) / (2 * h), floor);
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace molhf
