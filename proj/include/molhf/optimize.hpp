#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "molhf/generation.hpp"
#include "molhf/model.hpp"
#include "molhf/training.hpp"

namespace molhf {

// --- Fingerprints -------------------------------------------------------------

struct Fingerprint {
  int bits = 0;
  std::vector<std::uint64_t> words;

  explicit Fingerprint(int width = 2048) : bits(width), words(static_cast<std::size_t>((width + 63) / 64), 0) {}

  void set(std::size_t i) { words[i / 64] |= std::uint64_t(1) << (i % 64); }
  bool test(std::size_t i) const { return (words[i / 64] >> (i % 64)) & 1u; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto w : words) c += static_cast<std::size_t>(std::popcount(w));
    return c;
  }
  bool operator==(const Fingerprint&) const = default;
};

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

}  // namespace detail

/// Circular fingerprint. Round 0 hashes (round byte, symbol, 0x00, degree
/// u32, sorted incident orders as bytes); round r hashes (round byte, own
/// previous invariant u64, sorted (order byte, neighbor invariant u64)
/// pairs). All integers little-endian; hash = FNV-1a 64; bit = hash mod bits.
inline Fingerprint fingerprint(const MolGraph& g, int radius = 2, int bits = 2048) {
  if (g.num_atoms() == 0) throw Error(ErrorCode::InvalidMolecule, "fingerprint of an empty graph");
  if (bits <= 0 || radius < 0) throw Error(ErrorCode::InvalidConfig, "fingerprint width/radius");
  Fingerprint fp(bits);
  const int n = g.num_atoms();
  std::vector<std::uint64_t> inv(static_cast<std::size_t>(n));
  for (int a = 0; a < n; ++a) {
    std::string bytes(1, '\0');
    bytes += g.atom(a);
    bytes.push_back('\0');
    const auto nb = g.neighbors(a);
    detail::put_u32(bytes, static_cast<std::uint32_t>(nb.size()));
    std::vector<int> orders;
    for (int v : nb) orders.push_back(g.bond_order(a, v));
    std::sort(orders.begin(), orders.end());
    for (int o : orders) bytes.push_back(static_cast<char>(o));
    inv[static_cast<std::size_t>(a)] = fnv1a64(bytes);
  }
  auto mark = [&] {
    for (auto h : inv) fp.set(static_cast<std::size_t>(h % static_cast<std::uint64_t>(bits)));
  };
  mark();
  for (int r = 1; r <= radius; ++r) {
    std::vector<std::uint64_t> next(inv.size());
    for (int a = 0; a < n; ++a) {
      std::vector<std::pair<int, std::uint64_t>> pairs;
      for (int v : g.neighbors(a)) pairs.push_back({g.bond_order(a, v), inv[static_cast<std::size_t>(v)]});
      std::sort(pairs.begin(), pairs.end());
      std::string bytes(1, static_cast<char>(r));
      detail::put_u64(bytes, inv[static_cast<std::size_t>(a)]);
      for (const auto& [o, h] : pairs) {
        bytes.push_back(static_cast<char>(o));
        detail::put_u64(bytes, h);
      }
      next[static_cast<std::size_t>(a)] = fnv1a64(bytes);
    }
    inv = std::move(next);
    mark();
  }
  return fp;
}

/// |a∧b| / |a∨b|, 1 when both are empty.
inline double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (a.bits != b.bits) throw Error(ErrorCode::WidthMismatch, std::to_string(a.bits) + " vs " + std::to_string(b.bits));
  std::size_t both = 0, any = 0;
  for (std::size_t i = 0; i < a.words.size(); ++i) {
    both += static_cast<std::size_t>(std::popcount(a.words[i] & b.words[i]));
    any += static_cast<std::size_t>(std::popcount(a.words[i] | b.words[i]));
  }
  return any == 0 ? 1.0 : static_cast<double>(both) / static_cast<double>(any);
}

// --- Scorers ----------------------------------------------------------------

using Scorer = std::function<double(const MolGraph&)>;

inline Scorer scorer_by_name(const std::string& name) {
  if (name == "atom_count") return [](const MolGraph& g) { return static_cast<double>(g.num_atoms()); };
  if (name == "carbon_count")
    return [](const MolGraph& g) { return static_cast<double>(std::count(g.atoms().begin(), g.atoms().end(), "C")); };
  if (name == "ring_count")
    return [](const MolGraph& g) {
      return static_cast<double>(static_cast<int>(g.bonds().size()) - g.num_atoms() +
                                 static_cast<int>(connected_components(g).size()));
    };
  if (name == "heteroatom_fraction")
    return [](const MolGraph& g) {
      if (g.num_atoms() == 0) return 0.0;
      const auto c = std::count(g.atoms().begin(), g.atoms().end(), "C");
      return static_cast<double>(g.num_atoms() - c) / static_cast<double>(g.num_atoms());
    };
  throw Error(ErrorCode::InvalidConfig, "unknown scorer '" + name + "'");
}

// --- Surrogate ----------------------------------------------------------------

/// Flattened latents of every molecule; molecule i is dequantized with
/// seed.split(i).
template <class T>
std::vector<Tensor<T>> dataset_latents(const FlowModel<T>& model, const Dataset<T>& data, std::uint64_t seed,
                                       int threads = 1) {
  std::vector<Tensor<T>> out(data.size());
  const Rng root(seed);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    Rng rng = root.split(i);
    const auto ex = make_example(data.encoded[i], model.config().noise_scale, rng);
    out[i] = model.encode(ex.x, ex.a, ex.a_onehot).flatten();
  });
  return out;
}

/// h(z) = μ + σ·(w2ᵀ swish(W1ᵀz + b1) + b2), with (μ, σ) the target
/// statistics of the training set (σ = 0 makes h the constant μ).
template <class T>
class Surrogate {
 public:
  Surrogate(int input, int hidden, std::uint64_t seed) : input_(input) {
    Rng rng = Rng(seed).split(0x5375);
    Tensor<T> w1({input, hidden}), w2({hidden, 1});
    fill_normal(w1, rng, T(1) / std::sqrt(static_cast<T>(input)));
    fill_normal(w2, rng, T(1) / std::sqrt(static_cast<T>(hidden)));
    w1_ = &ps_.add("w1", std::move(w1));
    b1_ = &ps_.add("b1", Tensor<T>({hidden}));
    w2_ = &ps_.add("w2", std::move(w2));
    b2_ = &ps_.add("b2", Tensor<T>({1}));
  }
  Surrogate(const Surrogate&) = delete;
  Surrogate& operator=(const Surrogate&) = delete;

  int input() const { return input_; }
  ParameterSet<T>& params() { return ps_; }
  double mean = 0;
  double scale = 1;

  /// Standardized prediction for a B×D batch. With `frozen` the weights
  /// enter the tape as constants and receive no gradient.
  Var<T> forward(Tape<T>& tape, Var<T> z, bool frozen = false) const {
    auto w = [&](Parameter<T>* p) { return frozen ? tape.constant(p->value) : tape.param(*p); };
    Var<T> h = ad::swish(ad::add_bias(ad::matmul(z, w(w1_)), w(b1_), 1));
    return ad::add_bias(ad::matmul(h, w(w2_)), w(b2_), 1);
  }

  double predict(const Tensor<T>& z) const {
    Tape<T> tape(false);
    return mean + scale * static_cast<double>(forward(tape, tape.constant(z.reshaped({1, input_}))).value()[0]);
  }

  /// ∇_z h(z) in property units.
  Tensor<T> gradient(const Tensor<T>& z) const {
    Tape<T> tape(true);
    Var<T> leaf = tape.leaf(z.reshaped({1, input_}));
    tape.backward(forward(tape, leaf, true), static_cast<T>(scale));
    return tape.grad(leaf).reshaped(z.shape());
  }

 private:
  int input_;
  ParameterSet<T> ps_;
  Parameter<T>* w1_;
  Parameter<T>* b1_;
  Parameter<T>* w2_;
  Parameter<T>* b2_;
};

struct SurrogateFit {
  std::vector<double> epoch_mse;
};

/// Minimizes the squared error on standardized targets with Adam; the
/// epoch-e order comes from seed.split(e). `epoch_mse` is the full-set MSE in
/// property units after each epoch.
template <class T>
SurrogateFit fit_surrogate(Surrogate<T>& s, const std::vector<Tensor<T>>& z, const std::vector<double>& y, int epochs,
                           std::uint64_t seed, double lr = 1e-3, std::size_t batch_size = 256) {
  if (z.empty() || z.size() != y.size()) throw Error(ErrorCode::EmptyBatch, "surrogate needs matching latents and targets");
  double m = 0, v = 0;
  for (double t : y) m += t;
  m /= static_cast<double>(y.size());
  for (double t : y) v += (t - m) * (t - m);
  v /= static_cast<double>(y.size());
  s.mean = m;
  s.scale = std::sqrt(v);
  const double unit = s.scale > 1e-12 ? s.scale : 1.0;
  const int d = s.input();
  auto rows = [&](const std::vector<std::size_t>& idx, std::size_t from, std::size_t to) {
    Tensor<T> x({static_cast<int>(to - from), d}), t({static_cast<int>(to - from), 1});
    for (std::size_t k = from; k < to; ++k) {
      std::copy(z[idx[k]].data(), z[idx[k]].data() + d, x.data() + (k - from) * static_cast<std::size_t>(d));
      t[k - from] = static_cast<T>((y[idx[k]] - s.mean) / unit);
    }
    return std::pair(std::move(x), std::move(t));
  };
  Adam<T> adam(s.params(), lr);
  SurrogateFit fit;
  std::vector<std::size_t> all(z.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  for (int e = 0; e < epochs; ++e) {
    auto order = all;
    Rng rng = Rng(seed).split(static_cast<std::uint64_t>(e));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t from = 0; from < order.size(); from += batch_size) {
      const std::size_t to = std::min(order.size(), from + batch_size);
      auto [x, t] = rows(order, from, to);
      Tape<T> tape(true);
      Var<T> diff = ad::sub(s.forward(tape, tape.constant(std::move(x))), tape.constant(std::move(t)));
      s.params().zero_grad();
      tape.backward(ad::mean(ad::mul(diff, diff)));
      adam.step();
    }
    auto [x, t] = rows(all, 0, all.size());
    Tape<T> tape(false);
    const auto pred = s.forward(tape, tape.constant(std::move(x))).value();
    double mse = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double diff = (static_cast<double>(pred[i]) - static_cast<double>(t[i])) * s.scale;
      mse += diff * diff;
    }
    fit.epoch_mse.push_back(mse / static_cast<double>(pred.size()));
  }
  return fit;
}

// --- Latent-space optimization --------------------------------------------

struct LsoOptions {
  double alpha = 0.5;
  int steps = 10;
  std::optional<double> delta;
};

struct LsoResult {
  std::string start_smiles;
  std::string best_smiles;
  double score_before = 0;
  double score_after = 0;
  double similarity = 1;
  bool success = false;
};

/// Gradient ascent z ← z + α∇h(z) from each start; every iterate is decoded,
/// corrected and scored, and the best candidate satisfying the similarity
/// constraint (when set) is kept. The starting point is the decoded start.
template <class T>
std::vector<LsoResult> lso(const FlowModel<T>& model, const Surrogate<T>& surrogate, const Scorer& scorer,
                           const std::vector<MolGraph>& starts, const std::vector<Tensor<T>>& start_latents,
                           const Latents<T>& layout, const LsoOptions& opt, int threads = 1) {
  if (starts.size() != start_latents.size()) throw Error(ErrorCode::ShapeMismatch, "one latent per start");
  if (opt.alpha < 0) throw Error(ErrorCode::InvalidConfig, "alpha must be non-negative");
  const auto& table = model.config().elements;
  std::vector<LsoResult> out(starts.size());
  parallel_for(starts.size(), threads, [&](std::size_t i) {
    const MolGraph& ref = starts[i];
    const Fingerprint ref_fp = fingerprint(ref);
    LsoResult r;
    r.start_smiles = canonical_smiles(ref);
    r.score_before = scorer(ref);
    auto consider = [&](const MolGraph& g, bool force) {
      const double sim = tanimoto(fingerprint(g), ref_fp);
      if (opt.delta && sim < *opt.delta) return;
      const double sc = scorer(g);
      if (force || sc > r.score_after) {
        r.best_smiles = canonical_smiles(g);
        r.score_after = sc;
        r.similarity = sim;
      }
    };
    Tensor<T> z = start_latents[i];
    r.best_smiles = r.start_smiles;
    r.score_after = r.score_before;
    r.similarity = 1.0;
    consider(finish_sample(model.decode(layout.unflatten(z)), table).corrected, true);
    for (int s = 0; s < opt.steps; ++s) {
      const Tensor<T> g = surrogate.gradient(z);
      auto zv = z.values();
      const auto gv = g.values();
      for (std::size_t k = 0; k < zv.size(); ++k) zv[k] += static_cast<T>(opt.alpha) * gv[k];
      consider(finish_sample(model.decode(layout.unflatten(z)), table).corrected, false);
    }
    r.success = r.score_after > r.score_before;
    out[i] = std::move(r);
  });
  return out;
}

struct LsoRun {
  std::vector<LsoResult> results;
  SurrogateFit fit;
  double mean_improvement = 0;
  double success_rate = 0;
};

/// Fits a surrogate on the latents of `data` (dequantization seed
/// seed.split(1)), then optimizes from the `starts` lowest-scoring molecules
/// (ties by index).
template <class T>
LsoRun optimize_dataset(const FlowModel<T>& model, const Dataset<T>& data, const std::string& scorer_name,
                        std::size_t starts, const LsoOptions& opt, std::uint64_t seed, int threads = 1) {
  if (data.size() == 0) throw Error(ErrorCode::EmptyBatch, "no molecules to optimize");
  const Scorer scorer = scorer_by_name(scorer_name);
  const auto z = dataset_latents(model, data, Rng(seed).split(1).key(), threads);
  std::vector<double> y;
  for (const auto& g : data.graphs) y.push_back(scorer(g));
  Surrogate<T> s(static_cast<int>(z[0].size()), model.config().surrogate_hidden, Rng(seed).split(2).key());
  LsoRun run;
  run.fit = fit_surrogate(s, z, y, model.config().surrogate_epochs, Rng(seed).split(3).key(),
                          model.config().learning_rate);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
  order.resize(std::min(starts, order.size()));
  std::vector<MolGraph> graphs;
  std::vector<Tensor<T>> latents;
  for (std::size_t i : order) {
    graphs.push_back(data.graphs[i]);
    latents.push_back(z[i]);
  }
  Rng noise = Rng(seed).split(4);
  const auto ex = make_example(data.encoded[0], model.config().noise_scale, noise);
  const auto layout = model.encode(ex.x, ex.a, ex.a_onehot);
  run.results = lso(model, s, scorer, graphs, latents, layout, opt, threads);
  for (const auto& r : run.results) {
    run.mean_improvement += r.score_after - r.score_before;
    run.success_rate += r.success ? 1.0 : 0.0;
  }
  if (!run.results.empty()) {
    run.mean_improvement /= static_cast<double>(run.results.size());
    run.success_rate /= static_cast<double>(run.results.size());
  }
  return run;
}

inline void write_optimized_tsv(std::ostream& os, const std::vector<LsoResult>& results) {
  os << "start_smiles\tbest_smiles\tscore_before\tscore_after\tsimilarity\tsuccess\n";
  char buf[96];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\t%.6f\t%d\n", r.score_before, r.score_after, r.similarity,
                  r.success ? 1 : 0);
    os << r.start_smiles << '\t' << r.best_smiles << buf;
  }
}

}  // namespace molhf
