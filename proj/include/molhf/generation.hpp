#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "molhf/model.hpp"
#include "molhf/training.hpp"

namespace molhf {

/// Runs fn(i) for i in [0, count) on `threads` workers with a static split;
/// results must be written by index so the outcome is order independent.
template <class Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), std::max<std::size_t>(count, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Canonical string of a connected graph, or "INVALID".
inline std::string smiles_or_invalid(const MolGraph& g) {
  if (g.num_atoms() == 0 || !is_connected(g)) return "INVALID";
  return canonical_smiles(g);
}

struct SampleRecord {
  MolGraph raw;
  MolGraph corrected;
  bool valid_raw = false;
  std::string raw_smiles;
  std::string corrected_smiles;
};

/// Decoded graph before and after validity correction. An all-virtual
/// decode keeps its best atom so the corrected graph is never empty.
template <class T>
SampleRecord finish_sample(const Decoded<T>& d, const ElementTable& table) {
  SampleRecord r;
  r.raw = decode(d.x, d.a, table);
  r.valid_raw = check_valence(r.raw, table);
  r.raw_smiles = r.valid_raw ? canonical_smiles(r.raw) : "INVALID";
  const MolGraph base = r.raw.num_atoms() ? r.raw : decode(d.x, d.a, table, DecodeOptions{true});
  r.corrected = correct_validity(base, table);
  r.corrected_smiles = canonical_smiles(r.corrected);
  return r;
}

struct SampleReport {
  std::vector<SampleRecord> samples;
  GenMetrics metrics;
  std::uint64_t seed = 0;
  double temperature = 1;
};

/// Sample i uses the stream seed.split(i).
template <class T>
SampleReport sample(const FlowModel<T>& model, std::size_t count, double temperature, std::uint64_t seed,
                    const std::set<std::string>& train_set = {}, int threads = 1) {
  if (!(temperature > 0 && temperature <= 2))
    throw Error(ErrorCode::InvalidConfig, "temperature must lie in (0, 2]");
  if (count == 0) throw Error(ErrorCode::EmptyBatch, "sample count is zero");
  SampleReport rep;
  rep.seed = seed;
  rep.temperature = temperature;
  rep.samples.resize(count);
  const Rng root(seed);
  parallel_for(count, threads, [&](std::size_t i) {
    Rng rng = root.split(i);
    rep.samples[i] = finish_sample(model.sample(static_cast<T>(temperature), rng), model.config().elements);
  });
  std::vector<GeneratedMolecule> gen;
  for (const auto& s : rep.samples) gen.push_back({s.raw, s.corrected});
  rep.metrics = compute_metrics(gen, model.config().elements, train_set, 0, 0, model.config().filter_threshold);
  return rep;
}

struct ReconstructionReport {
  std::size_t ok = 0;
  std::size_t total = 0;
  double fraction() const { return total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0; }
};

/// Molecule i is dequantized with seed.split(i); `latent_shift` is added to
/// every latent coordinate before decoding.
template <class T>
ReconstructionReport reconstruct(const FlowModel<T>& model, const Dataset<T>& data, std::uint64_t seed,
                                 int threads = 1, double latent_shift = 0) {
  if (data.size() == 0) throw Error(ErrorCode::EmptyBatch, "nothing to reconstruct");
  std::vector<char> ok(data.size(), 0);
  const Rng root(seed);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    Rng rng = root.split(i);
    const auto ex = make_example(data.encoded[i], model.config().noise_scale, rng);
    auto z = model.encode(ex.x, ex.a, ex.a_onehot);
    if (latent_shift != 0)
      for (auto* group : {&z.bond, &z.atom})
        for (auto& t : *group)
          for (auto& v : t.values()) v += static_cast<T>(latent_shift);
    const auto d = model.decode(z);
    const MolGraph g = decode(d.x, d.a, model.config().elements);
    ok[i] = smiles_or_invalid(g) == canonical_smiles(data.graphs[i]);
  });
  ReconstructionReport r;
  r.total = data.size();
  r.ok = static_cast<std::size_t>(std::count(ok.begin(), ok.end(), 1));
  return r;
}

struct ResampleRow {
  int level = -1;
  std::size_t index = 0;
  std::string smiles;
};

struct ResampleGrid {
  std::string original;
  std::vector<ResampleRow> rows;
};

/// Level −1 is the plain reconstruction. Level j redraws atom latents 0..j
/// and bond latents 0..j; the coarsest atom level redraws every bond level.
/// Row (j, s) uses the stream seed.split(j + 2).split(s).
template <class T>
ResampleGrid resample_hierarchy(const FlowModel<T>& model, const MolGraph& g0, std::size_t per_level, double temperature,
                                std::uint64_t seed) {
  const auto& cfg = model.config();
  const MolGraph g = reorder(g0, bfs_order(g0));
  const auto enc = encode<T>(g, cfg.n, cfg.d_pad, cfg.elements);
  Rng noise = Rng(seed).split(1);
  const auto ex = make_example(enc, cfg.noise_scale, noise);
  const auto z = model.encode(ex.x, ex.a, ex.a_onehot);
  ResampleGrid grid;
  grid.original = canonical_smiles(g);
  const int atom_levels = static_cast<int>(z.atom.size());
  const int bond_levels = static_cast<int>(z.bond.size());
  grid.rows.push_back({-1, 0, finish_sample(model.decode(z), cfg.elements).corrected_smiles});
  for (int j = 0; j < atom_levels; ++j) {
    std::vector<std::optional<Tensor<T>>> zb, za;
    for (int b = 0; b < bond_levels; ++b)
      zb.push_back(b <= j || j == atom_levels - 1 ? std::nullopt : std::optional<Tensor<T>>(z.bond[b]));
    for (int a = 0; a < atom_levels; ++a)
      za.push_back(a <= j ? std::nullopt : std::optional<Tensor<T>>(z.atom[a]));
    for (std::size_t s = 0; s < per_level; ++s) {
      Rng rng = Rng(seed).split(static_cast<std::uint64_t>(j) + 2).split(s);
      const auto d = model.decode(zb, za, static_cast<T>(temperature), &rng);
      grid.rows.push_back({j, s, finish_sample(d, cfg.elements).corrected_smiles});
    }
  }
  return grid;
}

/// Fragment frequencies of the consecutive k-atom clusters of BFS-ordered
/// graphs; disconnected clusters count each component. Sorted by count
/// (descending) then string.
inline std::vector<std::pair<std::string, std::size_t>> substructure_stats(const std::vector<MolGraph>& graphs, int k) {
  if (k <= 0) throw Error(ErrorCode::InvalidConfig, "cluster size must be positive");
  std::map<std::string, std::size_t> counts;
  for (const auto& g0 : graphs) {
    if (g0.num_atoms() == 0) continue;
    const MolGraph g = is_connected(g0) ? reorder(g0, bfs_order(g0)) : g0;
    for (int c = 0; c + k <= g.num_atoms(); c += k) {
      std::vector<int> keep;
      for (int a = c; a < c + k; ++a) keep.push_back(a);
      const MolGraph frag = induced_subgraph(g, keep);
      for (const auto& comp : connected_components(frag)) ++counts[canonical_smiles(induced_subgraph(frag, comp))];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> out(counts.begin(), counts.end());
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

// --- Reports ------------------------------------------------------------------

inline void write_samples_tsv(std::ostream& os, const SampleReport& rep) {
  os << "index\tsmiles_raw\tsmiles_corrected\tn_atoms\tvalid_uncorrected\n";
  for (std::size_t i = 0; i < rep.samples.size(); ++i) {
    const auto& s = rep.samples[i];
    os << i << '\t' << s.raw_smiles << '\t' << s.corrected_smiles << '\t' << s.raw.num_atoms() << '\t'
       << (s.valid_raw ? 1 : 0) << '\n';
  }
}

inline void write_resample_tsv(std::ostream& os, const ResampleGrid& grid) {
  os << "level_j\tsample_idx\tsmiles\n";
  for (const auto& r : grid.rows) os << r.level << '\t' << r.index << '\t' << r.smiles << '\n';
}

inline void write_metrics(std::ostream& os, const GenMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "validity\t%.4f\nvalidity_wo_correction\t%.4f\nvalidity_w_filter\t%.4f\nuniqueness\t%.4f\n"
                "novelty\t%.4f\nreconstruction\t%.4f\n",
                m.validity, m.validity_wo_correction, m.validity_w_filter, m.uniqueness, m.novelty, m.reconstruction);
  os << buf;
}

}  // namespace molhf
