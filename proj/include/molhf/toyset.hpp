#pragma once

#include <string>
#include <utility>
#include <vector>

#include "molhf/molgraph.hpp"
#include "molhf/rng.hpp"

namespace molhf {

struct ToySetOptions {
  int max_atoms = 16;
  double ring_fraction = 0.5;
  double hetero_prob = 0.15;
  double double_bond_prob = 0.15;
};

/// Random valid chains and rings (ring plus an optional tail) over C, N, O.
inline MolGraph toy_molecule(Rng& rng, const ElementTable& table, const ToySetOptions& opt = {}) {
  std::vector<std::pair<int, int>> edges;
  int atoms = 0;
  if (rng.uniform() < opt.ring_fraction) {
    const int size = 3 + static_cast<int>(rng.below(6));
    const int tail = static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.max_atoms - size + 1)));
    for (int i = 0; i < size; ++i) edges.push_back({i, (i + 1) % size});
    int prev = static_cast<int>(rng.below(static_cast<std::uint64_t>(size)));
    atoms = size;
    for (int i = 0; i < tail; ++i, ++atoms) {
      edges.push_back({prev, atoms});
      prev = atoms;
    }
  } else {
    atoms = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.max_atoms - 1)));
    for (int i = 1; i < atoms; ++i) edges.push_back({i - 1, i});
  }
  std::vector<int> degree(static_cast<std::size_t>(atoms), 0);
  for (auto [a, b] : edges) {
    ++degree[static_cast<std::size_t>(a)];
    ++degree[static_cast<std::size_t>(b)];
  }
  MolGraph g;
  for (int a = 0; a < atoms; ++a) {
    std::string el = "C";
    if (rng.uniform() < opt.hetero_prob) {
      const std::string h = rng.below(2) ? "O" : "N";
      if (table.max_valence(h) >= degree[static_cast<std::size_t>(a)]) el = h;
    }
    g.add_atom(el);
  }
  for (auto [a, b] : edges) g.add_bond(a, b, 1);
  for (const auto& b : std::vector<Bond>(g.bonds())) {
    if (rng.uniform() >= opt.double_bond_prob) continue;
    g.set_bond_order(b.i, b.j, 2);
    if (!check_valence(g, table)) g.set_bond_order(b.i, b.j, 1);
  }
  return g;
}

/// `count` molecules drawn from independent streams of `seed`.
inline std::vector<MolGraph> toy_dataset(std::size_t count, std::uint64_t seed, const ElementTable& table,
                                         const ToySetOptions& opt = {}) {
  std::vector<MolGraph> out;
  const Rng root(seed);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = root.split(i);
    out.push_back(toy_molecule(rng, table, opt));
  }
  return out;
}

}  // namespace molhf
