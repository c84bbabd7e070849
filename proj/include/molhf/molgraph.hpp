#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "molhf/error.hpp"
#include "molhf/tensor.hpp"

namespace molhf {

/// Element symbols with their maximum valence. Position in the table is the
/// one-hot channel index.
class ElementTable {
 public:
  ElementTable() = default;
  ElementTable(std::vector<std::string> symbols, std::vector<int> max_valence)
      : symbols_(std::move(symbols)), valence_(std::move(max_valence)) {
    if (symbols_.size() != valence_.size() || symbols_.empty())
      throw Error(ErrorCode::InvalidConfig, "element table needs one valence per symbol");
    std::set<std::string> seen;
    for (const auto& s : symbols_) {
      if (s.empty() || !std::isupper(static_cast<unsigned char>(s[0])) || s.size() > 2 ||
          (s.size() == 2 && !std::islower(static_cast<unsigned char>(s[1]))))
        throw Error(ErrorCode::InvalidConfig, "bad element symbol '" + s + "'");
      if (!seen.insert(s).second) throw Error(ErrorCode::InvalidConfig, "duplicate element " + s);
    }
    for (int v : valence_)
      if (v <= 0) throw Error(ErrorCode::InvalidConfig, "max valence must be positive");
  }

  /// C N O F P S Cl Br I
  static ElementTable zinc() {
    return {{"C", "N", "O", "F", "P", "S", "Cl", "Br", "I"}, {4, 3, 2, 1, 5, 6, 1, 1, 1}};
  }

  static ElementTable from_json(const nlohmann::json& j) {
    if (!j.contains("elements") || !j.contains("max_valence"))
      throw Error(ErrorCode::InvalidConfig, "element table needs 'elements' and 'max_valence'");
    std::vector<std::string> syms = j.at("elements").get<std::vector<std::string>>();
    std::vector<int> val;
    for (const auto& s : syms) {
      if (!j.at("max_valence").contains(s))
        throw Error(ErrorCode::InvalidConfig, "no max_valence for element " + s);
      val.push_back(j.at("max_valence").at(s).get<int>());
    }
    return {std::move(syms), std::move(val)};
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["elements"] = symbols_;
    nlohmann::json v = nlohmann::json::object();
    for (std::size_t i = 0; i < symbols_.size(); ++i) v[symbols_[i]] = valence_[i];
    j["max_valence"] = v;
    return j;
  }

  std::optional<int> index_of(std::string_view sym) const {
    for (std::size_t i = 0; i < symbols_.size(); ++i)
      if (symbols_[i] == sym) return static_cast<int>(i);
    return std::nullopt;
  }

  int max_valence(std::string_view sym) const {
    auto i = index_of(sym);
    if (!i) throw Error(ErrorCode::UnknownElement, std::string(sym));
    return valence_[static_cast<std::size_t>(*i)];
  }

  int size() const { return static_cast<int>(symbols_.size()); }
  const std::string& symbol(int i) const { return symbols_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  bool operator==(const ElementTable&) const = default;

 private:
  std::vector<std::string> symbols_;
  std::vector<int> valence_;
};

struct Bond {
  int i = 0;
  int j = 0;
  int order = 1;
  auto operator<=>(const Bond&) const = default;
};

/// Atoms plus typed bonds; bonds are kept sorted with i < j.
class MolGraph {
 public:
  MolGraph() = default;

  int add_atom(std::string symbol) {
    atoms_.push_back(std::move(symbol));
    return static_cast<int>(atoms_.size()) - 1;
  }

  void add_bond(int a, int b, int order) {
    if (a == b) throw Error(ErrorCode::InvalidMolecule, "self bond on atom " + std::to_string(a));
    if (a < 0 || b < 0 || a >= num_atoms() || b >= num_atoms())
      throw Error(ErrorCode::InvalidMolecule, "bond index out of range");
    if (order < 1 || order > 3) throw Error(ErrorCode::InvalidMolecule, "bond order must be 1..3");
    Bond bd{std::min(a, b), std::max(a, b), order};
    auto it = std::lower_bound(bonds_.begin(), bonds_.end(), bd,
                               [](const Bond& x, const Bond& y) { return std::pair(x.i, x.j) < std::pair(y.i, y.j); });
    if (it != bonds_.end() && it->i == bd.i && it->j == bd.j)
      throw Error(ErrorCode::InvalidMolecule, "duplicate bond " + std::to_string(bd.i) + "-" + std::to_string(bd.j));
    bonds_.insert(it, bd);
  }

  /// 0 when not bonded.
  int bond_order(int a, int b) const {
    const int lo = std::min(a, b), hi = std::max(a, b);
    for (const auto& bd : bonds_)
      if (bd.i == lo && bd.j == hi) return bd.order;
    return 0;
  }

  void set_bond_order(int a, int b, int order) {
    const int lo = std::min(a, b), hi = std::max(a, b);
    for (auto it = bonds_.begin(); it != bonds_.end(); ++it)
      if (it->i == lo && it->j == hi) {
        if (order <= 0)
          bonds_.erase(it);
        else
          it->order = order;
        return;
      }
    if (order > 0) add_bond(a, b, order);
  }

  /// Neighbors in ascending index order.
  std::vector<int> neighbors(int a) const {
    std::vector<int> out;
    for (const auto& bd : bonds_) {
      if (bd.i == a) out.push_back(bd.j);
      if (bd.j == a) out.push_back(bd.i);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  int valence(int a) const {
    int v = 0;
    for (const auto& bd : bonds_)
      if (bd.i == a || bd.j == a) v += bd.order;
    return v;
  }

  int num_atoms() const { return static_cast<int>(atoms_.size()); }
  const std::vector<std::string>& atoms() const { return atoms_; }
  const std::string& atom(int i) const { return atoms_.at(static_cast<std::size_t>(i)); }
  const std::vector<Bond>& bonds() const { return bonds_; }

  bool operator==(const MolGraph&) const = default;

 private:
  std::vector<std::string> atoms_;
  std::vector<Bond> bonds_;
};

/// Connected components, each sorted ascending, ordered by smallest member.
inline std::vector<std::vector<int>> connected_components(const MolGraph& g) {
  const int n = g.num_atoms();
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (const auto& b : g.bonds()) {
    adj[static_cast<std::size_t>(b.i)].push_back(b.j);
    adj[static_cast<std::size_t>(b.j)].push_back(b.i);
  }
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < n; ++s) {
    if (comp[static_cast<std::size_t>(s)] >= 0) continue;
    const int id = static_cast<int>(out.size());
    out.emplace_back();
    std::vector<int> stack{s};
    comp[static_cast<std::size_t>(s)] = id;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      out.back().push_back(u);
      for (int v : adj[static_cast<std::size_t>(u)])
        if (comp[static_cast<std::size_t>(v)] < 0) {
          comp[static_cast<std::size_t>(v)] = id;
          stack.push_back(v);
        }
    }
    std::sort(out.back().begin(), out.back().end());
  }
  return out;
}

inline bool is_connected(const MolGraph& g) {
  return g.num_atoms() > 0 && connected_components(g).size() == 1;
}

/// Subgraph induced by `keep` (kept in the given order).
inline MolGraph induced_subgraph(const MolGraph& g, const std::vector<int>& keep) {
  std::vector<int> where(static_cast<std::size_t>(g.num_atoms()), -1);
  MolGraph out;
  for (int a : keep) where[static_cast<std::size_t>(a)] = out.add_atom(g.atom(a));
  for (const auto& b : g.bonds()) {
    const int x = where[static_cast<std::size_t>(b.i)], y = where[static_cast<std::size_t>(b.j)];
    if (x >= 0 && y >= 0) out.add_bond(x, y, b.order);
  }
  return out;
}

/// New atom k is old atom perm[k].
inline MolGraph reorder(const MolGraph& g, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != g.num_atoms())
    throw Error(ErrorCode::InvalidMolecule, "permutation length mismatch");
  return induced_subgraph(g, perm);
}

// --- SMILES -----------------------------------------------------------------

/// Kekulized organic-subset SMILES: uppercase element symbols (two-letter
/// symbols when present in the table), bonds - = #, branches, ring closures
/// 0-9 and %nn.
inline MolGraph parse_smiles(std::string_view text, const ElementTable& table) {
  MolGraph g;
  int prev = -1;
  int pending = 0;
  std::vector<int> branch;
  std::map<int, std::pair<int, int>> open_rings;  // id -> (atom, bond order)

  auto ring_bond = [&](int id, std::size_t pos) {
    if (prev < 0) throw Error(ErrorCode::UnmatchedRingClosure, "ring digit before any atom at " + std::to_string(pos));
    auto it = open_rings.find(id);
    if (it == open_rings.end()) {
      open_rings[id] = {prev, pending};
    } else {
      const auto [atom, order_open] = it->second;
      if (pending && order_open && pending != order_open)
        throw Error(ErrorCode::UnmatchedRingClosure, "conflicting ring bond symbols for ring " + std::to_string(id));
      const int order = pending ? pending : (order_open ? order_open : 1);
      if (atom == prev || g.bond_order(atom, prev) != 0)
        throw Error(ErrorCode::UnmatchedRingClosure, "ring " + std::to_string(id) + " closes onto a bonded atom");
      g.add_bond(atom, prev, order);
      open_rings.erase(it);
    }
    pending = 0;
  };

  for (std::size_t pos = 0; pos < text.size(); ++pos) {
    const char c = text[pos];
    if (std::isupper(static_cast<unsigned char>(c))) {
      std::string sym(1, c);
      if (pos + 1 < text.size() && std::islower(static_cast<unsigned char>(text[pos + 1]))) {
        std::string two = sym + text[pos + 1];
        if (table.index_of(two)) {
          sym = two;
          ++pos;
        }
      }
      if (!table.index_of(sym)) throw Error(ErrorCode::UnknownElement, "'" + sym + "' in " + std::string(text));
      const int a = g.add_atom(sym);
      if (prev >= 0) g.add_bond(prev, a, pending ? pending : 1);
      pending = 0;
      prev = a;
    } else if (c == '-' || c == '=' || c == '#') {
      if (pending) throw Error(ErrorCode::UnsupportedToken, "consecutive bond symbols at " + std::to_string(pos));
      pending = c == '-' ? 1 : (c == '=' ? 2 : 3);
    } else if (c == '(') {
      if (prev < 0) throw Error(ErrorCode::UnmatchedParenthesis, "branch before any atom");
      branch.push_back(prev);
    } else if (c == ')') {
      if (branch.empty()) throw Error(ErrorCode::UnmatchedParenthesis, "')' at " + std::to_string(pos));
      if (pending) throw Error(ErrorCode::UnsupportedToken, "dangling bond before ')'");
      prev = branch.back();
      branch.pop_back();
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      ring_bond(c - '0', pos);
    } else if (c == '%') {
      if (pos + 2 >= text.size() || !std::isdigit(static_cast<unsigned char>(text[pos + 1])) ||
          !std::isdigit(static_cast<unsigned char>(text[pos + 2])))
        throw Error(ErrorCode::UnsupportedToken, "'%' must be followed by two digits");
      ring_bond((text[pos + 1] - '0') * 10 + (text[pos + 2] - '0'), pos);
      pos += 2;
    } else {
      throw Error(ErrorCode::UnsupportedToken, std::string("'") + c + "' at " + std::to_string(pos) + " in " + std::string(text));
    }
  }
  if (!branch.empty()) throw Error(ErrorCode::UnmatchedParenthesis, "unclosed '(' in " + std::string(text));
  if (!open_rings.empty())
    throw Error(ErrorCode::UnmatchedRingClosure, "ring " + std::to_string(open_rings.begin()->first) + " never closed");
  if (pending) throw Error(ErrorCode::UnsupportedToken, "trailing bond symbol");
  if (g.num_atoms() == 0) throw Error(ErrorCode::EmptyGraph, "no atoms in SMILES");
  return g;
}

namespace detail {

inline std::string bond_symbol(int order) { return order == 2 ? "=" : (order == 3 ? "#" : ""); }

inline std::string ring_label(int id) { return id < 10 ? std::to_string(id) : "%" + std::to_string(id); }

}  // namespace detail

/// SMILES from a depth-first spanning tree rooted at atom 0 (neighbors in
/// ascending index order). `emitted_order`, when given, receives the original
/// index of each atom in output order.
inline std::string write_smiles(const MolGraph& g, std::vector<int>* emitted_order = nullptr) {
  const int n = g.num_atoms();
  if (n == 0) throw Error(ErrorCode::EmptyGraph, "cannot write an empty graph");
  if (!is_connected(g)) throw Error(ErrorCode::DisconnectedGraph, "write_smiles needs a connected graph");

  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (int a = 0; a < n; ++a) adj[static_cast<std::size_t>(a)] = g.neighbors(a);

  // Pass 1: DFS tree and ring-closure edges.
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  std::vector<std::vector<int>> children(static_cast<std::size_t>(n));
  std::vector<std::vector<int>> rings(static_cast<std::size_t>(n));  // ring partners per atom
  std::vector<char> visited(static_cast<std::size_t>(n), 0);
  std::set<std::pair<int, int>> ring_edges;
  auto dfs = [&](auto&& self, int u) -> void {
    visited[static_cast<std::size_t>(u)] = 1;
    for (int v : adj[static_cast<std::size_t>(u)]) {
      if (v == parent[static_cast<std::size_t>(u)]) continue;
      if (!visited[static_cast<std::size_t>(v)]) {
        parent[static_cast<std::size_t>(v)] = u;
        children[static_cast<std::size_t>(u)].push_back(v);
        self(self, v);
      } else {
        auto e = std::pair(std::min(u, v), std::max(u, v));
        if (ring_edges.insert(e).second) {
          rings[static_cast<std::size_t>(u)].push_back(v);
          rings[static_cast<std::size_t>(v)].push_back(u);
        }
      }
    }
  };
  dfs(dfs, 0);

  // Pass 2: emission with lowest-free ring labels.
  std::string out;
  std::vector<char> emitted(static_cast<std::size_t>(n), 0);
  std::map<std::pair<int, int>, int> label_of;
  std::set<int> in_use;
  if (emitted_order) emitted_order->clear();
  auto emit = [&](auto&& self, int u) -> void {
    emitted[static_cast<std::size_t>(u)] = 1;
    if (emitted_order) emitted_order->push_back(u);
    out += g.atom(u);
    auto& partners = rings[static_cast<std::size_t>(u)];
    std::vector<int> closing, opening;
    for (int v : partners) (emitted[static_cast<std::size_t>(v)] ? closing : opening).push_back(v);
    std::sort(closing.begin(), closing.end(), [&](int a, int b) {
      return label_of.at({std::min(a, u), std::max(a, u)}) < label_of.at({std::min(b, u), std::max(b, u)});
    });
    std::sort(opening.begin(), opening.end());
    for (int v : closing) {
      const auto key = std::pair(std::min(u, v), std::max(u, v));
      const int label = label_of.at(key);
      out += detail::ring_label(label);
      in_use.erase(label);
    }
    for (int v : opening) {
      int label = 1;
      while (in_use.count(label)) ++label;
      if (label > 99) throw Error(ErrorCode::InvalidMolecule, "more than 99 open rings");
      in_use.insert(label);
      label_of[{std::min(u, v), std::max(u, v)}] = label;
      out += detail::bond_symbol(g.bond_order(u, v)) + detail::ring_label(label);
    }
    const auto& ch = children[static_cast<std::size_t>(u)];
    for (std::size_t k = 0; k < ch.size(); ++k) {
      const bool last = k + 1 == ch.size();
      if (!last) out += '(';
      out += detail::bond_symbol(g.bond_order(u, ch[k]));
      self(self, ch[k]);
      if (!last) out += ')';
    }
  };
  emit(emit, 0);
  return out;
}

/// Breadth-first order from atom 0, neighbors ascending; remaining components
/// start from their smallest index.
inline std::vector<int> bfs_order(const MolGraph& g) {
  const int n = g.num_atoms();
  std::vector<int> order;
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (int s = 0; s < n; ++s) {
    if (seen[static_cast<std::size_t>(s)]) continue;
    std::queue<int> q;
    q.push(s);
    seen[static_cast<std::size_t>(s)] = 1;
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      order.push_back(u);
      for (int v : g.neighbors(u))
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          q.push(v);
        }
    }
  }
  return order;
}

/// Internal canonical form: SMILES of the BFS-reordered graph.
inline std::string canonical_smiles(const MolGraph& g) { return write_smiles(reorder(g, bfs_order(g))); }

// --- Encoding ---------------------------------------------------------------

constexpr int kBondChannels = 4;  // no-bond, single, double, triple

/// X: n×d one-hot atoms (elements, then a virtual-pad channel, then unused
/// null channels). A: 4×n×n one-hot symmetric bonds with channel 0 = no bond.
template <class T>
struct EncodedGraph {
  Tensor<T> x;
  Tensor<T> a;
  int n() const { return x.dim(0); }
};

inline int pad_channel(const ElementTable& table) { return table.size(); }

template <class T = float>
EncodedGraph<T> encode(const MolGraph& g, int n, int d_pad, const ElementTable& table) {
  if (d_pad < table.size() + 1)
    throw Error(ErrorCode::InvalidConfig, "d_pad must cover the elements plus a pad channel");
  if (g.num_atoms() > n)
    throw Error(ErrorCode::TooManyAtoms, std::to_string(g.num_atoms()) + " atoms > n=" + std::to_string(n));
  EncodedGraph<T> e{Tensor<T>({n, d_pad}), Tensor<T>({kBondChannels, n, n})};
  for (int i = 0; i < n; ++i) {
    int ch = pad_channel(table);
    if (i < g.num_atoms()) {
      auto idx = table.index_of(g.atom(i));
      if (!idx) throw Error(ErrorCode::UnknownElement, g.atom(i));
      ch = *idx;
    }
    e.x.at(i, ch) = 1;
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) e.a.at(0, i, j) = 1;
  for (const auto& b : g.bonds()) {
    e.a.at(0, b.i, b.j) = e.a.at(0, b.j, b.i) = 0;
    e.a.at(b.order, b.i, b.j) = e.a.at(b.order, b.j, b.i) = 1;
  }
  return e;
}

namespace detail {

template <class T>
int argmax_strided(const T* p, int count, std::size_t stride) {
  int best = 0;
  for (int c = 1; c < count; ++c)
    if (p[static_cast<std::size_t>(c) * stride] > p[static_cast<std::size_t>(best) * stride]) best = c;
  return best;
}

}  // namespace detail

/// Per-pair bond channel after channel-wise symmetrization (Ã+Ãᵀ)/2; ties go
/// to the lowest channel.
template <class T>
std::vector<int> bond_argmax(const Tensor<T>& a) {
  const int b = a.dim(0), n = a.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n) * n, 0);
  std::vector<T> sym(static_cast<std::size_t>(b));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      for (int c = 0; c < b; ++c) sym[static_cast<std::size_t>(c)] = (a.at(c, i, j) + a.at(c, j, i)) / T(2);
      out[static_cast<std::size_t>(i) * n + j] = detail::argmax_strided(sym.data(), b, 1);
    }
  return out;
}

/// onehot(argmax(sym(Ã))) as a b×n×n tensor.
template <class T>
Tensor<T> onehot_bonds(const Tensor<T>& a) {
  const int b = a.dim(0), n = a.dim(1);
  const auto idx = bond_argmax(a);
  Tensor<T> out({b, n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out.at(idx[static_cast<std::size_t>(i) * n + j], i, j) = 1;
  return out;
}

struct DecodeOptions {
  /// When every row decodes to a virtual atom, force row 0 to its best element.
  bool keep_one_atom = false;
};

/// Argmax decoding of continuous atom/bond tensors; pad and null channels mark
/// virtual atoms, which are dropped together with their bonds.
template <class T>
MolGraph decode(const Tensor<T>& x, const Tensor<T>& a, const ElementTable& table, DecodeOptions opt = {}) {
  const int n = x.dim(0), d = x.dim(1);
  if (a.rank() != 3 || a.dim(1) != n || a.dim(2) != n)
    throw Error(ErrorCode::ShapeMismatch, "decode: atom rows vs bond tensor " + shape_str(a.shape()));
  std::vector<int> element(static_cast<std::size_t>(n), -1);
  bool any = false;
  for (int i = 0; i < n; ++i) {
    const int ch = detail::argmax_strided(x.data() + static_cast<std::size_t>(i) * d, d, 1);
    if (ch < table.size()) {
      element[static_cast<std::size_t>(i)] = ch;
      any = true;
    }
  }
  if (!any && opt.keep_one_atom)
    element[0] = detail::argmax_strided(x.data(), table.size(), 1);
  MolGraph g;
  std::vector<int> where(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i)
    if (element[static_cast<std::size_t>(i)] >= 0)
      where[static_cast<std::size_t>(i)] = g.add_atom(table.symbol(element[static_cast<std::size_t>(i)]));
  const auto bonds = bond_argmax(a);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const int ch = bonds[static_cast<std::size_t>(i) * n + j];
      const int u = where[static_cast<std::size_t>(i)], v = where[static_cast<std::size_t>(j)];
      if (ch > 0 && ch < kBondChannels && u >= 0 && v >= 0) g.add_bond(u, v, ch);
    }
  return g;
}

// --- Validity ---------------------------------------------------------------

/// Every atom within its max valence and the graph connected.
inline bool check_valence(const MolGraph& g, const ElementTable& table) {
  if (g.num_atoms() == 0) return false;
  for (int a = 0; a < g.num_atoms(); ++a) {
    auto idx = table.index_of(g.atom(a));
    if (!idx || g.valence(a) > table.max_valence(g.atom(a))) return false;
  }
  return is_connected(g);
}

/// Greedy valence repair: repeatedly take the atom with the largest excess
/// (lowest index on ties) and lower its highest-order bond by one (lowest
/// neighbor index on ties; order 1 deletes). Returns the largest connected
/// component, the one with the lowest index on ties.
inline MolGraph correct_validity(const MolGraph& input, const ElementTable& table) {
  if (input.num_atoms() == 0) throw Error(ErrorCode::EmptyGraph, "nothing to correct");
  MolGraph g = input;
  for (;;) {
    int worst = -1, worst_excess = 0;
    for (int a = 0; a < g.num_atoms(); ++a) {
      const int excess = g.valence(a) - table.max_valence(g.atom(a));
      if (excess > worst_excess) {
        worst = a;
        worst_excess = excess;
      }
    }
    if (worst < 0) break;
    int target = -1, target_order = 0;
    for (int v : g.neighbors(worst)) {
      const int o = g.bond_order(worst, v);
      if (o > target_order) {
        target = v;
        target_order = o;
      }
    }
    g.set_bond_order(worst, target, target_order - 1);
  }
  const auto comps = connected_components(g);
  std::size_t best = 0;
  for (std::size_t c = 1; c < comps.size(); ++c)
    if (comps[c].size() > comps[best].size()) best = c;
  return induced_subgraph(g, comps[best]);
}

// --- Metrics ----------------------------------------------------------------

struct GenMetrics {
  double validity = 0;
  double validity_wo_correction = 0;
  double validity_w_filter = 0;
  double uniqueness = 0;
  double novelty = 0;
  double reconstruction = 0;
};

/// One generated graph before and after correction.
struct GeneratedMolecule {
  MolGraph raw;
  std::optional<MolGraph> corrected;
};

/// Validity is measured on corrected graphs, the w/o-correction and filter
/// variants on raw graphs; uniqueness and novelty are over the valid
/// corrected set.
inline GenMetrics compute_metrics(std::span<const GeneratedMolecule> generated, const ElementTable& table,
                                  const std::set<std::string>& train_set, std::size_t recon_ok,
                                  std::size_t recon_total, int filter_threshold = 38) {
  if (generated.empty()) throw Error(ErrorCode::EmptyBatch, "no generated molecules");
  std::size_t valid = 0, valid_raw = 0, valid_filter = 0, novel = 0;
  std::set<std::string> unique;
  for (const auto& m : generated) {
    if (check_valence(m.raw, table)) {
      ++valid_raw;
      if (m.raw.num_atoms() > filter_threshold) ++valid_filter;
    }
    if (m.corrected && check_valence(*m.corrected, table)) {
      ++valid;
      const std::string s = canonical_smiles(*m.corrected);
      unique.insert(s);
      if (!train_set.count(s)) ++novel;
    }
  }
  const double total = static_cast<double>(generated.size());
  GenMetrics r;
  r.validity = static_cast<double>(valid) / total;
  r.validity_wo_correction = static_cast<double>(valid_raw) / total;
  r.validity_w_filter = static_cast<double>(valid_filter) / total;
  r.uniqueness = valid ? static_cast<double>(unique.size()) / static_cast<double>(valid) : 0.0;
  r.novelty = valid ? static_cast<double>(novel) / static_cast<double>(valid) : 0.0;
  r.reconstruction = recon_total ? static_cast<double>(recon_ok) / static_cast<double>(recon_total) : 0.0;
  return r;
}

// --- Dataset files ----------------------------------------------------------

/// One SMILES per line; blank lines and '#' comments are skipped.
inline std::vector<std::string> read_smiles_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

inline ElementTable read_element_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return ElementTable::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
}

}  // namespace molhf
