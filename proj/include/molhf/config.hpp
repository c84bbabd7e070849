#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "json.hpp"

#include "molhf/atomflow.hpp"
#include "molhf/bondflow.hpp"
#include "molhf/molgraph.hpp"

namespace molhf {

/// Everything needed to rebuild a model and rerun training.
struct Config {
  std::string preset = "toy";
  ElementTable elements = ElementTable::zinc();
  int n = 16;
  int d_pad = 16;
  AtomFlowConfig atom;
  BondFlowConfig bond;
  double learning_rate = 1e-3;
  int batch_size = 256;
  int epochs = 100;
  double noise_scale = 0.9;
  std::uint64_t seed = 0;
  int filter_threshold = 38;
  int lso_steps = 10;
  int surrogate_epochs = 5;
  int surrogate_hidden = 32;

  /// Copies n, d_pad and the bond channel count into the flow sub-configs.
  void sync() {
    atom.n = n;
    atom.d = d_pad;
    atom.bond_channels = kBondChannels;
    bond.n = n;
    bond.channels = kBondChannels;
  }

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (d_pad < elements.size() + 1) bad("d_pad must be at least |elements| + 1");
    if (!(learning_rate > 0)) bad("learning_rate must be positive");
    if (batch_size <= 0 || epochs < 0) bad("batch_size must be positive and epochs non-negative");
    if (lso_steps < 0 || surrogate_epochs < 0 || surrogate_hidden <= 0) bad("optimize settings out of range");
    if (!(noise_scale > 0 && noise_scale < 1))
      throw Error(ErrorCode::BadNoiseScale, "noise_scale must lie in (0, 1)");
    if (atom.n != n || bond.n != n || atom.d != d_pad) bad("flow sizes out of sync with n/d_pad");
    atom.validate();
    bond.validate();
  }

  nlohmann::json to_json() const {
    return {
        {"preset", preset},
        {"elements", elements.to_json()},
        {"n", n},
        {"d_pad", d_pad},
        {"atom", {{"coarsen", atom.coarsen}, {"steps", atom.steps}, {"rgcn_layers", atom.rgcn_layers}, {"hidden", atom.hidden}}},
        {"bond", {{"blocks", bond.blocks}, {"steps", bond.steps}, {"hidden", bond.hidden}, {"qk_width", bond.qk_width}}},
        {"train",
         {{"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"noise_scale", noise_scale},
          {"seed", seed}}},
        {"filter_threshold", filter_threshold},
        {"optimize", {{"steps", lso_steps}, {"surrogate_epochs", surrogate_epochs}, {"surrogate_hidden", surrogate_hidden}}},
    };
  }
};

/// Built-in presets: "zinc-like", "polymer-like" and the small "toy".
inline Config preset_config(const std::string& name) {
  Config c;
  c.preset = name;
  if (name == "zinc-like") {
    c.elements = ElementTable::zinc();
    c.n = 40;
    c.d_pad = 16;
    c.atom.coarsen = {2, 2, 2};
    c.atom.steps = 6;
    c.atom.rgcn_layers = 2;
    c.atom.hidden = 256;
    c.bond.blocks = 3;
    c.bond.steps = 3;
    c.bond.hidden = 256;
    c.bond.qk_width = 32;
    c.epochs = 100;
  } else if (name == "polymer-like") {
    c.elements = ElementTable({"C", "N", "O", "F", "P", "S", "Cl"}, {4, 3, 2, 1, 5, 6, 1});
    c.n = 128;
    c.d_pad = 8;
    c.atom.coarsen = {2, 2, 2, 2, 2};
    c.atom.steps = 8;
    c.atom.rgcn_layers = 4;
    c.atom.hidden = 128;
    c.bond.blocks = 5;
    c.bond.steps = 3;
    c.bond.hidden = 128;
    c.bond.qk_width = 16;
    c.epochs = 200;
  } else if (name == "toy") {
    c.elements = ElementTable({"C", "N", "O"}, {4, 3, 2});
    c.n = 16;
    c.d_pad = 4;
    c.atom.coarsen = {2, 2};
    c.atom.steps = 2;
    c.atom.rgcn_layers = 2;
    c.atom.hidden = 32;
    c.bond.blocks = 3;
    c.bond.steps = 2;
    c.bond.hidden = 32;
    c.bond.qk_width = 8;
    c.batch_size = 32;
    c.epochs = 30;
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown preset '" + name + "'");
  }
  c.sync();
  return c;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + where + it.key() + "'");
  }
}

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

/// Starts from `preset` (default "toy") and applies every override in `j`.
/// "elements" may be an inline table or a path to a JSON table file.
inline Config config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be a JSON object");
  try {
    detail::reject_unknown(j, {"preset", "elements", "n", "d_pad", "atom", "bond", "train", "filter_threshold", "optimize"}, "");
    Config c = preset_config(j.value("preset", std::string("toy")));
    if (j.contains("elements")) {
      const auto& e = j.at("elements");
      c.elements = e.is_string() ? read_element_table(e.get<std::string>()) : ElementTable::from_json(e);
    }
    detail::read_opt(j, "n", c.n);
    detail::read_opt(j, "d_pad", c.d_pad);
    detail::read_opt(j, "filter_threshold", c.filter_threshold);
    if (j.contains("atom")) {
      const auto& a = j.at("atom");
      detail::reject_unknown(a, {"coarsen", "steps", "rgcn_layers", "hidden"}, "atom.");
      detail::read_opt(a, "coarsen", c.atom.coarsen);
      detail::read_opt(a, "steps", c.atom.steps);
      detail::read_opt(a, "rgcn_layers", c.atom.rgcn_layers);
      detail::read_opt(a, "hidden", c.atom.hidden);
    }
    if (j.contains("bond")) {
      const auto& b = j.at("bond");
      detail::reject_unknown(b, {"blocks", "steps", "hidden", "qk_width"}, "bond.");
      detail::read_opt(b, "blocks", c.bond.blocks);
      detail::read_opt(b, "steps", c.bond.steps);
      detail::read_opt(b, "hidden", c.bond.hidden);
      detail::read_opt(b, "qk_width", c.bond.qk_width);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown(t, {"learning_rate", "batch_size", "epochs", "noise_scale", "seed"}, "train.");
      detail::read_opt(t, "learning_rate", c.learning_rate);
      detail::read_opt(t, "batch_size", c.batch_size);
      detail::read_opt(t, "epochs", c.epochs);
      detail::read_opt(t, "noise_scale", c.noise_scale);
      detail::read_opt(t, "seed", c.seed);
    }
    if (j.contains("optimize")) {
      const auto& o = j.at("optimize");
      detail::reject_unknown(o, {"steps", "surrogate_epochs", "surrogate_hidden"}, "optimize.");
      detail::read_opt(o, "steps", c.lso_steps);
      detail::read_opt(o, "surrogate_epochs", c.surrogate_epochs);
      detail::read_opt(o, "surrogate_hidden", c.surrogate_hidden);
    }
    c.sync();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("config: ") + e.what());
  }
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace molhf
