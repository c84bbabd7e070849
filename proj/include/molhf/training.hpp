#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <cstdio>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "molhf/config.hpp"
#include "molhf/model.hpp"
#include "molhf/molgraph.hpp"

namespace molhf {

/// Parsed, BFS-ordered and encoded molecules.
template <class T>
struct Dataset {
  std::vector<MolGraph> graphs;
  std::vector<std::string> smiles;
  std::vector<EncodedGraph<T>> encoded;

  std::size_t size() const { return graphs.size(); }
};

template <class T = float>
Dataset<T> make_dataset(const std::vector<MolGraph>& graphs, const Config& cfg) {
  Dataset<T> d;
  for (const auto& g0 : graphs) {
    MolGraph g = reorder(g0, bfs_order(g0));
    d.encoded.push_back(encode<T>(g, cfg.n, cfg.d_pad, cfg.elements));
    d.smiles.push_back(write_smiles(g));
    d.graphs.push_back(std::move(g));
  }
  return d;
}

template <class T = float>
Dataset<T> make_dataset(const std::vector<std::string>& smiles, const Config& cfg) {
  std::vector<MolGraph> graphs;
  for (const auto& s : smiles) graphs.push_back(parse_smiles(s, cfg.elements));
  return make_dataset<T>(graphs, cfg);
}

/// X̃ = X + c·U[0,1), Ã likewise.
template <class T>
EncodedGraph<T> dequantize(const EncodedGraph<T>& e, double c, Rng& rng) {
  if (!(c > 0 && c < 1)) throw Error(ErrorCode::BadNoiseScale, "noise scale " + std::to_string(c) + " not in (0, 1)");
  EncodedGraph<T> out = e;
  for (auto* t : {&out.x, &out.a})
    for (auto& v : t->values()) v += static_cast<T>(c * rng.uniform());
  return out;
}

/// One dequantized training example with its discrete bond tensor.
template <class T>
struct Example {
  Tensor<T> x;
  Tensor<T> a;
  Tensor<T> a_onehot;
};

template <class T>
Example<T> make_example(const EncodedGraph<T>& e, double c, Rng& rng) {
  auto dq = dequantize(e, c, rng);
  return {std::move(dq.x), std::move(dq.a), e.a};
}

template <class T>
struct AdamState {
  std::int64_t t = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// Adam over the trainable members of a parameter set.
template <class T>
class Adam {
 public:
  Adam(ParameterSet<T>& ps, double lr, AdamState<T> state = {}, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), state_(std::move(state)) {
    for (auto& p : ps)
      if (p->trainable) params_.push_back(p.get());
    if (state_.m.empty())
      for (auto* p : params_) {
        state_.m.emplace_back(p->value.shape());
        state_.v.emplace_back(p->value.shape());
      }
    if (state_.m.size() != params_.size() || state_.v.size() != params_.size())
      throw Error(ErrorCode::CorruptBlob, "optimizer state does not match the parameters");
  }

  void step() {
    ++state_.t;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(state_.t));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(state_.t));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto val = params_[k]->value.values();
      auto g = params_[k]->grad.values();
      auto m = state_.m[k].values();
      auto v = state_.v[k].values();
      for (std::size_t i = 0; i < val.size(); ++i) {
        m[i] = static_cast<T>(b1_ * m[i] + (1 - b1_) * g[i]);
        v[i] = static_cast<T>(b2_ * v[i] + (1 - b2_) * g[i] * g[i]);
        const double mh = m[i] / c1, vh = v[i] / c2;
        val[i] = static_cast<T>(val[i] - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  const AdamState<T>& state() const { return state_; }

 private:
  double lr_, b1_, b2_, eps_;
  AdamState<T> state_;
  std::vector<Parameter<T>*> params_;
};

struct TrainState {
  int epoch = 0;
  std::int64_t step = 0;
};

struct EpochRecord {
  int epoch = 0;
  std::int64_t step = 0;
  double nll = 0;
  double seconds = 0;
};

/// Mean NLL of a list of examples; gradients are accumulated into the
/// parameters (already scaled by 1/size) when `accumulate` is set.
template <class T>
double batch_nll(const FlowModel<T>& model, const std::vector<Example<T>>& batch, bool accumulate) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "empty batch");
  double total = 0;
  const T w = T(1) / static_cast<T>(batch.size());
  for (const auto& e : batch) {
    Tape<T> tape(accumulate);
    Var<T> loss = model.nll(tape, e.x, e.a, e.a_onehot);
    const double l = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(l)) throw Error(ErrorCode::NonFinite, "training loss");
    total += l;
    if (accumulate) tape.backward(loss, w);
  }
  return total / static_cast<double>(batch.size());
}

/// Minibatch Adam on the dequantized NLL. Noise for molecule i in epoch e is
/// drawn from seed.split(e + 1).split(i); the order comes from seed.split(0).split(e).
template <class T>
class Trainer {
 public:
  Trainer(FlowModel<T>& model, const Dataset<T>& data, TrainState state = {}, AdamState<T> adam = {})
      : model_(model), data_(data), state_(state), adam_(model.params(), model.config().learning_rate, std::move(adam)) {
    if (data_.size() == 0) throw Error(ErrorCode::EmptyBatch, "empty training set");
  }

  std::vector<std::size_t> epoch_order(int epoch) const {
    std::vector<std::size_t> order(data_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng(model_.config().seed).split(0).split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
  }

  Example<T> example(int epoch, std::size_t i) const {
    Rng rng = Rng(model_.config().seed).split(static_cast<std::uint64_t>(epoch) + 1).split(i);
    return make_example(data_.encoded[i], model_.config().noise_scale, rng);
  }

  EpochRecord run_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(state_.epoch);
    const std::size_t bs = static_cast<std::size_t>(model_.config().batch_size);
    double sum = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<Example<T>> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k)
        batch.push_back(example(state_.epoch, order[k]));
      if (!model_.initialized()) {
        std::vector<std::array<const Tensor<T>*, 3>> view;
        for (const auto& e : batch) view.push_back({&e.x, &e.a, &e.a_onehot});
        model_.data_init(view);
      }
      model_.params().zero_grad();
      sum += batch_nll(model_, batch, true) * static_cast<double>(batch.size());
      adam_.step();
      ++state_.step;
    }
    EpochRecord r;
    r.epoch = ++state_.epoch;
    r.step = state_.step;
    r.nll = sum / static_cast<double>(order.size());
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

  const TrainState& state() const { return state_; }
  const AdamState<T>& adam_state() const { return adam_.state(); }

 private:
  FlowModel<T>& model_;
  const Dataset<T>& data_;
  TrainState state_;
  Adam<T> adam_;
};

// --- Checkpoints ------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  std::unique_ptr<FlowModel<T>> model;
  TrainState state;
  AdamState<T> adam;
};

namespace detail {

inline void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
}

inline float get_f32(const std::string& in, std::size_t word) {
  std::uint32_t u = 0;
  for (int b = 0; b < 4; ++b)
    u |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[word * 4 + static_cast<std::size_t>(b)])) << (8 * b);
  return std::bit_cast<float>(u);
}

}  // namespace detail

/// Writes `<prefix>.json` (manifest) and `<prefix>.bin` (little-endian
/// float32 tensors in manifest order).
template <class T>
void save_checkpoint(const std::string& prefix, const FlowModel<T>& model, const TrainState& state,
                     const AdamState<T>& adam) {
  std::string blob;
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  auto add = [&](const std::string& name, const Tensor<T>& t) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (T v : t.values()) detail::put_f32(blob, static_cast<float>(v));
    offset += t.size();
  };
  for (const auto& p : model.params()) add(p->name, p->value);
  std::size_t k = 0;
  for (const auto& p : model.params())
    if (p->trainable) {
      if (k < adam.m.size()) {
        add("adam.m/" + p->name, adam.m[k]);
        add("adam.v/" + p->name, adam.v[k]);
      }
      ++k;
    }
  nlohmann::json manifest = {
      {"version", kCheckpointVersion},
      {"config", model.config().to_json()},
      {"state", {{"epoch", state.epoch}, {"step", state.step}, {"adam_t", adam.t}}},
      {"tensors", index},
      {"floats", offset},
  };
  std::ofstream js(prefix + ".json");
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!js || !bin) throw Error(ErrorCode::IoError, "cannot write checkpoint " + prefix);
  js << manifest.dump(2) << '\n';
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!js || !bin) throw Error(ErrorCode::IoError, "short write on checkpoint " + prefix);
}

template <class T = float>
Checkpoint<T> load_checkpoint(const std::string& prefix) {
  std::ifstream js(prefix + ".json");
  if (!js) throw Error(ErrorCode::IoError, "cannot open " + prefix + ".json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptBlob, prefix + ".json: " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"] != kCheckpointVersion)
    throw Error(ErrorCode::VersionMismatch, "checkpoint version " + manifest.value("version", nlohmann::json()).dump());
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw Error(ErrorCode::IoError, "cannot open " + prefix + ".bin");
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  try {
    const std::size_t floats = manifest.at("floats").get<std::size_t>();
    if (blob.size() != floats * 4)
      throw Error(ErrorCode::CorruptBlob, "blob holds " + std::to_string(blob.size()) + " bytes, expected " +
                                               std::to_string(floats * 4));
    Checkpoint<T> ck;
    ck.model = std::make_unique<FlowModel<T>>(config_from_json(manifest.at("config")));
    const auto& st = manifest.at("state");
    ck.state.epoch = st.at("epoch").get<int>();
    ck.state.step = st.at("step").get<std::int64_t>();
    ck.adam.t = st.at("adam_t").get<std::int64_t>();
    std::map<std::string, std::pair<Shape, std::size_t>> entries;
    for (const auto& e : manifest.at("tensors"))
      entries[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()};
    auto fetch = [&](const std::string& name, Tensor<T>& dst) {
      auto it = entries.find(name);
      if (it == entries.end()) throw Error(ErrorCode::CorruptBlob, "missing tensor " + name);
      if (it->second.first != dst.shape()) throw Error(ErrorCode::CorruptBlob, "shape mismatch for " + name);
      if (it->second.second + dst.size() > floats) throw Error(ErrorCode::CorruptBlob, "offset out of range for " + name);
      auto vals = dst.values();
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<T>(detail::get_f32(blob, it->second.second + i));
    };
    for (auto& p : ck.model->params()) fetch(p->name, p->value);
    bool has_adam = false;
    for (const auto& e : entries) has_adam = has_adam || e.first.starts_with("adam.");
    if (has_adam)
      for (auto& p : ck.model->params())
        if (p->trainable) {
          ck.adam.m.emplace_back(p->value.shape());
          ck.adam.v.emplace_back(p->value.shape());
          fetch("adam.m/" + p->name, ck.adam.m.back());
          fetch("adam.v/" + p->name, ck.adam.v.back());
        }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptBlob, prefix + ".json: " + e.what());
  }
}

/// Runs `epochs` more epochs, appending one TSV row per epoch to `log` and
/// writing a checkpoint after each epoch when `ckpt_prefix` is non-empty.
template <class T>
std::vector<EpochRecord> train(FlowModel<T>& model, const Dataset<T>& data, int epochs, std::ostream* log,
                               const std::string& ckpt_prefix = "", TrainState state = {}, AdamState<T> adam = {},
                               const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  Trainer<T> trainer(model, data, state, std::move(adam));
  std::vector<EpochRecord> out;
  if (log && state.epoch == 0) *log << "epoch\tstep\tnll\tseconds\n";
  for (int e = 0; e < epochs; ++e) {
    out.push_back(trainer.run_epoch());
    const auto& r = out.back();
    if (log) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%d\t%lld\t%.6f\t%.3f\n", r.epoch, static_cast<long long>(r.step), r.nll, r.seconds);
      *log << buf << std::flush;
    }
    if (!ckpt_prefix.empty()) save_checkpoint(ckpt_prefix, model, trainer.state(), trainer.adam_state());
    if (on_epoch) on_epoch(r);
  }
  return out;
}

}  // namespace molhf
