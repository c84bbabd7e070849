#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "molhf/conformance.hpp"
#include "molhf/toyset.hpp"
#include "molhf/training.hpp"

using namespace molhf;

namespace {

Config small_config() {
  Config c = preset_config("toy");
  c.n = 8;
  c.atom.coarsen = {2};
  c.atom.hidden = 8;
  c.bond.blocks = 2;
  c.bond.hidden = 8;
  c.bond.qk_width = 4;
  c.batch_size = 4;
  c.sync();
  return c;
}

std::vector<std::string> small_smiles() { return {"CC", "CCO", "C=CN", "C1CC1", "CC(C)O", "N#CC", "OCCO", "CCCCC"}; }

std::string temp_prefix(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("molhf_" + name)).string();
}

}  // namespace

TEST(Config, PresetsValidate) {
  for (const char* name : {"zinc-like", "polymer-like", "toy"}) {
    Config c = preset_config(name);
    EXPECT_NO_THROW(c.validate()) << name;
  }
  Config z = preset_config("zinc-like");
  EXPECT_EQ(z.n, 40);
  EXPECT_EQ(z.elements.size(), 9);
  EXPECT_EQ(z.bond.blocks, 3);
  EXPECT_DOUBLE_EQ(z.learning_rate, 1e-3);
  EXPECT_EQ(z.batch_size, 256);
  EXPECT_EQ(z.epochs, 100);
  EXPECT_EQ(preset_config("polymer-like").n, 128);
  EXPECT_EQ(preset_config("polymer-like").epochs, 200);
  EXPECT_THROW(preset_config("qm9"), Error);
}

TEST(Config, JsonOverridesAndRejectsUnknownKeys) {
  auto j = nlohmann::json::parse(R"({"preset": "toy", "n": 8, "atom": {"coarsen": [2]}, "bond": {"blocks": 2},
                                     "train": {"epochs": 3, "seed": 11}})");
  Config c = config_from_json(j);
  EXPECT_EQ(c.n, 8);
  EXPECT_EQ(c.atom.n, 8);
  EXPECT_EQ(c.bond.n, 8);
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.seed, 11u);
  auto expect_invalid = [](const char* text) {
    try {
      config_from_json(nlohmann::json::parse(text));
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidConfig) << text;
    }
  };
  expect_invalid(R"({"nn": 3})");
  expect_invalid(R"({"atom": {"layers": 3}})");
  expect_invalid(R"({"n": 12})");
  expect_invalid(R"({"n": "sixteen"})");
  Config back = config_from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Config, NoiseScaleOutOfRange) {
  try {
    config_from_json(nlohmann::json::parse(R"({"train": {"noise_scale": 1.0}})"));
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadNoiseScale);
  }
}

TEST(Dequantize, ErrorsAndArgmaxRecovery) {
  const Config cfg = preset_config("toy");
  const auto g = parse_smiles("C1=CC=CN1", cfg.elements);
  const auto e = encode<double>(g, cfg.n, cfg.d_pad, cfg.elements);
  Rng rng(5);
  for (double c : {0.0, 1.0, -0.1, 1.5}) {
    try {
      dequantize(e, c, rng);
      ADD_FAILURE() << c;
    } catch (const Error& err) {
      EXPECT_EQ(err.code(), ErrorCode::BadNoiseScale);
    }
  }
  for (double c : {0.9, 0.999, 1e-6}) {
    auto dq = dequantize(e, c, rng);
    EXPECT_EQ(decode(dq.x, dq.a, cfg.elements), g) << c;
    EXPECT_EQ(onehot_bonds(dq.a), e.a);
  }
}

TEST(Dequantize, NoiseMeanIsHalfScale) {
  EncodedGraph<double> e{Tensor<double>({1000, 100}), Tensor<double>({4, 50, 50})};
  Rng rng(6);
  auto dq = dequantize(e, 0.9, rng);
  double sum = 0;
  std::size_t count = 0;
  for (auto* t : {&dq.x, &dq.a})
    for (double v : t->values()) {
      sum += v;
      ++count;
    }
  ASSERT_GE(count, 100000u);
  EXPECT_NEAR(sum / static_cast<double>(count), 0.45, 0.45 * 0.02);
}

TEST(Model, ZeroInitNllIsStandardNormal) {
  FlowModel<double> model(small_config());
  Rng rng(7);
  const auto& c = model.config();
  Tensor<double> x({c.n, c.d_pad}), a({4, c.n, c.n});
  for (auto* t : {&x, &a})
    for (auto& v : t->values()) v = rng.normal();
  Tape<double> tape(false);
  const double nll = model.nll(tape, x, a, onehot_bonds(a)).value()[0];
  const Tensor<double> zx(x.shape()), za(a.shape());
  EXPECT_NEAR(nll, -(gaussian_logp(x, zx, zx) + gaussian_logp(a, za, za)), 1e-9);
}

TEST(Model, BatchMeanUnchangedByDuplication) {
  FlowModel<double> model(small_config());
  const auto data = make_dataset<double>(small_smiles(), model.config());
  Rng rng(8);
  std::vector<Example<double>> batch;
  for (std::size_t i = 0; i < 3; ++i) batch.push_back(make_example(data.encoded[i], 0.9, rng));
  auto doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  EXPECT_NEAR(batch_nll(model, batch, false), batch_nll(model, doubled, false), 1e-10);
}

TEST(Model, EncodeDecodeRoundTripAndLatentPacking) {
  FlowModel<double> model(small_config());
  const auto data = make_dataset<double>(small_smiles(), model.config());
  Rng rng(9);
  std::vector<Example<double>> ex;
  for (const auto& e : data.encoded) ex.push_back(make_example(e, 0.9, rng));
  std::vector<std::array<const Tensor<double>*, 3>> view;
  for (const auto& e : ex) view.push_back({&e.x, &e.a, &e.a_onehot});
  model.data_init(view);
  EXPECT_TRUE(model.initialized());
  detail::perturb(model.params(), rng, 0.02);
  for (const auto& e : ex) {
    const auto z = model.encode(e.x, e.a, e.a_onehot);
    const auto flat = z.flatten();
    EXPECT_EQ(flat.size(), e.x.size() + e.a.size());
    const auto z2 = z.unflatten(flat);
    for (std::size_t l = 0; l < z.bond.size(); ++l) EXPECT_EQ(z2.bond[l], z.bond[l]);
    for (std::size_t l = 0; l < z.atom.size(); ++l) EXPECT_EQ(z2.atom[l], z.atom[l]);
    const auto back = model.decode(z);
    EXPECT_LE(max_abs_diff(back.x, e.x), 1e-6);
    EXPECT_LE(max_abs_diff(back.a, e.a), 1e-6);
    EXPECT_EQ(back.a_onehot, e.a_onehot);
  }
}

TEST(Model, SamplingIsSeededAndColdLimitCollapses) {
  FlowModel<double> model(small_config());
  Rng r1(3), r2(3);
  const auto s1 = model.sample(0.7, r1);
  const auto s2 = model.sample(0.7, r2);
  EXPECT_EQ(s1.x, s2.x);
  EXPECT_EQ(s1.a, s2.a);
  Rng r3(4), r4(5);
  EXPECT_LE(max_abs_diff(model.sample(1e-300, r3).a, model.sample(1e-300, r4).a), 1e-200);
}

TEST(Adam, MatchesHandComputedFirstStep) {
  ParameterSet<double> ps;
  auto& p = ps.add("w", Tensor<double>({2}, std::vector<double>{1.0, -2.0}));
  p.grad = Tensor<double>({2}, std::vector<double>{0.5, -4.0});
  Adam<double> adam(ps, 0.1);
  adam.step();
  // First bias-corrected step moves each entry by lr·sign(g) up to ε.
  EXPECT_NEAR(p.value[0], 0.9, 1e-6);
  EXPECT_NEAR(p.value[1], -1.9, 1e-6);
  EXPECT_EQ(adam.state().t, 1);
}

TEST(Training, NllDecreasesOnTinySet) {
  Config cfg = small_config();
  cfg.learning_rate = 3e-3;
  FlowModel<float> model(cfg);
  const auto data = make_dataset<float>(small_smiles(), cfg);
  const auto log = train(model, data, 25, nullptr);
  ASSERT_EQ(log.size(), 25u);
  EXPECT_LT(log.back().nll, log.front().nll);
  EXPECT_EQ(log.back().step, 25 * 2);
}

TEST(Checkpoint, RoundTripAndResume) {
  const Config cfg = small_config();
  const auto data = make_dataset<float>(small_smiles(), cfg);
  const std::string prefix = temp_prefix("ckpt");

  FlowModel<float> straight(cfg);
  const auto full = train(straight, data, 2, nullptr);

  FlowModel<float> first(cfg);
  std::ostringstream log;
  train(first, data, 1, &log, prefix);
  EXPECT_EQ(log.str().substr(0, 24), "epoch\tstep\tnll\tseconds\n1");
  auto ck = load_checkpoint<float>(prefix);
  ASSERT_EQ(ck.model->params().size(), first.params().size());
  for (std::size_t i = 0; i < first.params().size(); ++i)
    EXPECT_EQ(ck.model->params()[i].value, first.params()[i].value) << first.params()[i].name;
  EXPECT_EQ(ck.state.epoch, 1);
  EXPECT_EQ(ck.model->config().to_json(), cfg.to_json());
  const auto resumed = train(*ck.model, data, 1, nullptr, "", ck.state, ck.adam);
  ASSERT_EQ(resumed.size(), 1u);
  EXPECT_EQ(resumed[0].epoch, 2);
  EXPECT_EQ(resumed[0].nll, full[1].nll);
  std::remove((prefix + ".json").c_str());
  std::remove((prefix + ".bin").c_str());
}

TEST(Checkpoint, CorruptBlobAndVersionMismatch) {
  const Config cfg = small_config();
  FlowModel<float> model(cfg);
  const std::string prefix = temp_prefix("bad");
  save_checkpoint(prefix, model, TrainState{}, AdamState<float>{});
  EXPECT_NO_THROW(load_checkpoint<float>(prefix));
  std::filesystem::resize_file(prefix + ".bin", std::filesystem::file_size(prefix + ".bin") - 4);
  try {
    load_checkpoint<float>(prefix);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptBlob);
  }
  save_checkpoint(prefix, model, TrainState{}, AdamState<float>{});
  std::ifstream in(prefix + ".json");
  auto j = nlohmann::json::parse(in);
  in.close();
  j["version"] = 99;
  std::ofstream(prefix + ".json") << j.dump();
  try {
    load_checkpoint<float>(prefix);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
  std::remove((prefix + ".json").c_str());
  std::remove((prefix + ".bin").c_str());
}

TEST(Conformance, EveryLayerPasses) {
  const auto rows = layer_conformance();
  EXPECT_GE(rows.size(), 12u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.pass) << r.layer << " roundtrip " << r.roundtrip_error << " logdet " << r.logdet << " vs "
                        << r.logdet_fd;
  }
}

TEST(Conformance, MicroModelGradient) {
  const auto g = gradient_check();
  EXPECT_LE(g.parameters, 500u);
  EXPECT_GE(g.parameters, 100u);
  EXPECT_LE(g.max_rel_error, 1e-3) << g.worst;
}

TEST(ToySet, ValidBoundedAndDeterministic) {
  const Config cfg = preset_config("toy");
  const auto a = toy_dataset(300, 17, cfg.elements);
  const auto b = toy_dataset(300, 17, cfg.elements);
  EXPECT_EQ(a, b);
  int rings = 0;
  for (const auto& g : a) {
    EXPECT_TRUE(check_valence(g, cfg.elements));
    EXPECT_LE(g.num_atoms(), 16);
    EXPECT_GE(g.num_atoms(), 2);
    if (static_cast<int>(g.bonds().size()) >= g.num_atoms()) ++rings;
  }
  EXPECT_GT(rings, 60);
  EXPECT_LT(rings, 240);
}
