#include <gtest/gtest.h>

#include "molhf/bondflow.hpp"
#include "molhf/numerics.hpp"

using namespace molhf;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

void randomize(ParameterSet<double>& ps, Rng& rng, double scale) {
  for (auto& p : ps)
    if (p->trainable)
      for (auto& v : p->value.values()) v += scale * rng.normal();
}

Tensor<double> flatten_latents(const std::vector<Var<double>>& z) {
  std::vector<double> flat;
  for (const auto& v : z) flat.insert(flat.end(), v.value().storage().begin(), v.value().storage().end());
  const int n = static_cast<int>(flat.size());
  return Tensor<double>({n}, std::move(flat));
}

}  // namespace

TEST(Cca, SinglePositionAttendsToItself) {
  Rng rng(31);
  ParameterSet<double> ps;
  auto p = CrissCrossParams<double>::make(ps, "cca", 3, 2, rng);
  p.wo->value = identity<double>(3);
  Tensor<double> h = random_tensor({3, 1, 1}, rng);
  Tape<double> tape(false);
  Tensor<double> o = cca(tape.constant(h), p).value();
  Tensor<double> v = matmul(p.wv->value, h.reshaped({3, 1}));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(o[static_cast<std::size_t>(c)], v[static_cast<std::size_t>(c)] + h[static_cast<std::size_t>(c)], 1e-12);
}

TEST(Cca, ZeroValuePathLeavesResidual) {
  Rng rng(32);
  ParameterSet<double> ps;
  auto p = CrissCrossParams<double>::make(ps, "cca", 2, 2, rng);
  for (auto* w : {p.wq, p.wk, p.wv, p.wo}) w->value.fill(0.0);
  Tensor<double> h({2, 3, 3}, 0.7);
  Tape<double> tape(false);
  EXPECT_EQ(cca(tape.constant(h), p).value(), h);
}

TEST(Cca, MatchesDirectAttentionLoop) {
  Rng rng(33);
  ParameterSet<double> ps;
  auto p = CrissCrossParams<double>::make(ps, "cca", 2, 2, rng);
  const int n = 3;
  Tensor<double> h = random_tensor({2, n, n}, rng);
  Tape<double> tape(false);
  Tensor<double> o = cca(tape.constant(h), p).value();
  auto proj = [&](Parameter<double>* w, Parameter<double>* b, int c, int i, int j) {
    double acc = b->value[static_cast<std::size_t>(c)];
    for (int k = 0; k < 2; ++k) acc += w->value.at(c, k) * h.at(k, i, j);
    return acc;
  };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      std::vector<std::pair<int, int>> pos;
      for (int m = 0; m < n; ++m) pos.push_back({i, m});
      for (int r = 0; r < n; ++r)
        if (r != i) pos.push_back({r, j});
      ASSERT_EQ(pos.size(), static_cast<std::size_t>(2 * n - 1));
      std::vector<double> w;
      double z = 0;
      for (auto [pi, pj] : pos) {
        double e = 0;
        for (int c = 0; c < 2; ++c) e += proj(p.wq, p.bq, c, i, j) * proj(p.wk, p.bk, c, pi, pj);
        w.push_back(std::exp(e));
        z += w.back();
      }
      double agg[2] = {0, 0};
      for (std::size_t s = 0; s < pos.size(); ++s)
        for (int c = 0; c < 2; ++c) agg[c] += w[s] / z * proj(p.wv, p.bv, c, pos[s].first, pos[s].second);
      for (int c = 0; c < 2; ++c) {
        double ref = p.bo->value[static_cast<std::size_t>(c)] + h.at(c, i, j);
        for (int k = 0; k < 2; ++k) ref += p.wo->value.at(c, k) * agg[k];
        EXPECT_NEAR(o.at(c, i, j), ref, 1e-10);
      }
    }
}

TEST(CcaNet, ZeroInitAndShapes) {
  Rng rng(34);
  ParameterSet<double> ps;
  CCANet<double> net(ps, "net", 3, 3, 8, 4, rng);
  Tape<double> tape(false);
  auto [s, t] = net(tape.constant(random_tensor({3, 4, 4}, rng)));
  EXPECT_EQ(s.shape(), (Shape{3, 4, 4}));
  EXPECT_EQ(t.shape(), (Shape{3, 4, 4}));
  EXPECT_LE(s.value().max_abs(), 0.0);
  EXPECT_LE(t.value().max_abs(), 0.0);
}

TEST(BondFlow, ShapeTrace) {
  Rng rng(35);
  ParameterSet<double> ps;
  BondFlowConfig cfg;
  cfg.channels = 4;
  cfg.n = 8;
  cfg.blocks = 2;
  cfg.steps = 1;
  cfg.hidden = 8;
  cfg.qk_width = 4;
  BondFlow<double> flow(ps, cfg, rng);
  EXPECT_EQ(flow.latent_shapes(), (std::vector<Shape>{{8, 4, 4}, {32, 2, 2}}));
  Tape<double> tape(false);
  Tensor<double> a = random_tensor({4, 8, 8}, rng);
  auto out = flow.forward(tape.constant(a), tape.constant(Tensor<double>({1})));
  ASSERT_EQ(out.z.size(), 2u);
  EXPECT_EQ(out.z[0].shape(), (Shape{8, 4, 4}));
  EXPECT_EQ(out.z[1].shape(), (Shape{32, 2, 2}));
  EXPECT_EQ(out.z[0].value().size() + out.z[1].value().size(), a.size());
  const Tensor<double> zero(a.shape());
  EXPECT_NEAR(out.logp.value()[0], gaussian_logp(a, zero, zero), 1e-9);
}

TEST(BondFlow, RoundTripAndSampling) {
  Rng rng(36);
  ParameterSet<double> ps;
  BondFlowConfig cfg;
  cfg.n = 8;
  cfg.blocks = 3;
  cfg.steps = 2;
  cfg.hidden = 8;
  cfg.qk_width = 4;
  BondFlow<double> flow(ps, cfg, rng);
  Tape<double> tape(false);
  Var<double> ls = tape.constant(Tensor<double>({1}));
  std::vector<std::optional<Tensor<double>>> none(3);
  EXPECT_LE(flow.inverse(tape, none, ls, 1e-300, &rng).value().max_abs(), 1e-200);
  randomize(ps, rng, 0.05);
  Tensor<double> a = random_tensor({4, 8, 8}, rng);
  auto out = flow.forward(tape.constant(a), ls);
  std::vector<std::optional<Tensor<double>>> z;
  for (const auto& v : out.z) z.emplace_back(v.value());
  EXPECT_LE(max_abs_diff(flow.inverse(tape, z, ls, 1.0, nullptr).value(), a), 1e-4);
  Rng r1(3), r2(3);
  EXPECT_EQ(flow.inverse(tape, none, ls, 0.7, &r1).value(), flow.inverse(tape, none, ls, 0.7, &r2).value());
}

TEST(BondFlow, LogdetMatchesFiniteDifference) {
  Rng rng(37);
  ParameterSet<double> ps;
  BondFlowConfig cfg;
  cfg.channels = 2;
  cfg.n = 4;
  cfg.blocks = 2;
  cfg.steps = 1;
  cfg.hidden = 6;
  cfg.qk_width = 3;
  BondFlow<double> flow(ps, cfg, rng);
  randomize(ps, rng, 0.3);
  Tensor<double> a = random_tensor({2, 4, 4}, rng);
  Tape<double> tape(false);
  auto out = flow.forward(tape.constant(a), tape.constant(Tensor<double>({1})));
  const double fd = fd_jacobian_logdet<double>(
      [&](const Tensor<double>& v) {
        Tape<double> t(false);
        return flatten_latents(flow.forward(t.constant(v), t.constant(Tensor<double>({1}))).z);
      },
      a);
  EXPECT_LE(relative_error(out.logdet.value()[0], fd, 1e-3), 1e-3);
}

TEST(BondFlowConfig, Divisibility) {
  BondFlowConfig cfg;
  cfg.n = 12;
  cfg.blocks = 3;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.n = 16;
  EXPECT_NO_THROW(cfg.validate());
}
