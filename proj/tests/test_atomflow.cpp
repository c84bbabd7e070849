#include <gtest/gtest.h>

#include <numeric>

#include "molhf/atomflow.hpp"
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

// Random symmetric one-hot bond tensor with 4 channels.
Tensor<double> random_bonds(int n, Rng& rng, double density = 0.4) {
  Tensor<double> a({4, n, n});
  for (int i = 0; i < n; ++i) {
    a.at(0, i, i) = 1;
    for (int j = i + 1; j < n; ++j) {
      const int c = rng.uniform() < density ? 1 + static_cast<int>(rng.below(3)) : 0;
      a.at(c, i, j) = a.at(c, j, i) = 1;
    }
  }
  return a;
}

Tensor<double> flatten_latents(const std::vector<Var<double>>& z) {
  std::vector<double> flat;
  for (const auto& v : z) flat.insert(flat.end(), v.value().storage().begin(), v.value().storage().end());
  const int n = static_cast<int>(flat.size());
  return Tensor<double>({n}, std::move(flat));
}

}  // namespace

TEST(Coarsen, PathExample) {
  Tensor<double> a({1, 4, 4});
  for (int i = 0; i + 1 < 4; ++i) a.at(0, i, i + 1) = a.at(0, i + 1, i) = 1;
  Tensor<double> c = coarsen_structure(a, 2);
  EXPECT_EQ(c.storage(), (std::vector<double>{2, 1, 1, 2}));
}

TEST(Coarsen, EmptyAndBlockDiagonal) {
  Tensor<double> a({2, 6, 6});
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      if (i / 3 == j / 3 && i != j) a.at(1, i, j) = 1;
  Tensor<double> c = coarsen_structure(a, 3);
  for (int p = 0; p < 2; ++p)
    for (int q = 0; q < 2; ++q) {
      EXPECT_EQ(c.at(0, p, q), 0);
      EXPECT_EQ(c.at(1, p, q), p == q ? 6 : 0);
    }
}

TEST(Coarsen, MatchesExplicitTripleProduct) {
  Rng rng(21);
  for (int t = 0; t < 50; ++t) {
    const int k = 2 + static_cast<int>(rng.below(3));
    const int n = k * (1 + static_cast<int>(rng.below(4)));
    Tensor<double> a({3, n, n});
    for (auto& v : a.values()) v = rng.uniform() < 0.5 ? 1 : 0;
    Tensor<double> s = assignment_matrix<double>(n, k);
    Tensor<double> c = coarsen_structure(a, k);
    for (int ch = 0; ch < 3; ++ch) {
      Tensor<double> m({n, n});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) m.at(i, j) = a.at(ch, i, j);
      Tensor<double> ref = matmul(matmul(transpose(s), m), s);
      for (int p = 0; p < n / k; ++p)
        for (int q = 0; q < n / k; ++q) ASSERT_EQ(c.at(ch, p, q), ref.at(p, q));
    }
  }
  EXPECT_THROW(coarsen_structure(Tensor<double>({1, 5, 5}), 2), Error);
}

TEST(Coarsen, PathStaysPath) {
  for (int n : {4, 8, 16}) {
    Tensor<double> a({1, n, n});
    for (int i = 0; i + 1 < n; ++i) a.at(0, i, i + 1) = a.at(0, i + 1, i) = 1;
    Tensor<double> c = coarsen_structure(a, 2);
    for (int p = 0; p < n / 2; ++p)
      for (int q = 0; q < n / 2; ++q) {
        if (p == q) continue;
        EXPECT_EQ(c.at(0, p, q) > 0, std::abs(p - q) == 1);
      }
  }
}

TEST(Merge, RearrangesRows) {
  Tape<double> tape(false);
  Tensor<double> h({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor<double> m = merge_features(tape.constant(h), 2).value();
  EXPECT_EQ(m.shape(), (Shape{2, 4}));
  EXPECT_EQ(m.storage(), (std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(m.at(1, 2), 6);
  EXPECT_EQ(merge_features(tape.constant(h), 1).value(), h);
  EXPECT_EQ(unmerge_features(merge_features(tape.constant(h), 2), 2).value(), h);
  try {
    merge_features(tape.constant(h), 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndivisibleN);
  }
}

TEST(Rgcn, Examples) {
  Tape<double> tape(false);
  Tensor<double> a1({4, 1, 1});
  a1.at(0, 0, 0) = 1;
  Tensor<double> h1({1, 2}, {0.3, -0.4});
  Var<double> zero = tape.constant(Tensor<double>({2, 2}));
  Var<double> out = rgcn_conv(tape.constant(h1), normalized_adjacency(a1), tape.constant(identity<double>(2)),
                              {zero, zero, zero});
  EXPECT_EQ(out.value(), h1);

  Tensor<double> a2({4, 2, 2});
  a2.at(0, 0, 0) = a2.at(0, 1, 1) = 1;
  a2.at(1, 0, 1) = a2.at(1, 1, 0) = 1;
  Var<double> w1 = tape.constant(Tensor<double>({1, 1}, {1.0}));
  Var<double> w0 = tape.constant(Tensor<double>({1, 1}, {0.0}));
  Var<double> z1 = tape.constant(Tensor<double>({1, 1}));
  Tensor<double> y = rgcn_conv(tape.constant(Tensor<double>({2, 1}, {1, 0})), normalized_adjacency(a2), w0,
                               {w1, z1, z1})
                         .value();
  EXPECT_EQ(y.storage(), (std::vector<double>{0, 1}));
}

TEST(Rgcn, IsolatedNodeGetsOnlySelfTerm) {
  Rng rng(22);
  Tensor<double> a({4, 3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a.at(0, i, j) = 1;
  a.at(0, 0, 1) = a.at(0, 1, 0) = 0;
  a.at(2, 0, 1) = a.at(2, 1, 0) = 1;
  Tape<double> tape(false);
  Tensor<double> h = random_tensor({3, 2}, rng);
  Var<double> w0 = tape.constant(random_tensor({2, 2}, rng));
  std::vector<Var<double>> wr;
  for (int c = 0; c < 3; ++c) wr.push_back(tape.constant(random_tensor({2, 2}, rng)));
  Tensor<double> y = rgcn_conv(tape.constant(h), normalized_adjacency(a), w0, wr).value();
  Tensor<double> self = matmul(h, w0.value());
  EXPECT_NEAR(y.at(2, 0), self.at(2, 0), 1e-12);
  EXPECT_NEAR(y.at(2, 1), self.at(2, 1), 1e-12);
  EXPECT_GT(std::abs(y.at(0, 0) - self.at(0, 0)), 1e-9);
}

TEST(GraphCoupling, ZeroInitIdentityAndRoundTrip) {
  Rng rng(23);
  ParameterSet<double> ps;
  GraphCouplingNet<double> net(ps, "gc", 2, 2, 8, 2, 3, rng);
  Tensor<double> a = random_bonds(6, rng);
  auto adj = normalized_adjacency(a);
  Tensor<double> h0 = random_tensor({6, 4}, rng);
  Tape<double> tape(false);
  auto out = graph_coupling_forward(tape.constant(h0), adj, net, false);
  EXPECT_EQ(out.value.value(), h0);
  EXPECT_DOUBLE_EQ(out.logdet.value()[0], 0.0);
  randomize(ps, rng, 0.3);
  for (bool swap : {false, true}) {
    auto r = graph_coupling_forward(tape.constant(h0), adj, net, swap);
    EXPECT_GT(max_abs_diff(r.value.value(), h0), 1e-3);
    EXPECT_LE(max_abs_diff(graph_coupling_inverse(r.value, adj, net, swap).value(), h0), 1e-5);
  }
}

TEST(GraphCoupling, NodePermutationEquivariance) {
  Rng rng(24);
  ParameterSet<double> ps;
  GraphCouplingNet<double> net(ps, "gc", 2, 2, 8, 2, 3, rng);
  randomize(ps, rng, 0.3);
  const int n = 6;
  Tensor<double> a = random_bonds(n, rng);
  Tensor<double> h0 = random_tensor({n, 4}, rng);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
  Tensor<double> hp({n, 4}), ap({4, n, n});
  for (int i = 0; i < n; ++i) {
    const int pi = perm[static_cast<std::size_t>(i)];
    for (int f = 0; f < 4; ++f) hp.at(i, f) = h0.at(pi, f);
    for (int j = 0; j < n; ++j)
      for (int c = 0; c < 4; ++c) ap.at(c, i, j) = a.at(c, pi, perm[static_cast<std::size_t>(j)]);
  }
  Tape<double> tape(false);
  auto y = graph_coupling_forward(tape.constant(h0), normalized_adjacency(a), net, false);
  auto yp = graph_coupling_forward(tape.constant(hp), normalized_adjacency(ap), net, false);
  for (int i = 0; i < n; ++i)
    for (int f = 0; f < 4; ++f)
      EXPECT_NEAR(yp.value.value().at(i, f), y.value.value().at(perm[static_cast<std::size_t>(i)], f), 1e-6);
  EXPECT_NEAR(yp.logdet.value()[0], y.logdet.value()[0], 1e-6);
}

TEST(AtomFlowConfig, Validation) {
  AtomFlowConfig cfg;
  cfg.n = 8;
  cfg.d = 4;
  cfg.coarsen = {2, 2};
  EXPECT_NO_THROW(cfg.validate());
  cfg.coarsen = {3};
  EXPECT_THROW(cfg.validate(), Error);
  cfg.coarsen = {5};
  cfg.n = 10;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.n = 8;
  cfg.d = 3;
  cfg.coarsen = {};
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(AtomFlow, ShapeTrace) {
  Rng rng(25);
  ParameterSet<double> ps;
  AtomFlowConfig cfg;
  cfg.n = 8;
  cfg.d = 4;
  cfg.coarsen = {2, 2};
  AtomFlow<double> flow(ps, cfg, rng);
  EXPECT_EQ(flow.latent_shapes(), (std::vector<Shape>{{8, 2}, {4, 2}, {2, 4}}));
  Tape<double> tape(false);
  auto out = flow.forward(tape.constant(random_tensor({8, 4}, rng)), random_bonds(8, rng),
                          tape.constant(Tensor<double>({1})));
  ASSERT_EQ(out.z.size(), 3u);
  EXPECT_EQ(out.z[0].shape(), (Shape{8, 2}));
  EXPECT_EQ(out.z[1].shape(), (Shape{4, 2}));
  EXPECT_EQ(out.z[2].shape(), (Shape{2, 4}));
  EXPECT_TRUE(std::isfinite(out.logp.value()[0]));
}

TEST(AtomFlow, ZeroInitLogpIsStandardNormal) {
  Rng rng(26);
  ParameterSet<double> ps;
  AtomFlowConfig cfg;
  cfg.n = 8;
  cfg.d = 4;
  cfg.coarsen = {2, 2};
  AtomFlow<double> flow(ps, cfg, rng);
  Tensor<double> x = random_tensor({8, 4}, rng);
  Tape<double> tape(false);
  auto out = flow.forward(tape.constant(x), random_bonds(8, rng), tape.constant(Tensor<double>({1})));
  const Tensor<double> zero(x.shape());
  EXPECT_NEAR(out.logp.value()[0], gaussian_logp(x, zero, zero), 1e-9);
  EXPECT_NEAR(out.logdet.value()[0], 0.0, 1e-9);
}

TEST(AtomFlow, InverseRoundTripAndSampling) {
  Rng rng(27);
  ParameterSet<double> ps;
  AtomFlowConfig cfg;
  cfg.n = 8;
  cfg.d = 4;
  cfg.coarsen = {2, 2};
  AtomFlow<double> flow(ps, cfg, rng);
  Tensor<double> a = random_bonds(8, rng);
  Tape<double> tape(false);
  Var<double> ls = tape.constant(Tensor<double>({1}));
  Tensor<double> cold = flow.inverse(tape, {std::nullopt, std::nullopt, std::nullopt}, a, ls, 1e-300, &rng).value();
  EXPECT_LE(cold.max_abs(), 1e-200);

  randomize(ps, rng, 0.2);
  Tensor<double> x = random_tensor({8, 4}, rng);
  auto out = flow.forward(tape.constant(x), a, ls);
  std::vector<std::optional<Tensor<double>>> z;
  for (const auto& v : out.z) z.emplace_back(v.value());
  EXPECT_LE(max_abs_diff(flow.inverse(tape, z, a, ls, 1.0, nullptr).value(), x), 1e-4);

  std::vector<std::optional<Tensor<double>>> none(3);
  Rng r1(5), r2(5);
  EXPECT_EQ(flow.inverse(tape, none, a, ls, 0.7, &r1).value(), flow.inverse(tape, none, a, ls, 0.7, &r2).value());
}

TEST(AtomFlow, LogdetMatchesFiniteDifference) {
  Rng rng(28);
  ParameterSet<double> ps;
  AtomFlowConfig cfg;
  cfg.n = 4;
  cfg.d = 4;
  cfg.coarsen = {};
  cfg.steps = 1;
  cfg.hidden = 8;
  AtomFlow<double> flow(ps, cfg, rng);
  randomize(ps, rng, 0.3);
  Tensor<double> a = random_bonds(4, rng);
  Tensor<double> x = random_tensor({4, 4}, rng);
  Tape<double> tape(false);
  Var<double> ls = tape.constant(Tensor<double>({1}));
  auto out = flow.forward(tape.constant(x), a, ls);
  const double fd = fd_jacobian_logdet<double>(
      [&](const Tensor<double>& v) {
        Tape<double> t(false);
        return flatten_latents(flow.forward(t.constant(v), a, t.constant(Tensor<double>({1}))).z);
      },
      x);
  EXPECT_LE(relative_error(out.logdet.value()[0], fd, 1e-3), 1e-3);
}
