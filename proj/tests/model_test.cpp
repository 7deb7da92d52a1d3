#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "flowkrig/model.hpp"
#include "flowkrig/train.hpp"

using namespace flowkrig;

namespace {

constexpr std::size_t kB = 2, kN = 5, kT = 6, kC = 4;
constexpr double kTol = 1e-4;

// Three eastbound and two westbound sensors 1 km apart.
SensorNetwork toy_network() {
  SensorNetwork net;
  net.sensor_ids = {"e0", "e1", "e2", "w0", "w1"};
  net.positions_m = {0, 1000, 2000, 2000, 1000};
  net.directions = {"E", "E", "E", "W", "W"};
  net.lanes = {3, 4, 3, 2, 3};
  net.edges = {{0, 1, 1000}, {1, 2, 1000}, {3, 4, 1000}};
  net.validate();
  net.derive_upstream_neighbors();
  return net;
}

ModelConfig small_config() {
  ModelConfig c;
  c.diffusion_steps = 2;
  c.hidden_dim = kC;
  c.num_tdcn_layers = 3;
  c.tcn_kernel = 2;
  c.num_tcn_layers = 1;
  c.seq_len = kT;
  return c;
}

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(s));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, std::move(v));
}

// Contracting with fixed random weights keeps every output coordinate in play.
Tensor probe(const Tensor& y, const Tensor& r) { return sum(mul(y, r)); }

struct Fixture {
  SensorNetwork net = toy_network();
  ModelConfig cfg = small_config();
  Rng rng{7};
  ModelState state{cfg, rng};
  GraphContext g;
  Tensor volume, speed;

  Fixture() {
    KernelParams kp = default_kernel_params(travel_distances(net));
    g = make_graph_context(build_adjacency_set(net, kp), net.lanes, cfg.diffusion_steps);
    volume = random_tensor({kB, kN, kT, 1}, rng, 0.0, 1.0);
    speed = random_tensor({kB, kN, kT, 1}, rng, 20.0, 100.0);
    // Nonzero biases so their gradients are not trivially symmetric.
    for (auto& p : state.params())
      if (p.name.ends_with(".b1") || p.name.ends_with(".b2") || p.name == "out.b")
        for (double& x : p.tensor.mutable_values()) x = rng.uniform(-0.3, 0.3);
  }
};

void expect_leaf_ok(const std::function<Tensor()>& loss, Tensor leaf, const std::string& what) {
  const auto r = finite_difference_check(loss, leaf);
  EXPECT_LT(r.max_rel_error, kTol) << what << " worst index " << r.worst_index;
}

}  // namespace

TEST(ModelState, ParameterInventory) {
  const ModelConfig c = small_config();
  Rng rng(1);
  const ModelState s(c, rng);
  const std::size_t C = c.hidden_dim, K = c.diffusion_steps, m = c.num_tdcn_layers;
  const std::size_t expected = 2 * K * C                                         // layer 0
                               + C * C                                           // attention
                               + c.num_tcn_layers * (2 * c.tcn_kernel * C * C + 2 * C)  // gated TCN
                               + c.seq_len * C                                   // SPAM
                               + (m - 1) * (2 * (K + 1) * C * C + C * C)         // stacked layers
                               + (m + 1) * C + 1;                                // fusion
  EXPECT_EQ(s.parameter_count(), expected);
  EXPECT_EQ(s.get("out.w").shape(), (Shape{1, 1, (m + 1) * C, 1}));
  EXPECT_THROW(s.get("nope"), std::out_of_range);

  ModelConfig bad = c;
  bad.topk = c.seq_len + 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_EQ(small_config().effective_topk(), 2u);
}

TEST(ModelGrad, TdcnLayer0) {
  Fixture f;
  Rng rng(11);
  const Tensor r = random_tensor({kB, kN, kT, kC}, rng);
  Tensor x = f.volume.clone();
  auto loss = [&] { return probe(tdcn_layer0(x, f.g, f.state, f.cfg), r); };
  expect_leaf_ok(loss, x, "volume");
  for (const char* n : {"tdcn0.w_f.1", "tdcn0.w_b.1", "tdcn0.w_f.2", "tdcn0.w_b.2"})
    expect_leaf_ok(loss, f.state.param(n).tensor, n);
}

TEST(ModelGrad, Spam) {
  Fixture f;
  Rng rng(12);
  const Tensor r = random_tensor({kB, 1, kN, kN}, rng);
  Tensor v = f.speed.clone();
  Tensor w = f.state.get("spam.w").clone();
  auto loss = [&] { return probe(spam(v, w, f.cfg.leaky_slope), r); };
  expect_leaf_ok(loss, v, "speed");
  expect_leaf_ok(loss, w, "spam.w");
}

TEST(ModelGrad, SpatialConv) {
  Fixture f;
  Rng rng(13);
  Tensor h = random_tensor({kB, kN, kT, kC}, rng);
  Tensor a = softmax_last(random_tensor({kB, 1, kN, kN}, rng));
  const Tensor r = random_tensor({kB, kN, kT, kC}, rng);
  auto loss = [&] { return probe(spatial_conv(h, f.g, a, f.state, 2, f.cfg), r); };
  expect_leaf_ok(loss, h, "h");
  expect_leaf_ok(loss, a, "a_spa");
  for (const char* n : {"tdcn2.w_f.0", "tdcn2.w_b.1", "tdcn2.w_f.2", "tdcn2.w_spa"})
    expect_leaf_ok(loss, f.state.param(n).tensor, n);
}

TEST(ModelGrad, TemporalAttention) {
  Fixture f;
  Rng rng(14);
  Tensor h = random_tensor({kB, kN, kT, kC}, rng);
  Tensor w = f.state.get("tatt.w_t").clone();
  const Tensor r = random_tensor({kB, kN, kT, kC}, rng);
  for (auto scale : {AttentionScale::FrobeniusSq, AttentionScale::SqrtDim}) {
    auto loss = [&] { return probe(temporal_attention(h, w, 3, scale).output, r); };
    expect_leaf_ok(loss, h, "h " + attention_scale_name(scale));
    expect_leaf_ok(loss, w, "w_t " + attention_scale_name(scale));
  }
}

TEST(ModelGrad, GatedTcn) {
  Fixture f;
  Rng rng(15);
  Tensor z = random_tensor({kB, kN, kT, kC}, rng);
  const Tensor r = random_tensor({kB, kN, kT, kC}, rng);
  auto loss = [&] {
    return probe(gated_tcn(z, f.state.get("tcn0.theta1"), f.state.get("tcn0.theta2"), f.state.get("tcn0.b1"),
                           f.state.get("tcn0.b2")),
                 r);
  };
  expect_leaf_ok(loss, z, "z");
  for (const char* n : {"tcn0.theta1", "tcn0.theta2", "tcn0.b1", "tcn0.b2"})
    expect_leaf_ok(loss, f.state.param(n).tensor, n);
}

TEST(ModelGrad, OutputFusion) {
  Fixture f;
  Rng rng(16);
  std::vector<Tensor> layers;
  for (std::size_t i = 0; i <= f.cfg.num_tdcn_layers; ++i) layers.push_back(random_tensor({kB, kN, kT, kC}, rng));
  const Tensor r = random_tensor({kB, kN, kT, 1}, rng);
  auto loss = [&] { return probe(output_fusion(layers, f.state.get("out.w"), f.state.get("out.b"), f.g.lanes), r); };
  expect_leaf_ok(loss, layers[1], "layer 1");
  expect_leaf_ok(loss, f.state.param("out.w").tensor, "out.w");
  expect_leaf_ok(loss, f.state.param("out.b").tensor, "out.b");
}

TEST(ModelGrad, FullModelAndLoss) {
  Fixture f;
  Rng rng(17);
  const Tensor truth = random_tensor({kB, kN, kT, 1}, rng, 0.0, 1.0);
  const MaskedInput masked = mask_nodes(truth, 2, rng);
  auto loss = [&] {
    return total_loss(truth, model_forward(masked.input, f.speed, f.g, f.state, f.cfg), 0.5).total;
  };
  for (auto& p : f.state.params()) expect_leaf_ok(loss, p.tensor, p.name);
}

TEST(Model, SpamRowsAreDistributions) {
  Fixture f;
  const Tensor a = spam(f.speed, f.state.get("spam.w"), f.cfg.leaky_slope);
  ASSERT_EQ(a.shape(), (Shape{kB, 1, kN, kN}));
  for (std::size_t b = 0; b < kB; ++b)
    for (std::size_t i = 0; i < kN; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < kN; ++j) {
        EXPECT_GT(a.at(b, 0, i, j), 0.0);
        s += a.at(b, 0, i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Model, SpamFavorsSimilarSpeedPatterns) {
  // Node 1 repeats node 0's speed shape at a different level; node 2 runs opposite.
  Tensor v({1, 3, 4, 1}, std::vector<double>{60, 80, 100, 80, 30, 40, 50, 40, 100, 80, 60, 80});
  const Tensor w({1, 1, 4, 4}, std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  const Tensor a = spam(v, w, 0.2);
  EXPECT_GT(a.at(0, 0, 0, 1), a.at(0, 0, 0, 2));
}

TEST(Model, AttentionRowsSumToOneAndIgnoreTheFuture) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor h = random_tensor({kB, kN, kT, kC}, rng);
    const Tensor w = random_tensor({1, 1, kC, kC}, rng);
    for (std::size_t k : {1u, 2u, 6u}) {
      const auto out = temporal_attention(h, w, k, trial % 2 ? AttentionScale::SqrtDim : AttentionScale::FrobeniusSq);
      for (std::size_t b = 0; b < kB; ++b)
        for (std::size_t n = 0; n < kN; ++n)
          for (std::size_t i = 0; i < kT; ++i) {
            double s = 0.0;
            std::size_t nonzero = 0;
            for (std::size_t j = 0; j < kT; ++j) {
              const double a = out.weights.at(b, n, i, j);
              if (j > i) ASSERT_EQ(a, 0.0);
              if (a != 0.0) ++nonzero;
              s += a;
            }
            EXPECT_NEAR(s, 1.0, 1e-9);
            EXPECT_LE(nonzero, std::min(k, i + 1));
          }
    }
  }
}

TEST(Model, LaneDoublingHalvesLayerZero) {
  Fixture f;
  const Tensor base = tdcn_layer0(f.volume, f.g, f.state, f.cfg);
  GraphContext g2 = f.g;
  g2.lanes = mul_scalar(f.g.lanes, 2.0);
  const Tensor doubled = tdcn_layer0(f.volume, g2, f.state, f.cfg);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(doubled.values()[i], base.values()[i] / 2.0);
}

TEST(Model, ZeroFusionWeightsGiveBiasTimesLanes) {
  Fixture f;
  for (double& x : f.state.param("out.w").tensor.mutable_values()) x = 0.0;
  f.state.param("out.b").tensor.mutable_values()[0] = 0.25;
  const auto out = model_forward(f.volume, f.speed, f.g, f.state, f.cfg).estimate;
  for (std::size_t b = 0; b < kB; ++b)
    for (std::size_t n = 0; n < kN; ++n)
      for (std::size_t t = 0; t < kT; ++t) EXPECT_EQ(out.at(b, n, t, 0), 0.25 * f.net.lanes[n]);
}

TEST(Model, GatedTcnIsCausal) {
  Fixture f;
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = random_tensor({kB, kN, kT, kC}, rng);
    const std::size_t t0 = rng.below(kT);
    Tensor z2 = z.clone();
    for (std::size_t b = 0; b < kB; ++b)
      for (std::size_t n = 0; n < kN; ++n)
        for (std::size_t c = 0; c < kC; ++c) z2.at(b, n, t0, c) += rng.uniform(-5.0, 5.0);
    auto run = [&](const Tensor& in) {
      return gated_tcn(in, f.state.get("tcn0.theta1"), f.state.get("tcn0.theta2"), f.state.get("tcn0.b1"),
                       f.state.get("tcn0.b2"));
    };
    const Tensor y1 = run(z), y2 = run(z2);
    for (std::size_t b = 0; b < kB; ++b)
      for (std::size_t n = 0; n < kN; ++n)
        for (std::size_t t = 0; t < t0; ++t)
          for (std::size_t c = 0; c < kC; ++c) ASSERT_EQ(y1.at(b, n, t, c), y2.at(b, n, t, c));
  }
}

TEST(Model, NodePermutationEquivariance) {
  Fixture f;
  Rng rng(23);
  const KernelParams kp = default_kernel_params(travel_distances(f.net));
  const Tensor base = model_forward(f.volume, f.speed, f.g, f.state, f.cfg).estimate;
  for (int trial = 0; trial < 20; ++trial) {
    const auto perm = rng.sample_without_replacement(kN, kN);  // new i <- old perm[i]
    std::vector<std::size_t> inv(kN);
    for (std::size_t i = 0; i < kN; ++i) inv[perm[i]] = i;
    SensorNetwork pn;
    for (std::size_t i = 0; i < kN; ++i) {
      pn.sensor_ids.push_back(f.net.sensor_ids[perm[i]]);
      pn.positions_m.push_back(f.net.positions_m[perm[i]]);
      pn.directions.push_back(f.net.directions[perm[i]]);
      pn.lanes.push_back(f.net.lanes[perm[i]]);
    }
    for (const auto& e : f.net.edges) pn.edges.push_back({inv[e.from], inv[e.to], e.distance_m});
    pn.derive_upstream_neighbors();
    const GraphContext pg = make_graph_context(build_adjacency_set(pn, kp), pn.lanes, f.cfg.diffusion_steps);
    Tensor pv({kB, kN, kT, 1}), ps({kB, kN, kT, 1});
    for (std::size_t b = 0; b < kB; ++b)
      for (std::size_t i = 0; i < kN; ++i)
        for (std::size_t t = 0; t < kT; ++t) {
          pv.at(b, i, t, 0) = f.volume.at(b, perm[i], t, 0);
          ps.at(b, i, t, 0) = f.speed.at(b, perm[i], t, 0);
        }
    const Tensor out = model_forward(pv, ps, pg, f.state, f.cfg).estimate;
    double worst = 0.0;
    for (std::size_t b = 0; b < kB; ++b)
      for (std::size_t i = 0; i < kN; ++i)
        for (std::size_t t = 0; t < kT; ++t)
          worst = std::max(worst, std::abs(out.at(b, i, t, 0) - base.at(b, perm[i], t, 0)));
    EXPECT_LT(worst, 1e-5) << "trial " << trial;
  }
}

TEST(Model, MaskedLabelsDoNotReachTheForwardPass) {
  Fixture f;
  Rng rng(24);
  const Tensor truth = random_tensor({kB, kN, kT, 1}, rng, 0.0, 1.0);
  const MaskedInput m1 = [&] {
    Rng r(99);
    return mask_nodes(truth, 2, r);
  }();
  Tensor altered = truth.clone();
  for (std::size_t b = 0; b < kB; ++b)
    for (std::size_t n : m1.masked[b])
      for (std::size_t t = 0; t < kT; ++t) altered.at(b, n, t, 0) = 1e6 * (t + 1);
  Rng r2(99);
  const MaskedInput m2 = mask_nodes(altered, 2, r2);
  ASSERT_EQ(m1.masked, m2.masked);
  const Tensor y1 = model_forward(m1.input, f.speed, f.g, f.state, f.cfg).estimate;
  const Tensor y2 = model_forward(m2.input, f.speed, f.g, f.state, f.cfg).estimate;
  ASSERT_EQ(y1.size(), y2.size());
  for (std::size_t i = 0; i < y1.size(); ++i) ASSERT_EQ(y1.values()[i], y2.values()[i]);
}

TEST(Model, ShapeErrorsAreReported) {
  Fixture f;
  const Tensor wrong_len({kB, kN, kT + 1, 1});
  EXPECT_THROW(model_forward(wrong_len, wrong_len, f.g, f.state, f.cfg), TensorError);
  const Tensor wrong_nodes({kB, kN + 1, kT, 1});
  EXPECT_THROW(tdcn_layer0(wrong_nodes, f.g, f.state, f.cfg), TensorError);
  EXPECT_THROW(model_forward(f.volume, wrong_nodes, f.g, f.state, f.cfg), TensorError);
}
