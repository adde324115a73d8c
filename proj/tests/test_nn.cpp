#include "swingup/nn.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "fd_util.hpp"
#include "swingup/checkpoint.hpp"
#include "swingup/optim.hpp"

using namespace swingup;
using testutil::max_rel_err;
using testutil::numeric_grad;
using testutil::random_tensor;

namespace {

TEST(Mlp, ShapesAndDeterminism) {
  Rng r1(42, "init"), r2(42, "init");
  Mlp a = Mlp::init({4, 8, 3}, Act::Tanh, r1);
  Mlp b = Mlp::init({4, 8, 3}, Act::Tanh, r2);
  EXPECT_EQ(a.in_dim(), 4);
  EXPECT_EQ(a.out_dim(), 3);
  EXPECT_EQ(a.layers(), 2u);
  for (std::size_t l = 0; l < a.layers(); ++l)
    for (std::int64_t i = 0; i < a.W[l].numel(); ++i)
      EXPECT_DOUBLE_EQ(a.W[l][i], b.W[l][i]);
  // bound by fan-in scale
  for (std::int64_t i = 0; i < a.W[0].numel(); ++i) EXPECT_LE(std::fabs(a.W[0][i]), 0.5);
}

TEST(Mlp, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  for (Act act : {Act::Tanh, Act::Softplus}) {
    Mlp m = Mlp::init({3, 5, 2}, act, rng);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor w = random_tensor({4, 2}, rng);

    Tape t;
    BoundMlp bm = bind(t, m, true);
    Var vx = t.leaf(x, true);
    Var loss = t.sum_all(t.mul(mlp_forward(t, bm, vx), t.constant(w)));
    Grads g = t.backward(loss);

    // input gradient
    auto fx = [&](const Tensor& xv) {
      Tape tt;
      double s = 0.0;
      const Tensor& out = tt.val(mlp_forward(tt, m, tt.constant(xv), false));
      for (std::int64_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
      return s;
    };
    EXPECT_LT(max_rel_err(g.get(vx), numeric_grad(fx, x)), 1e-6);

    // every parameter gradient
    auto params = m.params();
    auto vars = bm.param_vars();
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto fp = [&](const Tensor& pv) {
        Mlp mm = m;
        *mm.params()[p] = pv;
        Tape tt;
        double s = 0.0;
        const Tensor& out = tt.val(mlp_forward(tt, mm, tt.constant(x), false));
        for (std::int64_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
        return s;
      };
      EXPECT_LT(max_rel_err(g.get(vars[p]), numeric_grad(fp, *params[p])), 1e-6)
          << "param " << p;
    }
  }
}

TEST(Mlp, NonFiniteRaisesWithLayerIndex) {
  Rng rng(6);
  Mlp m = Mlp::init({2, 3, 1}, Act::Tanh, rng);
  m.W[1][0] = std::numeric_limits<double>::infinity();
  Tape t;
  Var x = t.constant(Tensor::row({0.5, -0.5}));
  try {
    mlp_forward(t, m, x, false);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(AdamW, HandComputedSteps) {
  Tensor p = Tensor::vec({1.0});
  AdamW opt(0.1, 0.0);
  opt.attach({&p});
  Tensor g = Tensor::vec({0.5});
  opt.step({&p}, {g});
  // m=0.05, v=2.5e-4, mhat=0.5, vhat=0.25, p = 1 - 0.1*0.5/(0.5+1e-8)
  EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  double p1 = p[0];
  opt.step({&p}, {g});
  // t=2: m=0.095, v=4.9975e-4, mhat=0.095/0.19=0.5, vhat=v/(1-0.999^2)
  double vhat = (0.999 * 2.5e-4 + 0.001 * 0.25) / (1.0 - 0.999 * 0.999);
  EXPECT_NEAR(p[0], p1 - 0.1 * 0.5 / (std::sqrt(vhat) + 1e-8), 1e-12);
}

TEST(AdamW, DecoupledWeightDecay) {
  Tensor p = Tensor::vec({2.0});
  AdamW opt(0.1, 0.01);
  opt.attach({&p});
  opt.step({&p}, {Tensor::vec({0.0})});
  // zero gradient: only decay moves the weight
  EXPECT_NEAR(p[0], 2.0 - 0.1 * 0.01 * 2.0, 1e-15);
}

TEST(AdamW, CountMismatchThrows) {
  Tensor p = Tensor::vec({1.0});
  AdamW opt;
  opt.attach({&p});
  EXPECT_THROW(opt.step({&p}, {}), ContractError);
}

TEST(ClipGradNorm, ScalesOnlyAboveThreshold) {
  std::vector<Tensor> gs;
  gs.push_back(Tensor::vec({3.0}));
  gs.push_back(Tensor::vec({4.0}));
  double norm = clip_grad_norm(gs, 100.0);
  EXPECT_DOUBLE_EQ(norm, 5.0);
  EXPECT_DOUBLE_EQ(gs[0][0], 3.0);  // untouched below threshold

  double norm2 = clip_grad_norm(gs, 1.0);
  EXPECT_DOUBLE_EQ(norm2, 5.0);
  EXPECT_NEAR(gs[0][0], 0.6, 1e-15);
  EXPECT_NEAR(gs[1][0], 0.8, 1e-15);
  std::vector<Tensor> bad;
  bad.push_back(Tensor::vec({std::numeric_limits<double>::quiet_NaN()}));
  EXPECT_THROW(clip_grad_norm(bad, 1.0), NumericError);
}

TEST(Checkpoint, RoundTrip) {
  std::string path = std::filesystem::temp_directory_path() / "swup_test.ckpt";
  Rng rng(9);
  Container c;
  c.meta = "{\"kind\":\"test\",\"episode\":7}";
  c.tensors.emplace_back("actor.layer0.weight", random_tensor({3, 4}, rng));
  c.tensors.emplace_back("steps", Tensor::scalar(123.0));
  c.blobs.emplace_back("rng.state", std::string("12345 678 rng"));
  save_container(path, c);

  Container r = load_container(path);
  EXPECT_EQ(r.meta, c.meta);
  EXPECT_EQ(r.tensors.size(), 2u);
  const Tensor& w = r.tensor("actor.layer0.weight");
  EXPECT_EQ(w.shape(), c.tensors[0].second.shape());
  for (std::int64_t i = 0; i < w.numel(); ++i)
    EXPECT_DOUBLE_EQ(w[i], c.tensors[0].second[i]);  // bit-exact
  ASSERT_NE(r.blob("rng.state"), nullptr);
  EXPECT_EQ(*r.blob("rng.state"), "12345 678 rng");
  EXPECT_THROW(r.tensor("missing"), LoadError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  std::string path = std::filesystem::temp_directory_path() / "swup_corrupt.ckpt";
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint at all";
  }
  EXPECT_THROW(load_container(path), LoadError);
  EXPECT_THROW(load_container("/nonexistent/nope.ckpt"), LoadError);
  std::filesystem::remove(path);
}

TEST(Rng, StreamsAreIndependentAndRestorable) {
  Rng a(1, "alpha"), b(1, "beta"), a2(1, "alpha");
  EXPECT_NE(a.uniform(0, 1), b.uniform(0, 1));
  double second = a.uniform(0, 1);
  a2.uniform(0, 1);
  EXPECT_DOUBLE_EQ(second, a2.uniform(0, 1));

  std::string st = a.save_state();
  double next = a.uniform(0, 1);
  Rng c;
  c.load_state(st);
  EXPECT_DOUBLE_EQ(c.uniform(0, 1), next);
}

}  // namespace
