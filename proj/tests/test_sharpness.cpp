#include "samlab/sharpness.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "testutil.hpp"

using namespace samlab;

namespace {

struct ToyData {
  Model model;
  std::vector<double> X;
  std::vector<int> y;
  int64_t n = 0, dim = 0;

  static ToyData make(uint64_t seed, int64_t n = 64) {
    ToyData d;
    ModelSpec spec;
    spec.architecture = Arch::mlp_bn;
    spec.dims = {4, 5, 3};
    d.model = Model::build(spec, seed);
    Rng rng(seed + 9);
    d.n = n;
    d.dim = 4;
    d.X = testutil::random_vec(rng, n * 4, -1, 1);
    d.y.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) d.y[static_cast<size_t>(i)] = static_cast<int>(i % 3);
    return d;
  }
};

// convex piecewise-linear objective: sum_i c_i |w_i + eps_i| + max_j a_j . (w + eps)
struct PlObjective {
  std::vector<double> w;
  std::vector<double> c;
  std::vector<std::vector<double>> a;

  static PlObjective make(samlab::Rng& rng, size_t dim, size_t n_linear) {
    PlObjective o;
    o.w = testutil::random_vec(rng, dim, -1.2, 1.2);
    o.c = testutil::random_vec(rng, dim, 0.2, 1.5);
    for (size_t j = 0; j < n_linear; ++j) o.a.push_back(testutil::random_vec(rng, dim, -1.0, 1.0));
    return o;
  }

  double loss(const std::vector<double>& eps) const {
    double acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) acc += c[i] * std::abs(w[i] + eps[i]);
    double best = -1e300;
    for (const auto& lin : a) {
      double dot = 0.0;
      for (size_t i = 0; i < w.size(); ++i) dot += lin[i] * (w[i] + eps[i]);
      best = std::max(best, dot);
    }
    return acc + best;
  }

  std::vector<double> grad(const std::vector<double>& eps) const {
    size_t jstar = 0;
    double best = -1e300;
    for (size_t j = 0; j < a.size(); ++j) {
      double dot = 0.0;
      for (size_t i = 0; i < w.size(); ++i) dot += a[j][i] * (w[i] + eps[i]);
      if (dot > best) {
        best = dot;
        jstar = j;
      }
    }
    std::vector<double> g(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
      const double v = w[i] + eps[i];
      g[i] = c[i] * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0)) + a[jstar][i];
    }
    return g;
  }

  BoxObjective box() const {
    return BoxObjective{[this](const std::vector<double>& e) { return loss(e); },
                        [this](const std::vector<double>& e) { return grad(e); }};
  }

  double corner_max(double rho) const {
    const size_t dim = w.size();
    double best = loss(std::vector<double>(dim, 0.0));
    std::vector<double> eps(dim, 0.0);
    for (size_t bits = 0; bits < (size_t{1} << dim); ++bits) {
      for (size_t i = 0; i < dim; ++i) {
        eps[i] = ((bits >> i) & 1 ? 1.0 : -1.0) * rho * std::abs(w[i]);
      }
      best = std::max(best, loss(eps));
    }
    return best;
  }
};

}  // namespace

TEST(Projection, ClampsToAdaptiveBox) {
  std::vector<double> w = {0.5, 0.0, -2.0};
  auto p = project_linf_adaptive({0.02, 5.0, -0.01}, w, 0.01);
  EXPECT_DOUBLE_EQ(p[0], 0.005);
  EXPECT_DOUBLE_EQ(p[1], 0.0);   // degenerate box at w=0
  EXPECT_DOUBLE_EQ(p[2], -0.01);  // already inside, unchanged
}

TEST(Projection, Idempotent) {
  Rng rng(3);
  std::vector<double> w = testutil::random_vec(rng, 10);
  std::vector<double> eps = testutil::random_vec(rng, 10, -0.5, 0.5);
  auto once = project_linf_adaptive(eps, w, 0.1);
  auto twice = project_linf_adaptive(once, w, 0.1);
  EXPECT_EQ(once, twice);
}

TEST(Pgd, FirstIterateIsTheOneStepPoint) {
  Rng rng(5);
  PlObjective o = PlObjective::make(rng, 6, 3);
  const double rho = 0.05;
  auto g0 = o.grad(std::vector<double>(6, 0.0));
  std::vector<double> one_step(6);
  for (size_t i = 0; i < 6; ++i) {
    const double s = g0[i] > 0 ? 1.0 : (g0[i] < 0 ? -1.0 : 0.0);
    one_step[i] = rho * std::abs(o.w[i]) * s;
  }
  one_step = project_linf_adaptive(one_step, o.w, rho);
  PgdResult r1 = pgd_ascend(o.box(), o.w, rho, 1);
  const double expected = std::max(o.loss(std::vector<double>(6, 0.0)), o.loss(one_step));
  EXPECT_DOUBLE_EQ(r1.best_loss, expected);

  PgdResult r20 = pgd_ascend(o.box(), o.w, rho, 20);
  EXPECT_GE(r20.best_loss, r1.best_loss);
}

TEST(Pgd, FeasibleAtEveryEvaluation) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    PlObjective o = PlObjective::make(rng, 8, 4);
    const double rho = 0.07;
    pgd_ascend(o.box(), o.w, rho, 20, [&](const std::vector<double>& eps) {
      for (size_t i = 0; i < eps.size(); ++i) {
        EXPECT_LE(std::abs(eps[i]), rho * std::abs(o.w[i]) + 1e-12);
      }
    });
  }
}

TEST(Pgd, WithinOnePercentOfCornerEnumeration) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const size_t dim = 4 + static_cast<size_t>(rng.below(9));  // 4..12 params
    PlObjective o = PlObjective::make(rng, dim, 3);
    const double rho = 0.2;
    const double oracle = o.corner_max(rho);
    PgdResult r = pgd_ascend(o.box(), o.w, rho, 20);
    EXPECT_LE(r.best_loss, oracle + 1e-9) << "convex function must peak at a corner";
    EXPECT_GE(r.best_loss, oracle - 0.01 * std::abs(oracle)) << "dim " << dim << " trial " << trial;
  }
}

TEST(Sharpness, ZeroRadiusIsExactlyZero) {
  ToyData d = ToyData::make(1);
  SharpnessConfig cfg;
  cfg.rho = 0.0;
  cfg.m = 16;
  cfg.subset_size = 32;
  cfg.steps = 20;
  auto rep = adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg);
  EXPECT_EQ(rep.s_w_m, 0.0);
  for (double v : rep.per_batch) EXPECT_EQ(v, 0.0);
}

TEST(Sharpness, TwentyStepAtLeastOneStep) {
  ToyData d = ToyData::make(2);
  SharpnessConfig cfg;
  cfg.rho = 0.01;
  cfg.m = 16;
  cfg.subset_size = 48;
  cfg.seed = 3;
  cfg.steps = 20;
  auto rep20 = adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg);
  cfg.steps = 1;
  auto rep1 = adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg);
  ASSERT_EQ(rep20.per_batch.size(), rep1.per_batch.size());
  for (size_t i = 0; i < rep20.per_batch.size(); ++i) {
    EXPECT_GE(rep20.per_batch[i], rep1.per_batch[i] - 1e-15);
  }
}

TEST(Sharpness, MonotoneInRho) {
  ToyData d = ToyData::make(4);
  auto eval = [&](double rho) {
    SharpnessConfig cfg;
    cfg.rho = rho;
    cfg.m = 16;
    cfg.subset_size = 64;
    cfg.seed = 5;
    cfg.steps = 20;
    return adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg).s_w_m;
  };
  const double s1 = eval(0.001), s2 = eval(0.003), s3 = eval(0.005);
  EXPECT_LE(s1, s2 + 1e-9);
  EXPECT_LE(s2, s3 + 1e-9);
}

TEST(Sharpness, PerBatchNonNegativeAndMeanConsistent) {
  ToyData d = ToyData::make(6);
  SharpnessConfig cfg;
  cfg.rho = 0.005;
  cfg.m = 8;
  cfg.subset_size = 40;
  cfg.steps = 5;
  auto rep = adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg);
  double acc = 0.0;
  for (double v : rep.per_batch) {
    EXPECT_GE(v, 0.0);
    acc += v;
  }
  EXPECT_DOUBLE_EQ(rep.s_w_m, acc / static_cast<double>(rep.per_batch.size()));
  EXPECT_EQ(rep.per_batch.size(), 5u);  // 40/8 batches
}

TEST(Sharpness, RestoresParametersBitExact) {
  ToyData d = ToyData::make(7);
  const std::vector<double> before = d.model.params;
  SharpnessConfig cfg;
  cfg.rho = 0.01;
  cfg.m = 16;
  cfg.subset_size = 32;
  cfg.steps = 20;
  adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg);
  EXPECT_EQ(d.model.params, before);
}

TEST(Sharpness, SubsetTruncationAndErrors) {
  ToyData d = ToyData::make(8, 32);
  SharpnessConfig cfg;
  cfg.rho = 0.01;
  cfg.m = 10;
  cfg.subset_size = 25;  // truncated to 20
  cfg.steps = 1;
  auto rep = adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg);
  EXPECT_EQ(rep.subset_size, 20);
  EXPECT_EQ(rep.per_batch.size(), 2u);

  cfg.subset_size = 100;  // more than n=32
  EXPECT_THROW(adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg), ConfigError);
  cfg.subset_size = 20;
  cfg.steps = 0;
  EXPECT_THROW(adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg), ConfigError);
}

TEST(Sharpness, ReportJsonSchema) {
  ToyData d = ToyData::make(9);
  SharpnessConfig cfg;
  cfg.rho = 0.002;
  cfg.m = 16;
  cfg.subset_size = 32;
  cfg.steps = 1;
  auto rep = adaptive_sharpness(d.model, d.X.data(), d.y.data(), d.n, d.dim, cfg);
  auto j = to_json(rep);
  for (const char* key : {"rho", "m", "subset_size", "steps", "s_w_m", "per_batch"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["per_batch"].size(), 2u);
}

// a linear softmax model is convex in eps when logit normalization is off;
// the PGD core must then agree with corner enumeration on the model loss too
TEST(Sharpness, TinyModelCornerOracle) {
  ModelSpec spec;
  spec.architecture = Arch::mlp_bn;
  spec.dims = {2, 2};  // single linear layer: 6 params
  Model model = Model::build(spec, 3);
  std::vector<double> X = {0.8, -0.3};
  std::vector<int> y = {1};
  Batch batch{X.data(), y.data(), 1, 2};
  const std::vector<double> w = model.params;
  const LossOpts opts{0.0, false};

  BoxObjective obj;
  obj.loss = [&](const std::vector<double>& eps) {
    for (size_t i = 0; i < w.size(); ++i) model.params[i] = w[i] + eps[i];
    Tape tape;
    return model.loss(tape, batch, opts, BnMode::eval, false).value()[0];
  };
  obj.grad = [&](const std::vector<double>& eps) {
    for (size_t i = 0; i < w.size(); ++i) model.params[i] = w[i] + eps[i];
    std::vector<double> g;
    model.loss_and_grad(batch, opts, BnMode::eval, g);
    return g;
  };

  const double rho = 0.3;
  double corner_best = obj.loss(std::vector<double>(w.size(), 0.0));
  std::vector<double> eps(w.size());
  for (size_t bits = 0; bits < (size_t{1} << w.size()); ++bits) {
    for (size_t i = 0; i < w.size(); ++i) {
      eps[i] = ((bits >> i) & 1 ? 1.0 : -1.0) * rho * std::abs(w[i]);
    }
    corner_best = std::max(corner_best, obj.loss(eps));
  }
  PgdResult r = pgd_ascend(obj, w, rho, 20);
  EXPECT_LE(r.best_loss, corner_best + 1e-9);
  EXPECT_GE(r.best_loss, corner_best - 0.01 * corner_best);
  model.params = w;
}
