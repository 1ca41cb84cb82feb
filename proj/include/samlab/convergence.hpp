#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "samlab/common.hpp"
#include "samlab/rng.hpp"

namespace samlab {

/// Analytic test problems with documented smoothness constants.
///   quadratic(lambda):  f(w) = lambda/2 ||w||^2,        L = lambda, f* = 0
///   logistic_toy(seed): mean logistic loss on a fixed non-separable sample,
///                       L = 0.25 sigma_max(X^T X)/n, f* found by Newton
///   sin_quadratic:      f(w) = sum_i sin(w_i) + w_i^2/2, L = 2
enum class TestFn { quadratic, logistic_toy, sin_quadratic };

inline TestFn parse_test_fn(const std::string& s) {
  if (s == "quadratic") return TestFn::quadratic;
  if (s == "logistic_toy") return TestFn::logistic_toy;
  if (s == "sin_quadratic") return TestFn::sin_quadratic;
  throw ConfigError("unknown test function '" + s + "'");
}

enum class NoiseKind { none, per_sample };

struct ConvergenceConfig {
  TestFn test_fn = TestFn::quadratic;
  double lambda = 1.0;    // quadratic curvature
  uint64_t fn_seed = 0;   // logistic_toy data seed
  double h = 0.1;
  double rho = 0.1;
  int64_t T = 10;
  NoiseKind noise = NoiseKind::none;
  uint64_t noise_seed = 0;
  std::vector<int64_t> norm_coords;  // the w_N block; empty means plain SGD
};

struct BoundReport {
  double lhs = 0.0;          // (1/T) sum_t ||grad f(w^t)||^2
  double rhs = 0.0;          // 2(f(w0)-f*)/(hT) + 2LhM + L^2 rho^2 (1+Lh)
  double ratio = 0.0;
  double M_empirical = 0.0;  // max_t ||g(w^t)||^2 over the iterates
  double f0 = 0.0;
  double fstar = 0.0;
  double L = 0.0;
  int64_t ascent_skips = 0;
  double final_value = 0.0;
};

namespace detail {

struct Problem {
  int64_t dim = 0;
  double L = 0.0;
  double fstar = 0.0;
  std::vector<double> w0;
  std::function<double(const std::vector<double>&)> value;
  std::function<std::vector<double>(const std::vector<double>&)> grad;
  // stochastic gradient for sample index i; falls back to the true gradient
  std::function<std::vector<double>(const std::vector<double>&, int64_t)> sample_grad;
  int64_t n_samples = 1;
};

inline Problem make_quadratic(double lambda) {
  if (lambda <= 0.0) throw ConfigError("quadratic: lambda must be > 0");
  Problem p;
  p.dim = 2;
  p.L = lambda;
  p.fstar = 0.0;
  p.w0 = {1.0, 0.0};
  p.value = [lambda](const std::vector<double>& w) {
    double acc = 0.0;
    for (double x : w) acc += x * x;
    return 0.5 * lambda * acc;
  };
  p.grad = [lambda](const std::vector<double>& w) {
    std::vector<double> g(w.size());
    for (size_t i = 0; i < w.size(); ++i) g[i] = lambda * w[i];
    return g;
  };
  return p;
}

inline Problem make_sin_quadratic() {
  Problem p;
  p.dim = 4;
  p.L = 2.0;  // f'' = 1 - sin(x) in [0, 2]
  // per-coordinate minimum of sin(x) + x^2/2 at cos(x) + x = 0
  double xs = -0.7;
  for (int i = 0; i < 60; ++i) xs -= (std::cos(xs) + xs) / (1.0 - std::sin(xs));
  p.fstar = static_cast<double>(4) * (std::sin(xs) + 0.5 * xs * xs);
  p.w0 = {2.0, -1.5, 0.8, -2.5};
  p.value = [](const std::vector<double>& w) {
    double acc = 0.0;
    for (double x : w) acc += std::sin(x) + 0.5 * x * x;
    return acc;
  };
  p.grad = [](const std::vector<double>& w) {
    std::vector<double> g(w.size());
    for (size_t i = 0; i < w.size(); ++i) g[i] = std::cos(w[i]) + w[i];
    return g;
  };
  return p;
}

inline Problem make_logistic_toy(uint64_t seed) {
  Problem p;
  const int64_t n = 32, d = 4;
  p.dim = d;
  Rng rng(seed ^ 0xC001D00Dull);
  std::vector<double> X(static_cast<size_t>(n * d));
  std::vector<double> y(static_cast<size_t>(n));
  std::vector<double> w_true = {1.0, -1.5, 0.5, 2.0};
  for (int64_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      X[static_cast<size_t>(i * d + j)] = rng.normal();
      dot += X[static_cast<size_t>(i * d + j)] * w_true[static_cast<size_t>(j)];
    }
    double label = dot > 0.0 ? 1.0 : -1.0;
    if (rng.uniform01() < 0.15) label = -label;  // flips keep the problem non-separable
    y[static_cast<size_t>(i)] = label;
  }

  // L = 0.25 sigma_max(X^T X) / n via power iteration on the 4x4 Gram matrix
  std::vector<double> G(static_cast<size_t>(d * d), 0.0);
  for (int64_t a = 0; a < d; ++a)
    for (int64_t b = 0; b < d; ++b) {
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i)
        acc += X[static_cast<size_t>(i * d + a)] * X[static_cast<size_t>(i * d + b)];
      G[static_cast<size_t>(a * d + b)] = acc;
    }
  std::vector<double> v(static_cast<size_t>(d), 1.0);
  double sigma = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    std::vector<double> nv(static_cast<size_t>(d), 0.0);
    for (int64_t a = 0; a < d; ++a)
      for (int64_t b = 0; b < d; ++b)
        nv[static_cast<size_t>(a)] += G[static_cast<size_t>(a * d + b)] * v[static_cast<size_t>(b)];
    double norm = 0.0;
    for (double x : nv) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : nv) x /= norm;
    sigma = norm;
    v = std::move(nv);
  }
  p.L = 0.25 * sigma / static_cast<double>(n);

  auto value = [X, y, n, d](const std::vector<double>& w) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += X[static_cast<size_t>(i * d + j)] * w[static_cast<size_t>(j)];
      const double t = -y[static_cast<size_t>(i)] * dot;
      acc += t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
    }
    return acc / static_cast<double>(n);
  };
  auto grad = [X, y, n, d](const std::vector<double>& w) {
    std::vector<double> g(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += X[static_cast<size_t>(i * d + j)] * w[static_cast<size_t>(j)];
      const double s = 1.0 / (1.0 + std::exp(y[static_cast<size_t>(i)] * dot));
      for (int64_t j = 0; j < d; ++j)
        g[static_cast<size_t>(j)] += -y[static_cast<size_t>(i)] * s * X[static_cast<size_t>(i * d + j)] /
                                     static_cast<double>(n);
    }
    return g;
  };
  p.value = value;
  p.grad = grad;
  p.n_samples = n;
  p.sample_grad = [X, y, d](const std::vector<double>& w, int64_t i) {
    std::vector<double> g(static_cast<size_t>(d), 0.0);
    double dot = 0.0;
    for (int64_t j = 0; j < d; ++j) dot += X[static_cast<size_t>(i * d + j)] * w[static_cast<size_t>(j)];
    const double s = 1.0 / (1.0 + std::exp(y[static_cast<size_t>(i)] * dot));
    for (int64_t j = 0; j < d; ++j)
      g[static_cast<size_t>(j)] = -y[static_cast<size_t>(i)] * s * X[static_cast<size_t>(i * d + j)];
    return g;
  };
  p.w0 = {0.0, 0.0, 0.0, 0.0};

  // f* by damped Newton on the 4x4 system
  std::vector<double> w(static_cast<size_t>(d), 0.0);
  for (int iter = 0; iter < 200; ++iter) {
    std::vector<double> g = grad(w);
    std::vector<double> H(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += X[static_cast<size_t>(i * d + j)] * w[static_cast<size_t>(j)];
      const double s = 1.0 / (1.0 + std::exp(-dot * y[static_cast<size_t>(i)]));
      const double coef = s * (1.0 - s) / static_cast<double>(n);
      for (int64_t a = 0; a < d; ++a)
        for (int64_t b = 0; b < d; ++b)
          H[static_cast<size_t>(a * d + b)] +=
              coef * X[static_cast<size_t>(i * d + a)] * X[static_cast<size_t>(i * d + b)];
    }
    for (int64_t a = 0; a < d; ++a) H[static_cast<size_t>(a * d + a)] += 1e-12;
    // solve H dx = g by Gaussian elimination
    std::vector<double> A = H, b = g, dx(static_cast<size_t>(d), 0.0);
    for (int64_t col = 0; col < d; ++col) {
      int64_t piv = col;
      for (int64_t r = col + 1; r < d; ++r)
        if (std::abs(A[static_cast<size_t>(r * d + col)]) > std::abs(A[static_cast<size_t>(piv * d + col)]))
          piv = r;
      for (int64_t c = 0; c < d; ++c)
        std::swap(A[static_cast<size_t>(col * d + c)], A[static_cast<size_t>(piv * d + c)]);
      std::swap(b[static_cast<size_t>(col)], b[static_cast<size_t>(piv)]);
      for (int64_t r = col + 1; r < d; ++r) {
        const double f = A[static_cast<size_t>(r * d + col)] / A[static_cast<size_t>(col * d + col)];
        for (int64_t c = col; c < d; ++c)
          A[static_cast<size_t>(r * d + c)] -= f * A[static_cast<size_t>(col * d + c)];
        b[static_cast<size_t>(r)] -= f * b[static_cast<size_t>(col)];
      }
    }
    for (int64_t r = d - 1; r >= 0; --r) {
      double acc = b[static_cast<size_t>(r)];
      for (int64_t c = r + 1; c < d; ++c) acc -= A[static_cast<size_t>(r * d + c)] * dx[static_cast<size_t>(c)];
      dx[static_cast<size_t>(r)] = acc / A[static_cast<size_t>(r * d + r)];
    }
    double step_norm = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      w[static_cast<size_t>(j)] -= dx[static_cast<size_t>(j)];
      step_norm += dx[static_cast<size_t>(j)] * dx[static_cast<size_t>(j)];
    }
    if (step_norm < 1e-28) break;
  }
  p.fstar = value(w);
  return p;
}

inline Problem make_problem(const ConvergenceConfig& cfg) {
  switch (cfg.test_fn) {
    case TestFn::quadratic: return make_quadratic(cfg.lambda);
    case TestFn::logistic_toy: return make_logistic_toy(cfg.fn_seed);
    case TestFn::sin_quadratic: return make_sin_quadratic();
  }
  throw ConfigError("unknown test function");
}

}  // namespace detail

/// Run the SAM-ON iteration (normalized ascent on the w_N block only, shared
/// descent at the perturbed point) and evaluate both sides of the
/// convergence bound with M taken as the empirical trajectory maximum.
inline BoundReport run_convergence_check(const ConvergenceConfig& cfg) {
  detail::Problem prob = detail::make_problem(cfg);
  if (cfg.T < 1) throw ConfigError("convergence: T must be >= 1");
  if (cfg.h <= 0.0) throw ConfigError("convergence: h must be > 0");
  if (cfg.rho <= 0.0) throw ConfigError("convergence: rho must be > 0");
  if (cfg.h > 1.0 / prob.L + 1e-12) {
    throw ConfigError("convergence: h=" + std::to_string(cfg.h) + " violates h <= 1/L with L=" +
                      std::to_string(prob.L));
  }
  for (int64_t c : cfg.norm_coords) {
    if (c < 0 || c >= prob.dim) throw ConfigError("convergence: norm coordinate out of range");
  }

  // zero-mean linear dithering pool for functions without natural samples
  const int64_t pool = 8;
  std::vector<std::vector<double>> xi;
  if (cfg.noise == NoiseKind::per_sample && !prob.sample_grad) {
    Rng nrng(cfg.noise_seed ^ 0xD17Eull);
    xi.assign(static_cast<size_t>(pool), std::vector<double>(static_cast<size_t>(prob.dim), 0.0));
    std::vector<double> mean(static_cast<size_t>(prob.dim), 0.0);
    for (auto& v : xi) {
      for (auto& x : v) {
        x = 0.2 * nrng.normal();
      }
      for (int64_t j = 0; j < prob.dim; ++j) mean[static_cast<size_t>(j)] += v[static_cast<size_t>(j)];
    }
    for (auto& v : xi) {
      for (int64_t j = 0; j < prob.dim; ++j) {
        v[static_cast<size_t>(j)] -= mean[static_cast<size_t>(j)] / static_cast<double>(pool);
      }
    }
  }
  Rng draw(cfg.noise_seed);

  auto stochastic_grad = [&](const std::vector<double>& w, int64_t sample) {
    if (cfg.noise == NoiseKind::none) return prob.grad(w);
    if (prob.sample_grad) return prob.sample_grad(w, sample);
    std::vector<double> g = prob.grad(w);
    const auto& d = xi[static_cast<size_t>(sample)];
    for (size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    return g;
  };

  std::vector<double> w = prob.w0;
  BoundReport rep;
  rep.L = prob.L;
  rep.f0 = prob.value(prob.w0);
  rep.fstar = prob.fstar;

  double lhs_acc = 0.0;
  for (int64_t t = 0; t < cfg.T; ++t) {
    const std::vector<double> true_grad = prob.grad(w);
    double gn2 = 0.0;
    for (double x : true_grad) gn2 += x * x;
    lhs_acc += gn2;

    const int64_t sample =
        cfg.noise == NoiseKind::none
            ? 0
            : static_cast<int64_t>(draw.below(static_cast<uint64_t>(prob.sample_grad ? prob.n_samples : pool)));
    const std::vector<double> g = stochastic_grad(w, sample);
    double g2 = 0.0;
    for (double x : g) g2 += x * x;
    rep.M_empirical = std::max(rep.M_empirical, g2);

    // ascent only on the w_N block, with the same sample
    std::vector<double> w_half = w;
    double gn_norm = 0.0;
    for (int64_t c : cfg.norm_coords) gn_norm += g[static_cast<size_t>(c)] * g[static_cast<size_t>(c)];
    gn_norm = std::sqrt(gn_norm);
    if (!cfg.norm_coords.empty() && gn_norm >= 1e-12) {
      for (int64_t c : cfg.norm_coords) {
        w_half[static_cast<size_t>(c)] += cfg.rho * g[static_cast<size_t>(c)] / gn_norm;
      }
    } else if (!cfg.norm_coords.empty()) {
      ++rep.ascent_skips;
    }

    const std::vector<double> g_half = stochastic_grad(w_half, sample);
    for (size_t i = 0; i < w.size(); ++i) w[i] -= cfg.h * g_half[i];
  }

  rep.lhs = lhs_acc / static_cast<double>(cfg.T);
  rep.rhs = 2.0 * (rep.f0 - rep.fstar) / (cfg.h * static_cast<double>(cfg.T)) +
            2.0 * prob.L * cfg.h * rep.M_empirical +
            prob.L * prob.L * cfg.rho * cfg.rho * (1.0 + prob.L * cfg.h);
  rep.ratio = rep.lhs / rep.rhs;
  rep.final_value = prob.value(w);
  return rep;
}

inline nlohmann::json to_json(const ConvergenceConfig& cfg, const BoundReport& r) {
  const char* fn = cfg.test_fn == TestFn::quadratic
                       ? "quadratic"
                       : (cfg.test_fn == TestFn::logistic_toy ? "logistic_toy" : "sin_quadratic");
  return nlohmann::json{{"fn", fn},
                        {"h", cfg.h},
                        {"rho", cfg.rho},
                        {"T", cfg.T},
                        {"noise", cfg.noise == NoiseKind::none ? "none" : "per_sample"},
                        {"noise_seed", cfg.noise_seed},
                        {"norm_coords", cfg.norm_coords},
                        {"lhs", r.lhs},
                        {"rhs", r.rhs},
                        {"ratio", r.ratio},
                        {"M_empirical", r.M_empirical},
                        {"f0", r.f0},
                        {"fstar", r.fstar},
                        {"L", r.L},
                        {"ascent_skips", r.ascent_skips},
                        {"final_value", r.final_value}};
}

}  // namespace samlab
