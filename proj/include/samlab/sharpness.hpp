#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "json.hpp"
#include "samlab/common.hpp"
#include "samlab/nn.hpp"
#include "samlab/rng.hpp"

namespace samlab {

/// Evaluation-ball settings for the logit-normalized elementwise-adaptive
/// worst-case l-inf m-sharpness. rho here is the measurement radius, not the
/// training radius.
struct SharpnessConfig {
  double rho = 0.0;
  int64_t m = 128;
  int64_t subset_size = 2048;
  int steps = 20;
  uint64_t seed = 0;
};

struct SharpnessReport {
  double rho = 0.0;
  int64_t m = 0;
  int64_t subset_size = 0;
  int steps = 0;
  double s_w_m = 0.0;
  std::vector<double> per_batch;
};

inline nlohmann::json to_json(const SharpnessReport& r) {
  return nlohmann::json{{"rho", r.rho},       {"m", r.m},
                        {"subset_size", r.subset_size}, {"steps", r.steps},
                        {"s_w_m", r.s_w_m},   {"per_batch", r.per_batch}};
}

/// Clamp a candidate into the adaptive box |eps_i| <= rho * |w_i|.
/// Coordinates with w_i == 0 have a degenerate box and are forced to 0.
inline std::vector<double> project_linf_adaptive(std::vector<double> eps,
                                                 const std::vector<double>& w, double rho) {
  if (eps.size() != w.size()) throw EngineError("project_linf_adaptive: size mismatch");
  for (size_t i = 0; i < eps.size(); ++i) {
    const double r = rho * std::abs(w[i]);
    eps[i] = std::clamp(eps[i], -r, r);
  }
  return eps;
}

/// Objective for the ascent: loss and gradient as functions of eps.
struct BoxObjective {
  std::function<double(const std::vector<double>&)> loss;
  std::function<std::vector<double>(const std::vector<double>&)> grad;
};

struct PgdResult {
  double base_loss = 0.0;
  double best_loss = 0.0;
  std::vector<double> best_eps;
};

/// Momentum sign-PGD over the adaptive box (APGD-lite): initial step size
/// rho, momentum 0.75 from the second iterate, step halving after a
/// 3-iteration window without best-loss improvement, projection after every
/// move, best-seen tracking with eps=0 as the first candidate. The first
/// iterate is the plain 1-step point.
inline PgdResult pgd_ascend(const BoxObjective& obj, const std::vector<double>& w, double rho,
                            int steps,
                            const std::function<void(const std::vector<double>&)>& on_eval = {}) {
  if (steps < 1) throw EngineError("pgd_ascend: steps must be >= 1");
  if (rho < 0.0) throw EngineError("pgd_ascend: rho must be >= 0");
  const size_t n = w.size();
  std::vector<double> eps(n, 0.0), prev(n, 0.0);

  PgdResult out;
  out.base_loss = obj.loss(eps);
  if (on_eval) on_eval(eps);
  out.best_loss = out.base_loss;
  out.best_eps = eps;

  double alpha = rho;
  int stall = 0;
  for (int k = 1; k <= steps; ++k) {
    const std::vector<double> g = obj.grad(eps);
    std::vector<double> z(n);
    for (size_t i = 0; i < n; ++i) {
      const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      z[i] = eps[i] + alpha * std::abs(w[i]) * s;
    }
    z = project_linf_adaptive(std::move(z), w, rho);
    std::vector<double> next(n);
    if (k == 1) {
      next = std::move(z);
    } else {
      for (size_t i = 0; i < n; ++i) {
        next[i] = eps[i] + 0.75 * (z[i] - eps[i]) + 0.25 * (eps[i] - prev[i]);
      }
      next = project_linf_adaptive(std::move(next), w, rho);
    }
    prev = eps;
    eps = std::move(next);
    const double l = obj.loss(eps);
    if (on_eval) on_eval(eps);
    if (l > out.best_loss) {
      out.best_loss = l;
      out.best_eps = eps;
      stall = 0;
    } else if (++stall >= 3) {
      alpha *= 0.5;
      stall = 0;
    }
  }
  return out;
}

/// Logit-normalized adaptive l-inf m-sharpness over a seeded subset of the
/// training data: mean over size-m batches of (max loss in the box - loss at
/// w). Both terms use logit normalization and no label smoothing; BatchNorm
/// runs in eval mode. Model parameters are restored exactly.
inline SharpnessReport adaptive_sharpness(Model& model, const double* X, const int* y, int64_t n,
                                          int64_t dim, const SharpnessConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("sharpness: steps must be >= 1");
  if (cfg.rho < 0.0) throw ConfigError("sharpness: rho must be >= 0");
  if (cfg.m < 1) throw ConfigError("sharpness: m must be >= 1");
  const int64_t subset = (cfg.subset_size / cfg.m) * cfg.m;  // truncate to a multiple of m
  if (subset < cfg.m) throw ConfigError("sharpness: subset_size smaller than m");
  if (subset > n) {
    throw ConfigError("sharpness: subset_size " + std::to_string(subset) + " exceeds dataset " +
                      std::to_string(n));
  }

  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), int64_t{0});
  Rng rng(cfg.seed);
  rng.shuffle(idx);

  const std::vector<double> snapshot = model.params;
  const LossOpts opts{0.0, true};

  SharpnessReport report;
  report.rho = cfg.rho;
  report.m = cfg.m;
  report.subset_size = subset;
  report.steps = cfg.steps;

  std::vector<double> bx(static_cast<size_t>(cfg.m * dim));
  std::vector<int> by(static_cast<size_t>(cfg.m));
  for (int64_t start = 0; start < subset; start += cfg.m) {
    for (int64_t i = 0; i < cfg.m; ++i) {
      const int64_t src = idx[static_cast<size_t>(start + i)];
      std::copy(X + src * dim, X + (src + 1) * dim, bx.begin() + i * dim);
      by[static_cast<size_t>(i)] = y[src];
    }
    Batch batch{bx.data(), by.data(), cfg.m, dim};

    BoxObjective obj;
    obj.loss = [&](const std::vector<double>& eps) {
      for (size_t i = 0; i < snapshot.size(); ++i) model.params[i] = snapshot[i] + eps[i];
      Tape tape;
      return model.loss(tape, batch, opts, BnMode::eval, false).value()[0];
    };
    obj.grad = [&](const std::vector<double>& eps) {
      for (size_t i = 0; i < snapshot.size(); ++i) model.params[i] = snapshot[i] + eps[i];
      std::vector<double> g;
      model.loss_and_grad(batch, opts, BnMode::eval, g);
      return g;
    };

    PgdResult res = pgd_ascend(obj, snapshot, cfg.rho, cfg.steps);
    report.per_batch.push_back(res.best_loss - res.base_loss);
  }
  model.params = snapshot;

  double acc = 0.0;
  for (double v : report.per_batch) acc += v;
  report.s_w_m = acc / static_cast<double>(report.per_batch.size());
  return report;
}

}  // namespace samlab
