#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "samlab/common.hpp"
#include "samlab/nn.hpp"
#include "samlab/perturb.hpp"

namespace samlab {

struct SgdCfg {
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

struct AdamWCfg {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct Schedule {
  enum class Kind { constant, cosine };
  Kind kind = Kind::constant;
  int64_t total_steps = 0;  // cosine horizon, filled by the harness
};

inline double lr_at(const Schedule& s, double base_lr, int64_t step) {
  if (s.kind == Schedule::Kind::constant) return base_lr;
  if (step < 0 || step > s.total_steps) {
    throw EngineError("lr_at: step " + std::to_string(step) + " outside [0," +
                      std::to_string(s.total_steps) + "]");
  }
  return base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                        static_cast<double>(s.total_steps)));
}

enum class StepKind { base_only, sam };

struct StageSwitch {
  int64_t epoch = 0;
  StepKind from = StepKind::base_only;
  StepKind to = StepKind::sam;
};

struct OptimConfig {
  std::variant<SgdCfg, AdamWCfg> base = SgdCfg{};
  Schedule schedule;
  std::optional<PerturbSpec> perturb;
  std::optional<int64_t> m;  // m-sharpness sub-batch size
  std::optional<StageSwitch> stage_switch;
  bool ascent_short_circuit = true;  // skip non-norm leaf grads in only_norm ascent

  double base_lr() const {
    return std::holds_alternative<SgdCfg>(base) ? std::get<SgdCfg>(base).lr
                                                : std::get<AdamWCfg>(base).lr;
  }
};

/// Epochs before the switch run `from`; the switch epoch and later run `to`.
inline StepKind stage_controller(const OptimConfig& cfg, int64_t epoch) {
  const StepKind normal = cfg.perturb.has_value() ? StepKind::sam : StepKind::base_only;
  if (!cfg.stage_switch) return normal;
  const StageSwitch& sw = *cfg.stage_switch;
  return epoch < sw.epoch ? sw.from : sw.to;
}

/// SGD-with-momentum / decoupled AdamW over the flat parameter vector.
/// Frozen coordinates (trainable mask 0) are never touched, including their
/// optimizer state. Momentum and moments persist across stage switches.
class Optimizer {
 public:
  Optimizer(OptimConfig cfg, int64_t n_params, std::vector<uint8_t> trainable)
      : cfg_(std::move(cfg)), trainable_(std::move(trainable)) {
    if (cfg_.base_lr() <= 0.0) throw ConfigError("optimizer: lr must be > 0");
    if (static_cast<int64_t>(trainable_.size()) != n_params) {
      throw EngineError("optimizer: trainable mask size mismatch");
    }
    buf1_.assign(static_cast<size_t>(n_params), 0.0);
    if (std::holds_alternative<AdamWCfg>(cfg_.base)) {
      buf2_.assign(static_cast<size_t>(n_params), 0.0);
    }
  }

  const OptimConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }

  void base_step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    if (lr <= 0.0) throw EngineError("base_step: lr must be > 0");
    if (params.size() != grads.size() || params.size() != trainable_.size()) {
      throw EngineError("base_step: size mismatch");
    }
    ++t_;
    if (std::holds_alternative<SgdCfg>(cfg_.base)) {
      const SgdCfg& c = std::get<SgdCfg>(cfg_.base);
      for (size_t i = 0; i < params.size(); ++i) {
        if (!trainable_[i]) continue;
        buf1_[i] = c.momentum * buf1_[i] + grads[i] + c.weight_decay * params[i];
        params[i] -= lr * buf1_[i];
      }
    } else {
      const AdamWCfg& c = std::get<AdamWCfg>(cfg_.base);
      const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
      for (size_t i = 0; i < params.size(); ++i) {
        if (!trainable_[i]) continue;
        buf1_[i] = c.beta1 * buf1_[i] + (1.0 - c.beta1) * grads[i];
        buf2_[i] = c.beta2 * buf2_[i] + (1.0 - c.beta2) * grads[i] * grads[i];
        const double mhat = buf1_[i] / bc1;
        const double vhat = buf2_[i] / bc2;
        params[i] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * params[i]);
      }
    }
  }

  // state access for checkpointing
  const std::vector<double>& buf1() const { return buf1_; }
  const std::vector<double>& buf2() const { return buf2_; }
  void restore_state(int64_t t, std::vector<double> b1, std::vector<double> b2) {
    t_ = t;
    if (b1.size() != buf1_.size()) throw ConfigError("optimizer state: buffer size mismatch");
    buf1_ = std::move(b1);
    if (std::holds_alternative<AdamWCfg>(cfg_.base)) {
      if (b2.size() != buf2_.size()) throw ConfigError("optimizer state: buffer size mismatch");
      buf2_ = std::move(b2);
    }
  }

 private:
  OptimConfig cfg_;
  std::vector<uint8_t> trainable_;
  int64_t t_ = 0;
  std::vector<double> buf1_;  // sgd velocity / adam first moment
  std::vector<double> buf2_;  // adam second moment
};

struct StepMetrics {
  double loss_clean = 0.0;
  double loss_perturbed = 0.0;
  double eps_scaled_norm = 0.0;
  int64_t degenerate_events = 0;
  int64_t active_params = 0;
};

/// One evaluation of a sub-batch objective at the current parameters.
/// `perturbed` distinguishes the ascent pass (batch stats frozen) from the
/// descent pass (running stats advance).
struct SubPass {
  std::function<std::pair<double, std::vector<double>>(bool perturbed)> run;
  int64_t weight = 1;
};

/// The SAM update over a generic objective split into sub-batches
/// (m-sharpness): each sub-batch computes its own ascent direction from
/// its own clean gradient, the perturbed gradients are averaged by sub-batch
/// size, and a single base step is applied. Weight decay enters only through
/// the base step, never the ascent gradient.
inline StepMetrics sam_step_core(std::vector<double>& params, const std::vector<SubPass>& subs,
                                 const PerturbSpec& spec, const std::vector<ParamView>& views,
                                 const std::vector<uint8_t>& mask, Optimizer& opt, double lr) {
  if (subs.empty()) throw EngineError("sam_step: empty batch");
  spec.validate();
  StepMetrics metrics;
  metrics.active_params = std::count(mask.begin(), mask.end(), uint8_t{1});
  std::vector<double> g_avg(params.size(), 0.0);
  double total_weight = 0.0;
  double norm_weight = 0.0;

  for (const SubPass& sub : subs) {
    const double w = static_cast<double>(sub.weight);
    auto [loss_clean, g_clean] = sub.run(false);
    if (!std::isfinite(loss_clean)) {
      throw EngineError("sam_step: non-finite clean loss " + std::to_string(loss_clean));
    }
    auto op = apply_scope(normalization_operator(spec.variant, params, g_clean, spec.eta, views), mask);
    auto pert = perturbation(op, mask, g_clean, spec.rho, spec.p());

    const std::vector<double> saved = params;
    for (size_t i = 0; i < params.size(); ++i) params[i] += pert.eps[i];
    auto [loss_pert, g_pert] = sub.run(true);
    params = saved;
    if (!std::isfinite(loss_pert)) {
      throw EngineError("sam_step: non-finite perturbed loss " + std::to_string(loss_pert));
    }

    for (size_t i = 0; i < params.size(); ++i) g_avg[i] += w * g_pert[i];
    metrics.loss_clean += w * loss_clean;
    metrics.loss_perturbed += w * loss_pert;
    if (pert.degenerate) {
      ++metrics.degenerate_events;
    } else {
      metrics.eps_scaled_norm += w * pert.scaled_norm;
      norm_weight += w;
    }
    total_weight += w;
  }

  for (double& g : g_avg) g /= total_weight;
  metrics.loss_clean /= total_weight;
  metrics.loss_perturbed /= total_weight;
  metrics.eps_scaled_norm = norm_weight > 0.0 ? metrics.eps_scaled_norm / norm_weight : 0.0;

  opt.base_step(params, g_avg, lr);
  return metrics;
}

/// Plain descent step (SGD stage / no perturbation configured).
inline StepMetrics base_only_step(Model& model, const Batch& batch, const LossOpts& loss_opts,
                                  Optimizer& opt, double lr) {
  std::vector<double> grad;
  const double loss = model.loss_and_grad(batch, loss_opts, BnMode::train_update, grad);
  if (!std::isfinite(loss)) throw EngineError("train step: non-finite loss " + std::to_string(loss));
  opt.base_step(model.params, grad, lr);
  StepMetrics m;
  m.loss_clean = loss;
  m.loss_perturbed = loss;
  return m;
}

/// Production SAM step on a model + batch. The batch is partitioned in data
/// order into ceil(n/m) sub-batches when m is configured; the last partial
/// sub-batch is kept and weighted by its true size.
inline StepMetrics sam_step(Model& model, const Batch& batch, const PerturbSpec& spec,
                            const std::vector<uint8_t>& mask, Optimizer& opt, double lr,
                            const LossOpts& loss_opts) {
  if (batch.n <= 0) throw EngineError("sam_step: empty batch");
  const int64_t m = opt.config().m.value_or(batch.n);
  if (m < 1) throw ConfigError("sam_step: m must be >= 1");
  if (m > batch.n) {
    throw EngineError("sam_step: m=" + std::to_string(m) + " exceeds batch size " +
                      std::to_string(batch.n));
  }

  const bool short_circuit = opt.config().ascent_short_circuit &&
                             spec.scope.kind == ScopeSpec::Kind::only_norm;
  std::vector<int> norm_ids;
  if (short_circuit) norm_ids = model.norm_view_ids();

  std::vector<SubPass> subs;
  for (int64_t start = 0; start < batch.n; start += m) {
    const int64_t len = std::min(m, batch.n - start);
    Batch sub{batch.x + start * batch.dim, batch.y + start, len, batch.dim};
    subs.push_back(SubPass{
        [&model, sub, &loss_opts, short_circuit, &norm_ids](bool perturbed) {
          std::vector<double> grad;
          const BnMode mode = perturbed ? BnMode::train_update : BnMode::train_frozen;
          const std::vector<int>* filter = (!perturbed && short_circuit) ? &norm_ids : nullptr;
          const double loss = model.loss_and_grad(sub, loss_opts, mode, grad, filter);
          return std::make_pair(loss, std::move(grad));
        },
        len});
  }
  return sam_step_core(model.params, subs, spec, model.views, mask, opt, lr);
}

}  // namespace samlab
