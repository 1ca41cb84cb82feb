#pragma once

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "samlab/checkpoint.hpp"
#include "samlab/config.hpp"
#include "samlab/data.hpp"
#include "samlab/optim.hpp"

namespace samlab {

inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct EpochRow {
  int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  double eps_scaled_norm_mean = 0.0;
  int64_t degenerate_events = 0;
};

struct TrainResult {
  std::filesystem::path out_dir;
  std::filesystem::path metrics_path;
  std::filesystem::path final_checkpoint;
  std::vector<EpochRow> rows;
  std::vector<double> epoch_wall_ms;
};

namespace detail {

constexpr const char* kMetricsHeader =
    "epoch,lr,train_loss,train_acc,test_loss,test_acc,eps_scaled_norm_mean,degenerate_events";

inline std::string metrics_row(const EpochRow& r) {
  std::string s = std::to_string(r.epoch);
  s += "," + fmt_g17(r.lr);
  s += "," + fmt_g17(r.train_loss);
  s += "," + fmt_g17(r.train_acc);
  s += "," + fmt_g17(r.test_loss);
  s += "," + fmt_g17(r.test_acc);
  s += "," + fmt_g17(r.eps_scaled_norm_mean);
  s += "," + std::to_string(r.degenerate_events);
  return s;
}

inline json optimizer_state_json(const Optimizer& opt, int64_t epoch,
                                 const std::optional<std::vector<uint8_t>>& mask,
                                 const OptimConfig& cfg) {
  json j;
  j["kind"] = std::holds_alternative<SgdCfg>(cfg.base) ? "sgd" : "adamw";
  j["step"] = opt.step_count();
  j["epoch"] = epoch;
  j["buf1"] = opt.buf1();
  if (std::holds_alternative<AdamWCfg>(cfg.base)) j["buf2"] = opt.buf2();
  // static masks that depend on gradients or run-start draws travel with the
  // checkpoint so a resumed run keeps the exact same scope
  if (mask && cfg.perturb &&
      (cfg.perturb->scope.kind == ScopeSpec::Kind::random ||
       cfg.perturb->scope.kind == ScopeSpec::Kind::fisher_topk)) {
    std::vector<int64_t> active;
    for (size_t i = 0; i < mask->size(); ++i) {
      if ((*mask)[i]) active.push_back(static_cast<int64_t>(i));
    }
    j["scope_mask_active"] = active;
  }
  return j;
}

}  // namespace detail

/// Histogram of |w_i| per tag over uniform bins on [0, max |w|].
struct HistRow {
  Tag tag = Tag::weight;
  double lo = 0.0;
  double hi = 0.0;
  int64_t count = 0;
};

inline std::vector<HistRow> param_histograms(const Model& model, int bins) {
  if (bins < 2) throw ConfigError("hist: bins must be >= 2");
  std::vector<HistRow> rows;
  for (Tag tag : {Tag::norm_weight, Tag::norm_bias, Tag::weight, Tag::bias}) {
    std::vector<double> mags;
    for (const auto& v : model.views) {
      if (v.tag != tag) continue;
      for (int64_t i = v.offset; i < v.offset + v.length; ++i) {
        mags.push_back(std::abs(model.params[static_cast<size_t>(i)]));
      }
    }
    if (mags.empty()) continue;  // empty tag group: zero rows, not an error
    double mx = 0.0;
    for (double m : mags) mx = std::max(mx, m);
    const double hi = mx > 0.0 ? mx : 1.0;
    std::vector<int64_t> counts(static_cast<size_t>(bins), 0);
    for (double m : mags) {
      auto b = static_cast<int64_t>(m / hi * bins);
      if (b >= bins) b = bins - 1;
      ++counts[static_cast<size_t>(b)];
    }
    for (int b = 0; b < bins; ++b) {
      rows.push_back(HistRow{tag, hi * b / bins, hi * (b + 1) / bins, counts[static_cast<size_t>(b)]});
    }
  }
  return rows;
}

inline void write_histograms_csv(const std::filesystem::path& path, const std::vector<HistRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("hist: cannot write '" + path.string() + "'");
  out << "tag,bin_lo,bin_hi,count\r\n";
  for (const auto& r : rows) {
    out << tag_name(r.tag) << "," << fmt_g17(r.lo) << "," << fmt_g17(r.hi) << "," << r.count << "\r\n";
  }
}

/// Run one experiment: epoch loop with seeded shuffling, per-epoch metrics,
/// deterministic metrics.csv + config echo + checkpoints in the run
/// directory. Wall-clock times go to timings.csv, which is the one
/// non-deterministic output. Optionally resumes from a checkpoint.
inline TrainResult train(const RunConfig& cfg, const std::string& out_override = "",
                         const std::string& resume_path = "") {
  TrainResult result;
  const std::string out = out_override.empty() ? cfg.output_dir : out_override;
  if (out.empty()) throw ConfigError("train: no output directory (config output_dir or --out)");
  result.out_dir = out;
  std::filesystem::create_directories(result.out_dir);

  {
    std::ofstream echo(result.out_dir / "config.json", std::ios::binary);
    if (!echo) throw ConfigError("train: cannot write config echo");
    echo << to_json(cfg).dump(2) << "\n";
  }

  DatasetPair data = load_dataset(cfg.data);
  const int64_t steps_per_epoch = data.train.n / cfg.batch_size;  // last partial batch dropped
  if (steps_per_epoch < 1) throw ConfigError("train: batch_size exceeds the train split");

  Model model = Model::build(cfg.model, cfg.seed);
  if (data.train.dim != (cfg.model.architecture == Arch::mini_conv_bn
                             ? cfg.model.in_channels * cfg.model.image * cfg.model.image
                             : cfg.model.dims.front())) {
    throw ConfigError("train: dataset dim does not match the model input");
  }
  if (data.train.classes > (cfg.model.architecture == Arch::mini_conv_bn ? cfg.model.classes
                                                                         : cfg.model.dims.back())) {
    throw ConfigError("train: dataset has more classes than the model outputs");
  }

  OptimConfig ocfg = cfg.optim;
  ocfg.schedule.total_steps = cfg.epochs * steps_per_epoch;
  Optimizer opt(ocfg, model.total_params(), model.trainable_mask());

  std::optional<std::vector<uint8_t>> mask;
  if (ocfg.perturb && ocfg.perturb->scope.kind != ScopeSpec::Kind::fisher_topk) {
    mask = scope_mask(ocfg.perturb->scope, model.views, nullptr, model.total_params());
  }

  Rng rng_root(cfg.seed);
  int64_t start_epoch = 0;
  if (!resume_path.empty()) {
    LoadedCheckpoint ckpt = checkpoint_load(resume_path);
    if (!(ckpt.model.spec == cfg.model)) {
      throw ConfigError("train: checkpoint model_spec does not match the config");
    }
    model.params = ckpt.model.params;
    model.norm_states = ckpt.model.norm_states;
    const json& os = ckpt.optimizer_state;
    start_epoch = os.at("epoch").get<int64_t>();
    opt.restore_state(os.at("step").get<int64_t>(), os.at("buf1").get<std::vector<double>>(),
                      os.contains("buf2") ? os.at("buf2").get<std::vector<double>>()
                                          : std::vector<double>{});
    if (os.contains("scope_mask_active")) {
      std::vector<uint8_t> m(static_cast<size_t>(model.total_params()), 0);
      for (int64_t i : os.at("scope_mask_active").get<std::vector<int64_t>>()) {
        m[static_cast<size_t>(i)] = 1;
      }
      mask = std::move(m);
    }
    rng_root = Rng::from_state(ckpt.rng_state.key, ckpt.rng_state.counter);
    if (start_epoch >= cfg.epochs) throw ConfigError("train: checkpoint is already at the final epoch");
  }

  result.metrics_path = result.out_dir / "metrics.csv";
  std::ofstream metrics(result.metrics_path, std::ios::binary);
  if (!metrics) throw ConfigError("train: cannot write metrics.csv");
  metrics << detail::kMetricsHeader << "\r\n";
  std::ofstream timings(result.out_dir / "timings.csv", std::ios::binary);
  timings << "epoch,wall_ms\r\n";

  const LossOpts loss_opts{cfg.label_smoothing, false};
  std::vector<double> bx(static_cast<size_t>(cfg.batch_size * data.train.dim));
  std::vector<int> by(static_cast<size_t>(cfg.batch_size));
  std::vector<int64_t> perm(static_cast<size_t>(data.train.n));
  int64_t global_step = opt.step_count();

  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto wall_start = std::chrono::steady_clock::now();
    const StepKind kind = stage_controller(ocfg, epoch);

    std::iota(perm.begin(), perm.end(), int64_t{0});
    Rng shuffle_rng = rng_root.split(1000 + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(perm);

    EpochRow row;
    row.epoch = epoch;
    double eps_norm_acc = 0.0;
    int64_t sam_steps = 0;

    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      for (int64_t i = 0; i < cfg.batch_size; ++i) {
        const int64_t src = perm[static_cast<size_t>(s * cfg.batch_size + i)];
        std::copy(data.train.X.begin() + src * data.train.dim,
                  data.train.X.begin() + (src + 1) * data.train.dim,
                  bx.begin() + i * data.train.dim);
        by[static_cast<size_t>(i)] = data.train.y[static_cast<size_t>(src)];
      }
      Batch batch{bx.data(), by.data(), cfg.batch_size, data.train.dim};
      const double lr = lr_at(ocfg.schedule, ocfg.base_lr(), global_step);
      if (s == 0) row.lr = lr;

      if (kind == StepKind::sam) {
        if (!mask) {
          // fisher_topk: static mask from the first SAM step's clean gradient
          std::vector<double> g;
          model.loss_and_grad(batch, loss_opts, BnMode::train_frozen, g);
          mask = scope_mask(ocfg.perturb->scope, model.views, &g, model.total_params());
        }
        StepMetrics sm = sam_step(model, batch, *ocfg.perturb, *mask, opt, lr, loss_opts);
        eps_norm_acc += sm.eps_scaled_norm;
        row.degenerate_events += sm.degenerate_events;
        ++sam_steps;
      } else {
        base_only_step(model, batch, loss_opts, opt, lr);
      }
      ++global_step;
    }

    row.eps_scaled_norm_mean = sam_steps > 0 ? eps_norm_acc / static_cast<double>(sam_steps) : 0.0;
    Model::Eval tr = model.evaluate(data.train.X.data(), data.train.y.data(), data.train.n,
                                    data.train.dim, loss_opts);
    Model::Eval te = model.evaluate(data.test.X.data(), data.test.y.data(), data.test.n,
                                    data.test.dim, loss_opts);
    row.train_loss = tr.loss;
    row.train_acc = tr.accuracy;
    row.test_loss = te.loss;
    row.test_acc = te.accuracy;
    metrics << detail::metrics_row(row) << "\r\n";
    metrics.flush();
    result.rows.push_back(row);

    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - wall_start)
            .count();
    result.epoch_wall_ms.push_back(wall_ms);
    timings << epoch << "," << fmt_g17(wall_ms) << "\r\n";
    timings.flush();

    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 < cfg.epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_epoch_%04" PRId64 ".json", epoch + 1);
      checkpoint_save(result.out_dir / name, model,
                      detail::optimizer_state_json(opt, epoch + 1, mask, ocfg),
                      RngState{rng_root.key(), rng_root.counter()});
    }
  }

  result.final_checkpoint = result.out_dir / "checkpoint_final.json";
  checkpoint_save(result.final_checkpoint, model,
                  detail::optimizer_state_json(opt, cfg.epochs, mask, ocfg),
                  RngState{rng_root.key(), rng_root.counter()});
  return result;
}

}  // namespace samlab
