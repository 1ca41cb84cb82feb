// samlab command line: train runs, measure sharpness, check the convergence
// bound, inspect perturbation masks, export parameter histograms.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "samlab/checkpoint.hpp"
#include "samlab/config.hpp"
#include "samlab/convergence.hpp"
#include "samlab/sharpness.hpp"
#include "samlab/train.hpp"

namespace {

using namespace samlab;

// run config lookup for commands that operate on a checkpoint: explicit
// --config wins, otherwise the config.json echo next to the checkpoint
RunConfig resolve_run_config(const std::string& checkpoint_path, const std::string& config_path) {
  if (!config_path.empty()) return load_run_config(config_path);
  const auto sibling = std::filesystem::path(checkpoint_path).parent_path() / "config.json";
  if (!std::filesystem::exists(sibling)) {
    throw ConfigError("no --config given and no config.json next to the checkpoint (" +
                      sibling.string() + ")");
  }
  return load_run_config(sibling.string());
}

std::vector<int64_t> parse_norm_coords(const std::string& s, int64_t dim) {
  std::vector<int64_t> coords;
  if (s == "none") return coords;
  if (s == "all") {
    for (int64_t i = 0; i < dim; ++i) coords.push_back(i);
    return coords;
  }
  size_t pos = 0;
  while (pos < s.size()) {
    size_t next = s.find(',', pos);
    const std::string tok = s.substr(pos, next == std::string::npos ? next : next - pos);
    try {
      coords.push_back(std::stoll(tok));
    } catch (const std::logic_error&) {
      throw ConfigError("bad --norm-coords entry '" + tok + "'");
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return coords;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

struct TrainArgs {
  std::string config, out, resume;
};

struct SharpnessArgs {
  std::string checkpoint, out, config;
  double rho = 0.0;
  int steps = 20;
  int64_t m = 128;
  int64_t subset = 2048;
  uint64_t seed = 0;
};

struct ConvergeArgs {
  std::string fn = "quadratic";
  double h = 0.1;
  double rho = 0.1;
  int64_t T = 100;
  std::string norm_coords = "all";
  std::string noise = "none";
  uint64_t seed = 0;
  double lambda = 1.0;
  uint64_t fn_seed = 0;
  std::string out;
};

struct InspectArgs {
  std::string checkpoint, scope, config;
};

struct ExportArgs {
  std::string checkpoint, out;
  int bins = 20;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  TrainResult r = train(cfg, a.out, a.resume);
  const EpochRow& last = r.rows.back();
  std::printf("trained %zu epochs -> %s\n", r.rows.size(), r.out_dir.string().c_str());
  std::printf("final: train_acc=%.4f test_acc=%.4f test_loss=%.6f\n", last.train_acc, last.test_acc,
              last.test_loss);
  return 0;
}

int run_sharpness(const SharpnessArgs& a) {
  LoadedCheckpoint ckpt = checkpoint_load(a.checkpoint);
  RunConfig cfg = resolve_run_config(a.checkpoint, a.config);
  DatasetPair data = load_dataset(cfg.data);
  SharpnessConfig scfg;
  scfg.rho = a.rho;
  scfg.steps = a.steps;
  scfg.m = a.m;
  scfg.subset_size = a.subset;
  scfg.seed = a.seed;
  SharpnessReport rep = adaptive_sharpness(ckpt.model, data.train.X.data(), data.train.y.data(),
                                           data.train.n, data.train.dim, scfg);
  write_json_file(a.out, to_json(rep));
  std::printf("s_w_m=%.6g over %zu batches (rho=%g, steps=%d) -> %s\n", rep.s_w_m,
              rep.per_batch.size(), rep.rho, rep.steps, a.out.c_str());
  return 0;
}

int run_converge(const ConvergeArgs& a) {
  ConvergenceConfig cfg;
  cfg.test_fn = parse_test_fn(a.fn);
  cfg.lambda = a.lambda;
  cfg.fn_seed = a.fn_seed;
  cfg.h = a.h;
  cfg.rho = a.rho;
  cfg.T = a.T;
  if (a.noise == "none") {
    cfg.noise = NoiseKind::none;
  } else if (a.noise == "per_sample") {
    cfg.noise = NoiseKind::per_sample;
  } else {
    throw ConfigError("--noise must be none or per_sample");
  }
  cfg.noise_seed = a.seed;
  const int64_t dim = detail::make_problem(cfg).dim;
  cfg.norm_coords = parse_norm_coords(a.norm_coords, dim);
  BoundReport rep = run_convergence_check(cfg);
  write_json_file(a.out, to_json(cfg, rep));
  std::printf("lhs=%.6g rhs=%.6g ratio=%.4f (bound %s) -> %s\n", rep.lhs, rep.rhs, rep.ratio,
              rep.ratio <= 1.0 ? "holds" : "VIOLATED", a.out.c_str());
  return rep.ratio <= 1.0 ? 0 : 2;
}

int run_inspect_masks(const InspectArgs& a) {
  LoadedCheckpoint ckpt = checkpoint_load(a.checkpoint);
  Model& model = ckpt.model;
  ScopeSpec scope = ScopeSpec::parse(a.scope);
  std::optional<std::vector<double>> grads;
  if (scope.kind == ScopeSpec::Kind::fisher_topk) {
    // gradient probe: first batch of the train split, in data order
    RunConfig cfg = resolve_run_config(a.checkpoint, a.config);
    DatasetPair data = load_dataset(cfg.data);
    const int64_t n = std::min<int64_t>(cfg.batch_size, data.train.n);
    Batch batch{data.train.X.data(), data.train.y.data(), n, data.train.dim};
    grads.emplace();
    model.loss_and_grad(batch, LossOpts{cfg.label_smoothing, false}, BnMode::train_frozen, *grads);
  }
  auto mask = scope_mask(scope, model.views, grads ? &*grads : nullptr, model.total_params());
  SparsityReport rep = sparsity_report(mask, model.views);
  std::printf("scope %s on %lld parameters\n", scope.str().c_str(),
              static_cast<long long>(rep.total));
  std::printf("  sparsity           %.6f\n", rep.sparsity);
  std::printf("  active total       %lld\n", static_cast<long long>(rep.active_total));
  std::printf("  active weight      %lld\n", static_cast<long long>(rep.active_weight));
  std::printf("  active bias        %lld\n", static_cast<long long>(rep.active_bias));
  std::printf("  active norm_weight %lld\n", static_cast<long long>(rep.active_norm_weight));
  std::printf("  active norm_bias   %lld\n", static_cast<long long>(rep.active_norm_bias));
  return 0;
}

int run_export_hist(const ExportArgs& a) {
  LoadedCheckpoint ckpt = checkpoint_load(a.checkpoint);
  auto rows = param_histograms(ckpt.model, a.bins);
  write_histograms_csv(a.out, rows);
  std::printf("wrote %zu histogram rows -> %s\n", rows.size(), a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"samlab: a desk-scale laboratory for sharpness-aware minimization"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "run a training experiment from a JSON config");
  train_cmd->add_option("--config", train_args.config, "run config path")->required();
  train_cmd->add_option("--out", train_args.out, "output directory (overrides config output_dir)");
  train_cmd->add_option("--resume", train_args.resume, "checkpoint to resume from");

  SharpnessArgs sh_args;
  auto* sh_cmd = app.add_subcommand("sharpness", "adaptive l-inf m-sharpness of a checkpoint");
  sh_cmd->add_option("--checkpoint", sh_args.checkpoint, "checkpoint path")->required();
  sh_cmd->add_option("--rho", sh_args.rho, "evaluation ball radius")->required();
  sh_cmd->add_option("--steps", sh_args.steps, "ascent steps (20 or 1)")->default_val(20);
  sh_cmd->add_option("--m", sh_args.m, "sub-batch size")->default_val(128);
  sh_cmd->add_option("--subset", sh_args.subset, "evaluation subset size")->default_val(2048);
  sh_cmd->add_option("--seed", sh_args.seed, "subset draw seed")->default_val(0);
  sh_cmd->add_option("--out", sh_args.out, "output JSON path")->required();
  sh_cmd->add_option("--config", sh_args.config, "run config (default: config.json next to checkpoint)");

  ConvergeArgs cv_args;
  auto* cv_cmd = app.add_subcommand("converge", "verify the SAM-ON convergence bound");
  cv_cmd->set_help_flag("--help", "print help");  // frees -h for the step size
  cv_cmd->add_option("--fn", cv_args.fn, "quadratic | logistic_toy | sin_quadratic")->required();
  cv_cmd->add_option("--h", cv_args.h, "step size (h <= 1/L)")->required();
  cv_cmd->add_option("--rho", cv_args.rho, "ascent radius")->required();
  cv_cmd->add_option("--T", cv_args.T, "iteration count")->required();
  cv_cmd->add_option("--norm-coords", cv_args.norm_coords, "all | none | comma list of indices")
      ->default_val("all");
  cv_cmd->add_option("--noise", cv_args.noise, "none | per_sample")->default_val("none");
  cv_cmd->add_option("--seed", cv_args.seed, "noise seed")->default_val(0);
  cv_cmd->add_option("--lambda", cv_args.lambda, "quadratic curvature")->default_val(1.0);
  cv_cmd->add_option("--fn-seed", cv_args.fn_seed, "logistic_toy data seed")->default_val(0);
  cv_cmd->add_option("--out", cv_args.out, "output JSON path")->required();

  auto* inspect_cmd = app.add_subcommand("inspect", "inspect run artifacts");
  InspectArgs in_args;
  auto* masks_cmd = inspect_cmd->add_subcommand("masks", "print the sparsity report of a scope");
  masks_cmd->add_option("--checkpoint", in_args.checkpoint, "checkpoint path")->required();
  masks_cmd
      ->add_option("--scope", in_args.scope,
                   "all | only_norm | no_norm | random:<s>:<seed> | fisher_topk:<s>")
      ->required();
  masks_cmd->add_option("--config", in_args.config, "run config (for fisher_topk gradients)");
  inspect_cmd->require_subcommand(1);

  auto* export_cmd = app.add_subcommand("export", "export run artifacts");
  ExportArgs ex_args;
  auto* hist_cmd = export_cmd->add_subcommand("hist", "per-tag |w| histograms as CSV");
  hist_cmd->add_option("--checkpoint", ex_args.checkpoint, "checkpoint path")->required();
  hist_cmd->add_option("--bins", ex_args.bins, "histogram bins")->default_val(20);
  hist_cmd->add_option("--out", ex_args.out, "output CSV path")->required();
  export_cmd->require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad flags are config errors
  }

  try {
    if (*train_cmd) return run_train(train_args);
    if (*sh_cmd) return run_sharpness(sh_args);
    if (*cv_cmd) return run_converge(cv_args);
    if (*inspect_cmd && *masks_cmd) return run_inspect_masks(in_args);
    if (*export_cmd && *hist_cmd) return run_export_hist(ex_args);
    throw ConfigError("no subcommand selected");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}
