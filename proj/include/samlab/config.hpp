#pragma once

#include <initializer_list>
#include <optional>
#include <string>

#include "json.hpp"
#include "samlab/checkpoint.hpp"
#include "samlab/data.hpp"
#include "samlab/optim.hpp"

namespace samlab {

struct RunConfig {
  ModelSpec model;
  OptimConfig optim;
  DatasetSpec data;
  int64_t epochs = 1;
  int64_t batch_size = 32;
  uint64_t seed = 0;
  double label_smoothing = 0.1;
  std::string output_dir;
  int64_t checkpoint_every = 0;  // 0 = final checkpoint only
};

namespace detail {

// fail-fast on unknown keys, per config-file contract
inline void expect_keys(const json& j, std::initializer_list<const char*> allowed, const char* ctx) {
  if (!j.is_object()) throw ConfigError(std::string("config: ") + ctx + " must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("config: unknown key '" + item.key() + "' in " + ctx);
  }
}

template <typename T>
T require(const json& j, const char* key, const char* ctx) {
  if (!j.contains(key)) throw ConfigError(std::string("config: missing key '") + key + "' in " + ctx);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "' in " + ctx);
  }
}

template <typename T>
T value_or(const json& j, const char* key, T fallback, const char* ctx) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "' in " + ctx);
  }
}

}  // namespace detail

inline ModelSpec parse_model_spec(const json& j) {
  detail::expect_keys(j, {"architecture", "dims", "channels", "in_channels", "image", "classes",
                          "norm_affine_enabled", "trainable_scope"}, "model");
  ModelSpec s;
  s.architecture = parse_arch(detail::require<std::string>(j, "architecture", "model"));
  s.dims = detail::value_or<std::vector<int64_t>>(j, "dims", {}, "model");
  s.channels = detail::value_or<std::vector<int64_t>>(j, "channels", {}, "model");
  s.in_channels = detail::value_or<int64_t>(j, "in_channels", 1, "model");
  s.image = detail::value_or<int64_t>(j, "image", 8, "model");
  s.classes = detail::value_or<int64_t>(j, "classes", 0, "model");
  s.norm_affine_enabled = detail::value_or<bool>(j, "norm_affine_enabled", true, "model");
  s.trainable_scope =
      parse_train_scope(detail::value_or<std::string>(j, "trainable_scope", "all", "model"));
  if (s.architecture != Arch::mini_conv_bn && s.dims.empty()) {
    throw ConfigError("config: model.dims required for mlp architectures");
  }
  return s;
}

inline PerturbSpec parse_perturb_spec(const json& j) {
  detail::expect_keys(j, {"variant", "rho", "eta", "scope"}, "optim.perturb");
  PerturbSpec p;
  p.variant = parse_variant(detail::require<std::string>(j, "variant", "optim.perturb"));
  p.rho = detail::require<double>(j, "rho", "optim.perturb");
  p.eta = detail::value_or<double>(j, "eta", PerturbSpec::default_eta(p.variant), "optim.perturb");
  p.scope = ScopeSpec::parse(detail::value_or<std::string>(j, "scope", "all", "optim.perturb"));
  p.validate();
  return p;
}

inline OptimConfig parse_optim_config(const json& j) {
  detail::expect_keys(
      j, {"base", "schedule", "perturb", "m", "stage_switch", "ascent_short_circuit"}, "optim");
  OptimConfig cfg;
  const json& jb = j.at("base");
  detail::expect_keys(jb, {"kind", "lr", "momentum", "weight_decay", "beta1", "beta2", "eps"},
                      "optim.base");
  const auto kind = detail::require<std::string>(jb, "kind", "optim.base");
  if (kind == "sgd") {
    SgdCfg c;
    c.lr = detail::require<double>(jb, "lr", "optim.base");
    c.momentum = detail::value_or<double>(jb, "momentum", 0.0, "optim.base");
    c.weight_decay = detail::value_or<double>(jb, "weight_decay", 0.0, "optim.base");
    cfg.base = c;
  } else if (kind == "adamw") {
    AdamWCfg c;
    c.lr = detail::require<double>(jb, "lr", "optim.base");
    c.beta1 = detail::value_or<double>(jb, "beta1", 0.9, "optim.base");
    c.beta2 = detail::value_or<double>(jb, "beta2", 0.999, "optim.base");
    c.eps = detail::value_or<double>(jb, "eps", 1e-8, "optim.base");
    c.weight_decay = detail::value_or<double>(jb, "weight_decay", 0.0, "optim.base");
    cfg.base = c;
  } else {
    throw ConfigError("config: optim.base.kind must be sgd or adamw");
  }
  if (cfg.base_lr() <= 0.0) throw ConfigError("config: optim.base.lr must be > 0");

  const auto sched = detail::value_or<std::string>(j, "schedule", "constant", "optim");
  if (sched == "cosine") {
    cfg.schedule.kind = Schedule::Kind::cosine;
  } else if (sched == "constant") {
    cfg.schedule.kind = Schedule::Kind::constant;
  } else {
    throw ConfigError("config: optim.schedule must be cosine or constant");
  }

  if (j.contains("perturb") && !j.at("perturb").is_null()) {
    cfg.perturb = parse_perturb_spec(j.at("perturb"));
  }
  if (j.contains("m") && !j.at("m").is_null()) {
    cfg.m = detail::require<int64_t>(j, "m", "optim");
    if (*cfg.m < 1) throw ConfigError("config: optim.m must be >= 1");
  }
  if (j.contains("stage_switch") && !j.at("stage_switch").is_null()) {
    const json& js = j.at("stage_switch");
    detail::expect_keys(js, {"epoch", "from", "to"}, "optim.stage_switch");
    StageSwitch sw;
    sw.epoch = detail::require<int64_t>(js, "epoch", "optim.stage_switch");
    auto parse_kind = [](const std::string& s) {
      if (s == "sgd") return StepKind::base_only;
      if (s == "sam") return StepKind::sam;
      throw ConfigError("config: stage_switch sides must be sgd or sam");
    };
    sw.from = parse_kind(detail::require<std::string>(js, "from", "optim.stage_switch"));
    sw.to = parse_kind(detail::require<std::string>(js, "to", "optim.stage_switch"));
    cfg.stage_switch = sw;
  }
  cfg.ascent_short_circuit = detail::value_or<bool>(j, "ascent_short_circuit", true, "optim");
  if (cfg.stage_switch && !cfg.perturb &&
      (cfg.stage_switch->from == StepKind::sam || cfg.stage_switch->to == StepKind::sam)) {
    throw ConfigError("config: stage_switch references sam but optim.perturb is missing");
  }
  return cfg;
}

inline DatasetSpec parse_dataset_spec(const json& j) {
  detail::expect_keys(j, {"kind", "classes", "dim", "n", "noise", "seed", "images_path",
                          "labels_path", "take_n", "split"}, "data");
  DatasetSpec d;
  const auto kind = detail::require<std::string>(j, "kind", "data");
  if (kind == "blobs") {
    d.kind = DatasetSpec::Kind::blobs;
    d.classes = detail::require<int64_t>(j, "classes", "data");
    d.dim = detail::require<int64_t>(j, "dim", "data");
    d.n = detail::require<int64_t>(j, "n", "data");
    d.noise = detail::require<double>(j, "noise", "data");
    d.seed = detail::value_or<uint64_t>(j, "seed", 0, "data");
  } else if (kind == "spirals") {
    d.kind = DatasetSpec::Kind::spirals;
    d.n = detail::require<int64_t>(j, "n", "data");
    d.noise = detail::require<double>(j, "noise", "data");
    d.seed = detail::value_or<uint64_t>(j, "seed", 0, "data");
  } else if (kind == "idx_files") {
    d.kind = DatasetSpec::Kind::idx_files;
    d.images_path = detail::require<std::string>(j, "images_path", "data");
    d.labels_path = detail::require<std::string>(j, "labels_path", "data");
    d.take_n = detail::value_or<int64_t>(j, "take_n", 0, "data");
  } else {
    throw ConfigError("config: data.kind must be blobs, spirals, or idx_files");
  }
  d.split = detail::value_or<double>(j, "split", 0.8, "data");
  return d;
}

inline RunConfig parse_run_config(const json& j) {
  detail::expect_keys(j, {"model", "optim", "data", "epochs", "batch_size", "seed",
                          "label_smoothing", "output_dir", "checkpoint_every"}, "run config");
  RunConfig cfg;
  cfg.model = parse_model_spec(j.at("model"));
  cfg.optim = parse_optim_config(j.at("optim"));
  cfg.data = parse_dataset_spec(j.at("data"));
  cfg.epochs = detail::require<int64_t>(j, "epochs", "run config");
  cfg.batch_size = detail::require<int64_t>(j, "batch_size", "run config");
  cfg.seed = detail::value_or<uint64_t>(j, "seed", 0, "run config");
  cfg.label_smoothing = detail::value_or<double>(j, "label_smoothing", 0.1, "run config");
  cfg.output_dir = detail::value_or<std::string>(j, "output_dir", "", "run config");
  cfg.checkpoint_every = detail::value_or<int64_t>(j, "checkpoint_every", 0, "run config");

  if (cfg.epochs < 1) throw ConfigError("config: epochs must be >= 1");
  const bool uses_bn =
      cfg.model.architecture == Arch::mlp_bn || cfg.model.architecture == Arch::mini_conv_bn;
  if (cfg.batch_size < (uses_bn ? 2 : 1)) {
    throw ConfigError("config: batch_size must be >= 2 for BatchNorm models");
  }
  if (cfg.data.kind != DatasetSpec::Kind::idx_files && cfg.data.n < 2 * cfg.batch_size) {
    throw ConfigError("config: dataset n must be >= 2 * batch_size");
  }
  if (cfg.label_smoothing < 0.0 || cfg.label_smoothing >= 1.0) {
    throw ConfigError("config: label_smoothing must be in [0,1)");
  }
  if (cfg.optim.m && *cfg.optim.m > cfg.batch_size) {
    throw ConfigError("config: optim.m must be <= batch_size");
  }
  if (cfg.optim.stage_switch &&
      (cfg.optim.stage_switch->epoch < 0 || cfg.optim.stage_switch->epoch > cfg.epochs)) {
    throw ConfigError("config: stage_switch.epoch must lie within the run");
  }
  return cfg;
}

inline json to_json(const PerturbSpec& p) {
  return json{{"variant", variant_name(p.variant)}, {"rho", p.rho}, {"eta", p.eta},
              {"scope", p.scope.str()}};
}

inline json to_json(const OptimConfig& cfg) {
  json j;
  if (std::holds_alternative<SgdCfg>(cfg.base)) {
    const auto& c = std::get<SgdCfg>(cfg.base);
    j["base"] = json{{"kind", "sgd"}, {"lr", c.lr}, {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay}};
  } else {
    const auto& c = std::get<AdamWCfg>(cfg.base);
    j["base"] = json{{"kind", "adamw"}, {"lr", c.lr},   {"beta1", c.beta1},
                     {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
  }
  j["schedule"] = cfg.schedule.kind == Schedule::Kind::cosine ? "cosine" : "constant";
  if (cfg.perturb) j["perturb"] = to_json(*cfg.perturb);
  if (cfg.m) j["m"] = *cfg.m;
  if (cfg.stage_switch) {
    auto name = [](StepKind k) { return k == StepKind::sam ? "sam" : "sgd"; };
    j["stage_switch"] = json{{"epoch", cfg.stage_switch->epoch},
                             {"from", name(cfg.stage_switch->from)},
                             {"to", name(cfg.stage_switch->to)}};
  }
  j["ascent_short_circuit"] = cfg.ascent_short_circuit;
  return j;
}

inline json to_json(const DatasetSpec& d) {
  json j;
  switch (d.kind) {
    case DatasetSpec::Kind::blobs:
      j = json{{"kind", "blobs"}, {"classes", d.classes}, {"dim", d.dim},
               {"n", d.n},        {"noise", d.noise},     {"seed", d.seed}};
      break;
    case DatasetSpec::Kind::spirals:
      j = json{{"kind", "spirals"}, {"n", d.n}, {"noise", d.noise}, {"seed", d.seed}};
      break;
    case DatasetSpec::Kind::idx_files:
      j = json{{"kind", "idx_files"},
               {"images_path", d.images_path},
               {"labels_path", d.labels_path},
               {"take_n", d.take_n}};
      break;
  }
  j["split"] = d.split;
  return j;
}

inline json to_json(const RunConfig& cfg) {
  return json{{"model", to_json(cfg.model)},
              {"optim", to_json(cfg.optim)},
              {"data", to_json(cfg.data)},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"seed", cfg.seed},
              {"label_smoothing", cfg.label_smoothing},
              {"output_dir", cfg.output_dir},
              {"checkpoint_every", cfg.checkpoint_every}};
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace samlab
