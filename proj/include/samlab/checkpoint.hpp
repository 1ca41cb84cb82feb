#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "samlab/common.hpp"
#include "samlab/nn.hpp"

namespace samlab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// enum <-> string
// ---------------------------------------------------------------------------

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::mlp_bn: return "mlp_bn";
    case Arch::mlp_ln: return "mlp_ln";
    case Arch::mini_conv_bn: return "mini_conv_bn";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "mlp_bn") return Arch::mlp_bn;
  if (s == "mlp_ln") return Arch::mlp_ln;
  if (s == "mini_conv_bn") return Arch::mini_conv_bn;
  throw ConfigError("unknown architecture '" + s + "'");
}

inline const char* scope_name(TrainScope s) {
  switch (s) {
    case TrainScope::all: return "all";
    case TrainScope::fix_norm: return "fix_norm";
    case TrainScope::only_norm: return "only_norm";
  }
  return "?";
}

inline TrainScope parse_train_scope(const std::string& s) {
  if (s == "all") return TrainScope::all;
  if (s == "fix_norm") return TrainScope::fix_norm;
  if (s == "only_norm") return TrainScope::only_norm;
  throw ConfigError("unknown trainable_scope '" + s + "'");
}

inline Tag parse_tag(const std::string& s) {
  if (s == "weight") return Tag::weight;
  if (s == "bias") return Tag::bias;
  if (s == "norm_weight") return Tag::norm_weight;
  if (s == "norm_bias") return Tag::norm_bias;
  throw ConfigError("unknown tag '" + s + "'");
}

// ---------------------------------------------------------------------------
// json serialization of model parts
// ---------------------------------------------------------------------------

inline json to_json(const ModelSpec& s) {
  return json{{"architecture", arch_name(s.architecture)},
              {"dims", s.dims},
              {"channels", s.channels},
              {"in_channels", s.in_channels},
              {"image", s.image},
              {"classes", s.classes},
              {"norm_affine_enabled", s.norm_affine_enabled},
              {"trainable_scope", scope_name(s.trainable_scope)}};
}

inline ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  s.architecture = parse_arch(j.at("architecture").get<std::string>());
  s.dims = j.value("dims", std::vector<int64_t>{});
  s.channels = j.value("channels", std::vector<int64_t>{});
  s.in_channels = j.value("in_channels", int64_t{1});
  s.image = j.value("image", int64_t{8});
  s.classes = j.value("classes", int64_t{0});
  s.norm_affine_enabled = j.value("norm_affine_enabled", true);
  s.trainable_scope = parse_train_scope(j.value("trainable_scope", std::string("all")));
  return s;
}

inline json to_json(const ParamView& v) {
  return json{{"param_id", v.param_id}, {"offset", v.offset},
              {"length", v.length},     {"tag", tag_name(v.tag)},
              {"layer_id", v.layer_id}, {"layer_group_id", v.layer_group_id},
              {"shape", v.shape}};
}

inline ParamView param_view_from_json(const json& j) {
  ParamView v;
  v.param_id = j.at("param_id").get<int>();
  v.offset = j.at("offset").get<int64_t>();
  v.length = j.at("length").get<int64_t>();
  v.tag = parse_tag(j.at("tag").get<std::string>());
  v.layer_id = j.at("layer_id").get<int>();
  v.layer_group_id = j.at("layer_group_id").get<int>();
  v.shape = j.at("shape").get<Shape>();
  return v;
}

inline json to_json(const NormState& s) {
  return json{{"running_mean", s.running_mean},
              {"running_var", s.running_var},
              {"momentum", s.momentum},
              {"epsilon", s.epsilon}};
}

inline NormState norm_state_from_json(const json& j) {
  NormState s;
  s.running_mean = j.at("running_mean").get<std::vector<double>>();
  s.running_var = j.at("running_var").get<std::vector<double>>();
  s.momentum = j.at("momentum").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  return s;
}

// ---------------------------------------------------------------------------
// checkpoint files
// ---------------------------------------------------------------------------

struct RngState {
  uint64_t key = 0;
  uint64_t counter = 0;
};

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

constexpr int kCheckpointFormatVersion = 1;

/// {format_version, model_spec, param_views, flat_params, norm_states,
///  optimizer_state, rng_state} plus an fnv1a checksum over the payload.
inline void checkpoint_save(const std::filesystem::path& path, const Model& model,
                            const json& optimizer_state, const RngState& rng_state) {
  json doc;
  doc["format_version"] = kCheckpointFormatVersion;
  doc["model_spec"] = to_json(model.spec);
  json views = json::array();
  for (const auto& v : model.views) views.push_back(to_json(v));
  doc["param_views"] = views;
  doc["flat_params"] = model.params;
  json states = json::array();
  for (const auto& s : model.norm_states) states.push_back(to_json(s));
  doc["norm_states"] = states;
  doc["optimizer_state"] = optimizer_state;
  doc["rng_state"] = json{{"key", std::to_string(rng_state.key)},
                          {"counter", std::to_string(rng_state.counter)}};
  doc["checksum"] = std::to_string(fnv1a64(doc.dump()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("checkpoint: cannot write '" + path.string() + "'");
  out << doc.dump(2) << "\n";
}

struct LoadedCheckpoint {
  Model model;
  json optimizer_state;
  RngState rng_state;
};

inline LoadedCheckpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("checkpoint: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!doc.contains("format_version") || doc["format_version"].get<int>() != kCheckpointFormatVersion) {
    throw ConfigError("checkpoint: '" + path.string() + "' format_version mismatch");
  }
  if (!doc.contains("checksum")) throw ConfigError("checkpoint: missing checksum");
  const std::string stored = doc["checksum"].get<std::string>();
  doc.erase("checksum");
  const std::string computed = std::to_string(fnv1a64(doc.dump()));
  if (stored != computed) {
    throw ConfigError("checkpoint: '" + path.string() + "' checksum mismatch (corrupted file)");
  }

  const ModelSpec spec = model_spec_from_json(doc.at("model_spec"));
  LoadedCheckpoint out{Model::build(spec, 0), doc.at("optimizer_state"), RngState{}};
  std::vector<ParamView> stored_views;
  for (const auto& jv : doc.at("param_views")) stored_views.push_back(param_view_from_json(jv));
  if (stored_views != out.model.views) {
    throw ConfigError("checkpoint: param_views do not match the model spec layout");
  }
  const auto params = doc.at("flat_params").get<std::vector<double>>();
  if (params.size() != out.model.params.size()) {
    throw ConfigError("checkpoint: flat_params length mismatch");
  }
  out.model.params = params;
  std::vector<NormState> states;
  for (const auto& js : doc.at("norm_states")) states.push_back(norm_state_from_json(js));
  if (states.size() != out.model.norm_states.size()) {
    throw ConfigError("checkpoint: norm_states count mismatch");
  }
  out.model.norm_states = std::move(states);
  out.rng_state.key = std::stoull(doc.at("rng_state").at("key").get<std::string>());
  out.rng_state.counter = std::stoull(doc.at("rng_state").at("counter").get<std::string>());
  return out;
}

}  // namespace samlab
