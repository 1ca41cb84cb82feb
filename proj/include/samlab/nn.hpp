#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "samlab/common.hpp"
#include "samlab/rng.hpp"
#include "samlab/tensor.hpp"

namespace samlab {

enum class Tag { weight, bias, norm_weight, norm_bias };

inline const char* tag_name(Tag t) {
  switch (t) {
    case Tag::weight: return "weight";
    case Tag::bias: return "bias";
    case Tag::norm_weight: return "norm_weight";
    case Tag::norm_bias: return "norm_bias";
  }
  return "?";
}

inline bool is_norm_tag(Tag t) { return t == Tag::norm_weight || t == Tag::norm_bias; }

/// One registered parameter tensor: a slice of the model's flat parameter
/// vector with its semantic tag. Slices partition the flat vector exactly.
struct ParamView {
  int param_id = 0;
  int64_t offset = 0;
  int64_t length = 0;
  Tag tag = Tag::weight;
  int layer_id = 0;        // index of the layer in the network
  int layer_group_id = 0;  // one group per parameter tensor
  Shape shape;

  bool operator==(const ParamView&) const = default;
};

struct NormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

enum class Arch { mlp_bn, mlp_ln, mini_conv_bn };
enum class TrainScope { all, fix_norm, only_norm };

struct ModelSpec {
  Arch architecture = Arch::mlp_bn;
  std::vector<int64_t> dims;      // mlp_*: layer widths, dims.front()=input, dims.back()=classes
  std::vector<int64_t> channels;  // mini_conv_bn: the two conv widths
  int64_t in_channels = 1;        // mini_conv_bn
  int64_t image = 8;              // mini_conv_bn: square input side
  int64_t classes = 0;            // mini_conv_bn
  bool norm_affine_enabled = true;
  TrainScope trainable_scope = TrainScope::all;

  bool operator==(const ModelSpec&) const = default;
};

enum class BnMode { train_update, train_frozen, eval };

struct LossOpts {
  double label_smoothing = 0.0;
  bool logit_normalize = false;
};

struct Batch {
  const double* x = nullptr;
  const int* y = nullptr;
  int64_t n = 0;
  int64_t dim = 0;
};

// ---------------------------------------------------------------------------
// layer forwards
// ---------------------------------------------------------------------------

/// BatchNorm over the batch dimension (per feature for rank-2 input, per
/// channel for rank-4). Train modes normalize with current batch statistics;
/// train_update additionally advances the running estimates (biased batch
/// variance in the normalization, unbiased in the running update). Eval mode
/// normalizes with the running estimates and never touches state.
inline Tensor batch_norm_forward(Tape& tape, Tensor x, std::optional<Tensor> gamma,
                                 std::optional<Tensor> beta, NormState& state, BnMode mode) {
  const Shape xs = x.shape();
  if (xs.size() != 2 && xs.size() != 4) {
    throw EngineError("batch_norm_forward: expected rank-2 or rank-4 input, got " + shape_str(xs));
  }
  const int64_t features = xs[1];
  if (static_cast<int64_t>(state.running_mean.size()) != features ||
      static_cast<int64_t>(state.running_var.size()) != features) {
    throw EngineError("batch_norm_forward: feature mismatch, input " + shape_str(xs) +
                      " vs state size " + std::to_string(state.running_mean.size()));
  }
  if (gamma && gamma->size() != features) {
    throw EngineError("batch_norm_forward: feature mismatch, input " + shape_str(xs) +
                      " vs gamma " + shape_str(gamma->shape()));
  }
  if (beta && beta->size() != features) {
    throw EngineError("batch_norm_forward: feature mismatch, input " + shape_str(xs) +
                      " vs beta " + shape_str(beta->shape()));
  }

  Tensor xhat{nullptr, -1};
  if (mode == BnMode::eval) {
    std::vector<double> shift(static_cast<size_t>(features));
    std::vector<double> sc(static_cast<size_t>(features));
    for (int64_t f = 0; f < features; ++f) {
      shift[static_cast<size_t>(f)] = -state.running_mean[static_cast<size_t>(f)];
      sc[static_cast<size_t>(f)] = 1.0 / std::sqrt(state.running_var[static_cast<size_t>(f)] + state.epsilon);
    }
    Tensor sh = tape.leaf({features}, std::move(shift), false);
    Tensor sv = tape.leaf({features}, std::move(sc), false);
    xhat = mul(add(x, sh), sv);
  } else {
    std::vector<double> m, v;
    xhat = batch_norm_xhat(x, state.epsilon, &m, &v);
    if (mode == BnMode::train_update) {
      const int64_t count = xs.size() == 2 ? xs[0] : xs[0] * xs[2] * xs[3];
      const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
      for (int64_t f = 0; f < features; ++f) {
        auto fi = static_cast<size_t>(f);
        state.running_mean[fi] = (1.0 - state.momentum) * state.running_mean[fi] + state.momentum * m[fi];
        state.running_var[fi] = (1.0 - state.momentum) * state.running_var[fi] + state.momentum * v[fi] * unbias;
      }
    }
  }
  if (gamma) xhat = mul(xhat, *gamma);
  if (beta) xhat = add(xhat, *beta);
  return xhat;
}

/// LayerNorm: per-sample normalization over the feature axis, then affine.
inline Tensor layer_norm_forward(Tape& tape, Tensor x, std::optional<Tensor> gamma,
                                 std::optional<Tensor> beta, double epsilon) {
  (void)tape;
  Tensor xhat = layer_norm_xhat(x, epsilon);
  if (gamma) xhat = mul(xhat, *gamma);
  if (beta) xhat = add(xhat, *beta);
  return xhat;
}

/// Mean label-smoothed cross-entropy. With logit_normalize, each row of
/// logits is divided by its l2 norm (1e-12 guard) before the log-softmax.
inline Tensor cross_entropy_ls(Tape& tape, Tensor logits, const std::vector<int>& targets,
                               double smoothing, bool logit_normalize) {
  const Shape& ls = logits.shape();
  if (ls.size() != 2 || ls[0] != static_cast<int64_t>(targets.size())) {
    throw EngineError("cross_entropy_ls: logits " + shape_str(ls) + " vs " +
                      std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) throw EngineError("cross_entropy_ls: empty batch");
  if (smoothing < 0.0 || smoothing >= 1.0) throw EngineError("cross_entropy_ls: smoothing out of [0,1)");
  const int64_t batch = ls[0], classes = ls[1];
  for (int t : targets) {
    if (t < 0 || t >= classes) {
      throw EngineError("cross_entropy_ls: target " + std::to_string(t) + " out of range [0," +
                        std::to_string(classes) + ")");
    }
  }
  Tensor z = logit_normalize ? row_l2_normalize(logits) : logits;
  Tensor logp = log_softmax(z);
  std::vector<double> w(static_cast<size_t>(batch * classes), smoothing / static_cast<double>(classes));
  for (int64_t i = 0; i < batch; ++i) {
    w[static_cast<size_t>(i * classes + targets[static_cast<size_t>(i)])] += 1.0 - smoothing;
  }
  Tensor wt = tape.leaf({batch, classes}, std::move(w), false);
  return scale(sum(mul(logp, wt)), -1.0 / static_cast<double>(batch));
}

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

/// A miniature architecture instance: flat parameter vector, its ParamView
/// registry, and per-norm-layer running state.
class Model {
 public:
  ModelSpec spec;
  std::vector<double> params;
  std::vector<ParamView> views;
  std::vector<NormState> norm_states;

  static Model build(const ModelSpec& spec, uint64_t seed);

  int64_t total_params() const { return static_cast<int64_t>(params.size()); }

  double norm_fraction() const {
    if (views.empty()) throw EngineError("norm_fraction: empty registry");
    int64_t norm = 0;
    for (const auto& v : views)
      if (is_norm_tag(v.tag)) norm += v.length;
    return static_cast<double>(norm) / static_cast<double>(total_params());
  }

  /// Coordinates allowed to move under ModelSpec::trainable_scope.
  std::vector<uint8_t> trainable_mask() const {
    std::vector<uint8_t> m(params.size(), 1);
    if (spec.trainable_scope == TrainScope::all) return m;
    const bool keep_norm = spec.trainable_scope == TrainScope::only_norm;
    for (const auto& v : views) {
      const bool active = is_norm_tag(v.tag) == keep_norm;
      if (!active) std::fill(m.begin() + v.offset, m.begin() + v.offset + v.length, uint8_t{0});
    }
    return m;
  }

  /// Forward pass to logits [n, classes]. Parameter leaves are re-created on
  /// the given tape; their handles stay available for gradient gathering.
  Tensor forward(Tape& tape, const Batch& batch, BnMode mode, bool params_require_grad = true);

  Tensor loss(Tape& tape, const Batch& batch, const LossOpts& opts, BnMode mode,
              bool params_require_grad = true) {
    Tensor logits = forward(tape, batch, mode, params_require_grad);
    std::vector<int> targets(batch.y, batch.y + batch.n);
    return cross_entropy_ls(tape, logits, targets, opts.label_smoothing, opts.logit_normalize);
  }

  /// One forward/backward pass; returns the loss and fills `grad_out` (flat,
  /// aligned with params). When `needed_view_ids` is given, only those views'
  /// gradients are accumulated (the rest read as zero) — the ascent-pass
  /// short-circuit for norm-only scopes.
  double loss_and_grad(const Batch& batch, const LossOpts& opts, BnMode mode,
                       std::vector<double>& grad_out,
                       const std::vector<int>* needed_view_ids = nullptr) {
    Tape tape;
    Tensor l = loss(tape, batch, opts, mode, true);
    std::unordered_set<int> filter;
    if (needed_view_ids) {
      for (int vid : *needed_view_ids) filter.insert(leaves_[static_cast<size_t>(vid)].id);
      tape.backward(l, &filter);
    } else {
      tape.backward(l);
    }
    grad_out.assign(params.size(), 0.0);
    for (size_t i = 0; i < views.size(); ++i) {
      const auto& g = leaves_[i].grad();
      std::copy(g.begin(), g.end(), grad_out.begin() + views[i].offset);
    }
    return l.value()[0];
  }

  struct Eval {
    double loss = 0.0;
    double accuracy = 0.0;
  };

  /// Eval-mode metrics over a whole array of samples, in fixed-size chunks.
  Eval evaluate(const double* X, const int* y, int64_t n, int64_t dim, const LossOpts& opts,
                int64_t chunk = 256) {
    if (n <= 0) throw EngineError("evaluate: empty dataset");
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (int64_t start = 0; start < n; start += chunk) {
      const int64_t len = std::min(chunk, n - start);
      Batch b{X + start * dim, y + start, len, dim};
      Tape tape;
      Tensor logits = forward(tape, b, BnMode::eval, false);
      std::vector<int> targets(b.y, b.y + b.n);
      Tensor l = cross_entropy_ls(tape, logits, targets, opts.label_smoothing, opts.logit_normalize);
      loss_sum += l.value()[0] * static_cast<double>(len);
      const auto& lv = logits.value();
      const int64_t classes = logits.shape()[1];
      for (int64_t i = 0; i < len; ++i) {
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
          if (lv[i * classes + c] > lv[i * classes + best]) best = c;
        if (best == targets[static_cast<size_t>(i)]) ++correct;
      }
    }
    return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
  }

  const std::vector<Tensor>& last_leaves() const { return leaves_; }

  /// View ids whose tag is norm_weight/norm_bias.
  std::vector<int> norm_view_ids() const {
    std::vector<int> ids;
    for (const auto& v : views)
      if (is_norm_tag(v.tag)) ids.push_back(v.param_id);
    return ids;
  }

 private:
  std::vector<Tensor> leaves_;

  Tensor leaf_for_view(Tape& tape, int view_id, bool requires_grad) {
    const ParamView& v = views[static_cast<size_t>(view_id)];
    std::vector<double> data(params.begin() + v.offset, params.begin() + v.offset + v.length);
    Tensor t = tape.leaf(v.shape, std::move(data), requires_grad);
    leaves_[static_cast<size_t>(view_id)] = t;
    return t;
  }
};

namespace detail {

struct RegistryBuilder {
  std::vector<ParamView> views;
  int64_t offset = 0;

  int add(Tag tag, int layer_id, Shape shape) {
    ParamView v;
    v.param_id = static_cast<int>(views.size());
    v.offset = offset;
    v.length = numel(shape);
    v.tag = tag;
    v.layer_id = layer_id;
    v.layer_group_id = v.param_id;
    v.shape = std::move(shape);
    offset += v.length;
    views.push_back(std::move(v));
    return views.back().param_id;
  }
};

}  // namespace detail

inline Model Model::build(const ModelSpec& spec, uint64_t seed) {
  Model m;
  m.spec = spec;
  detail::RegistryBuilder rb;
  int n_norm_layers = 0;

  if (spec.architecture == Arch::mlp_bn || spec.architecture == Arch::mlp_ln) {
    if (spec.dims.size() < 2) throw ConfigError("model: mlp dims need at least [in, out]");
    for (int64_t d : spec.dims)
      if (d <= 0) throw ConfigError("model: dims must be positive");
    const size_t layers = spec.dims.size() - 1;
    int layer_id = 0;
    for (size_t i = 0; i < layers; ++i) {
      rb.add(Tag::weight, layer_id, {spec.dims[i], spec.dims[i + 1]});
      rb.add(Tag::bias, layer_id, {spec.dims[i + 1]});
      ++layer_id;
      const bool hidden = i + 1 < layers;
      if (hidden) {
        if (spec.norm_affine_enabled) {
          rb.add(Tag::norm_weight, layer_id, {spec.dims[i + 1]});
          rb.add(Tag::norm_bias, layer_id, {spec.dims[i + 1]});
        }
        ++layer_id;
        ++n_norm_layers;
      }
    }
  } else if (spec.architecture == Arch::mini_conv_bn) {
    if (spec.channels.size() != 2) throw ConfigError("model: mini_conv_bn needs exactly 2 channel widths");
    if (spec.classes <= 0) throw ConfigError("model: mini_conv_bn needs classes > 0");
    if (spec.image < 2 || spec.image % 2 != 0) throw ConfigError("model: mini_conv_bn image side must be even and >= 2");
    const int64_t c1 = spec.channels[0], c2 = spec.channels[1];
    if (c1 <= 0 || c2 <= 0 || spec.in_channels <= 0) throw ConfigError("model: channels must be positive");
    int layer_id = 0;
    rb.add(Tag::weight, layer_id++, {c1, spec.in_channels, 3, 3});
    if (spec.norm_affine_enabled) {
      rb.add(Tag::norm_weight, layer_id, {c1});
      rb.add(Tag::norm_bias, layer_id, {c1});
    }
    ++layer_id;
    ++n_norm_layers;
    rb.add(Tag::weight, layer_id++, {c2, c1, 3, 3});
    if (spec.norm_affine_enabled) {
      rb.add(Tag::norm_weight, layer_id, {c2});
      rb.add(Tag::norm_bias, layer_id, {c2});
    }
    ++layer_id;
    ++n_norm_layers;
    const int64_t side = spec.image / 2;
    rb.add(Tag::weight, layer_id, {c2 * side * side, spec.classes});
    rb.add(Tag::bias, layer_id, {spec.classes});
  } else {
    throw ConfigError("model: unknown architecture");
  }

  m.views = std::move(rb.views);
  m.params.assign(static_cast<size_t>(rb.offset), 0.0);
  m.leaves_.assign(m.views.size(), Tensor{});

  // He-uniform for weights, zeros for biases, gamma=1, beta=0; one sequential
  // draw order fixed by the registry.
  Rng rng(seed);
  for (const auto& v : m.views) {
    double* dst = m.params.data() + v.offset;
    switch (v.tag) {
      case Tag::weight: {
        int64_t fan_in = 0;
        if (v.shape.size() == 2) fan_in = v.shape[0];
        else fan_in = v.shape[1] * v.shape[2] * v.shape[3];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (int64_t i = 0; i < v.length; ++i) dst[i] = rng.uniform(-limit, limit);
        break;
      }
      case Tag::bias:
        break;  // zeros
      case Tag::norm_weight:
        std::fill(dst, dst + v.length, 1.0);
        break;
      case Tag::norm_bias:
        break;  // zeros
    }
  }

  // norm states, in network order
  if (spec.architecture == Arch::mlp_bn || spec.architecture == Arch::mlp_ln) {
    for (size_t i = 0; i + 2 < spec.dims.size(); ++i) {
      NormState st;
      st.running_mean.assign(static_cast<size_t>(spec.dims[i + 1]), 0.0);
      st.running_var.assign(static_cast<size_t>(spec.dims[i + 1]), 1.0);
      m.norm_states.push_back(std::move(st));
    }
  } else {
    for (int64_t c : spec.channels) {
      NormState st;
      st.running_mean.assign(static_cast<size_t>(c), 0.0);
      st.running_var.assign(static_cast<size_t>(c), 1.0);
      m.norm_states.push_back(std::move(st));
    }
  }
  (void)n_norm_layers;
  return m;
}

inline Tensor Model::forward(Tape& tape, const Batch& batch, BnMode mode, bool params_require_grad) {
  if (batch.n <= 0) throw EngineError("forward: empty batch");
  leaves_.assign(views.size(), Tensor{});
  std::vector<double> xdata(batch.x, batch.x + batch.n * batch.dim);

  auto gamma_beta = [&](Tape& t, int& vid) -> std::pair<std::optional<Tensor>, std::optional<Tensor>> {
    if (!spec.norm_affine_enabled) return {std::nullopt, std::nullopt};
    Tensor g = leaf_for_view(t, vid++, params_require_grad);
    Tensor b = leaf_for_view(t, vid++, params_require_grad);
    return {g, b};
  };

  if (spec.architecture == Arch::mlp_bn || spec.architecture == Arch::mlp_ln) {
    if (batch.dim != spec.dims.front()) {
      throw EngineError("forward: input dim " + std::to_string(batch.dim) + " vs model " +
                        std::to_string(spec.dims.front()));
    }
    Tensor h = tape.leaf({batch.n, batch.dim}, std::move(xdata), false);
    const size_t layers = spec.dims.size() - 1;
    int vid = 0;
    size_t norm_idx = 0;
    for (size_t i = 0; i < layers; ++i) {
      Tensor w = leaf_for_view(tape, vid++, params_require_grad);
      Tensor b = leaf_for_view(tape, vid++, params_require_grad);
      h = add(matmul(h, w), b);
      const bool hidden = i + 1 < layers;
      if (hidden) {
        auto [g, be] = gamma_beta(tape, vid);
        if (spec.architecture == Arch::mlp_bn) {
          h = batch_norm_forward(tape, h, g, be, norm_states[norm_idx], mode);
        } else {
          h = layer_norm_forward(tape, h, g, be, norm_states[norm_idx].epsilon);
        }
        ++norm_idx;
        h = relu(h);
      }
    }
    return h;
  }

  // mini_conv_bn: conv3x3-BN-ReLU, conv3x3-BN-ReLU, pool, linear
  const int64_t side = spec.image;
  if (batch.dim != spec.in_channels * side * side) {
    throw EngineError("forward: input dim " + std::to_string(batch.dim) + " vs model " +
                      std::to_string(spec.in_channels * side * side));
  }
  Tensor h = tape.leaf({batch.n, spec.in_channels, side, side}, std::move(xdata), false);
  int vid = 0;
  for (size_t ci = 0; ci < 2; ++ci) {
    Tensor k = leaf_for_view(tape, vid++, params_require_grad);
    h = conv2d_3x3(h, k);
    auto [g, be] = gamma_beta(tape, vid);
    h = batch_norm_forward(tape, h, g, be, norm_states[ci], mode);
    h = relu(h);
  }
  h = max_pool2x2(h);
  const int64_t flat = spec.channels[1] * (side / 2) * (side / 2);
  h = reshape(h, {batch.n, flat});
  Tensor w = leaf_for_view(tape, vid++, params_require_grad);
  Tensor b = leaf_for_view(tape, vid++, params_require_grad);
  return add(matmul(h, w), b);
}

}  // namespace samlab
