#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "samlab/common.hpp"

namespace samlab {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
  os << ']';
  return os.str();
}

enum class Op {
  leaf,
  matmul,
  conv2d_3x3,
  add,
  sub,
  mul,
  scale,
  relu,
  mean,
  sum,
  reshape,
  transpose,
  max_pool2x2,
  log_softmax,
  batch_norm_xhat,
  layer_norm_xhat,
  row_l2_normalize,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::conv2d_3x3: return "conv2d_3x3";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul_elementwise";
    case Op::scale: return "scale";
    case Op::relu: return "relu";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::reshape: return "reshape";
    case Op::transpose: return "transpose";
    case Op::max_pool2x2: return "max_pool2x2";
    case Op::log_softmax: return "softmax_logsumexp";
    case Op::batch_norm_xhat: return "batch_norm_xhat";
    case Op::layer_norm_xhat: return "layer_norm_xhat";
    case Op::row_l2_normalize: return "row_l2_normalize";
  }
  return "?";
}

class Tape;

/// Lightweight handle into a Tape node. Values are immutable after creation;
/// only the grad slot is written by backward().
struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  int64_t size() const;
  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  bool requires_grad() const;
};

namespace detail {

struct Node {
  Op op = Op::leaf;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by backward()
  bool requires_grad = false;
  int in0 = -1;
  int in1 = -1;
  double alpha = 0.0;            // scale factor / epsilon, op dependent
  std::vector<double> aux;       // inv_std / row norms, op dependent
  std::vector<int32_t> iaux;     // pool argmax source indices
};

}  // namespace detail

/// Records one forward program and replays it backwards. Node order is
/// creation order, which is a topological order by construction.
class Tape {
 public:
  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != numel(shape)) {
      throw EngineError("leaf: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    check_finite(data, "leaf");
    detail::Node n;
    n.op = Op::leaf;
    n.shape = std::move(shape);
    n.value = std::move(data);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Tensor scalar_leaf(double v, bool requires_grad = false) {
    return leaf(Shape{}, {v}, requires_grad);
  }

  const detail::Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  detail::Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Reverse pass from a scalar loss. When `needed_leaves` is given, gradient
  /// accumulation into leaf nodes outside the set is skipped; everything else
  /// is computed identically.
  void backward(Tensor loss, const std::unordered_set<int>* needed_leaves = nullptr) {
    if (!loss.valid() || loss.tape != this) throw EngineError("backward: tensor not on this tape");
    detail::Node& ln = node(loss.id);
    if (numel(ln.shape) != 1) {
      throw EngineError("backward: loss must be scalar, got shape " + shape_str(ln.shape));
    }
    if (!ln.requires_grad) throw EngineError("backward: loss is detached (no grad path)");

    for (int id = 0; id <= loss.id; ++id) {
      detail::Node& n = node(id);
      if (n.requires_grad) n.grad.assign(n.value.size(), 0.0);
    }
    ln.grad[0] = 1.0;

    for (int id = loss.id; id >= 0; --id) {
      detail::Node& n = node(id);
      if (!n.requires_grad || n.op == Op::leaf) continue;
      backward_node(id, needed_leaves);
    }
  }

 private:
  friend struct Tensor;
  friend Tensor matmul(Tensor, Tensor);
  friend Tensor conv2d_3x3(Tensor, Tensor);
  friend Tensor add(Tensor, Tensor);
  friend Tensor sub(Tensor, Tensor);
  friend Tensor mul(Tensor, Tensor);
  friend Tensor scale(Tensor, double);
  friend Tensor relu(Tensor);
  friend Tensor mean(Tensor);
  friend Tensor sum(Tensor);
  friend Tensor reshape(Tensor, Shape);
  friend Tensor transpose(Tensor);
  friend Tensor max_pool2x2(Tensor);
  friend Tensor log_softmax(Tensor);
  friend Tensor batch_norm_xhat(Tensor, double, std::vector<double>*, std::vector<double>*);
  friend Tensor layer_norm_xhat(Tensor, double);
  friend Tensor row_l2_normalize(Tensor);

  // deque: references to existing nodes stay valid while new ops append
  std::deque<detail::Node> nodes_;

  Tensor push(detail::Node n) {
    nodes_.push_back(std::move(n));
    return Tensor{this, static_cast<int>(nodes_.size()) - 1};
  }

  static void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
      if (!std::isfinite(x)) {
        throw EngineError(std::string(op) + ": non-finite input value");
      }
    }
  }

  const detail::Node& input_checked(Tensor t, const char* op) const {
    if (!t.valid() || t.tape != this) throw EngineError(std::string(op) + ": tensor not on this tape");
    const detail::Node& n = node(t.id);
    check_finite(n.value, op);
    return n;
  }

  void backward_node(int id, const std::unordered_set<int>* needed);

  bool skip_input(int input_id, const std::unordered_set<int>* needed) const {
    const detail::Node& in = node(input_id);
    if (!in.requires_grad) return true;
    if (needed != nullptr && in.op == Op::leaf && needed->count(input_id) == 0) return true;
    return false;
  }
};

inline const Shape& Tensor::shape() const { return tape->node(id).shape; }
inline int64_t Tensor::size() const { return numel(tape->node(id).shape); }
inline const std::vector<double>& Tensor::value() const { return tape->node(id).value; }
inline const std::vector<double>& Tensor::grad() const { return tape->node(id).grad; }
inline bool Tensor::requires_grad() const { return tape->node(id).requires_grad; }

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

inline Tensor matmul(Tensor a, Tensor b) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "matmul");
  const auto& nb = t.input_checked(b, "matmul");
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
    throw EngineError("matmul: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  }
  const int64_t m = na.shape[0], k = na.shape[1], n = nb.shape[1];
  detail::Node out;
  out.op = Op::matmul;
  out.shape = {m, n};
  out.value.assign(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += na.value[i * k + p] * nb.value[p * n + j];
      out.value[i * n + j] = acc;
    }
  }
  out.requires_grad = na.requires_grad || nb.requires_grad;
  out.in0 = a.id;
  out.in1 = b.id;
  return t.push(std::move(out));
}

// 3x3 kernel, stride 1, zero padding 1: shape preserving.
inline Tensor conv2d_3x3(Tensor x, Tensor kernel) {
  Tape& t = *x.tape;
  const auto& nx = t.input_checked(x, "conv2d_3x3");
  const auto& nk = t.input_checked(kernel, "conv2d_3x3");
  if (nx.shape.size() != 4 || nk.shape.size() != 4 || nk.shape[2] != 3 || nk.shape[3] != 3 ||
      nx.shape[1] != nk.shape[1]) {
    throw EngineError("conv2d_3x3: shape mismatch " + shape_str(nx.shape) + " vs " + shape_str(nk.shape));
  }
  const int64_t B = nx.shape[0], C = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
  const int64_t K = nk.shape[0];
  detail::Node out;
  out.op = Op::conv2d_3x3;
  out.shape = {B, K, H, W};
  out.value.assign(static_cast<size_t>(B * K * H * W), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < K; ++co) {
      for (int64_t i = 0; i < H; ++i) {
        for (int64_t j = 0; j < W; ++j) {
          double acc = 0.0;
          for (int64_t ci = 0; ci < C; ++ci) {
            for (int64_t u = 0; u < 3; ++u) {
              const int64_t r = i + u - 1;
              if (r < 0 || r >= H) continue;
              for (int64_t v = 0; v < 3; ++v) {
                const int64_t c = j + v - 1;
                if (c < 0 || c >= W) continue;
                acc += nx.value[((b * C + ci) * H + r) * W + c] *
                       nk.value[((co * C + ci) * 3 + u) * 3 + v];
              }
            }
          }
          out.value[((b * K + co) * H + i) * W + j] = acc;
        }
      }
    }
  }
  out.requires_grad = nx.requires_grad || nk.requires_grad;
  out.in0 = x.id;
  out.in1 = kernel.id;
  return t.push(std::move(out));
}

namespace detail {

// Broadcast patterns allowed for add/mul: exact shape, [B,F]+[F] (per-feature),
// [B,C,H,W]+[C] (per-channel). Anything else is a shape error.
enum class Bcast { same, feature, channel };

inline Bcast bcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::same;
  if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Bcast::feature;
  if (a.size() == 4 && b.size() == 1 && b[0] == a[1]) return Bcast::channel;
  throw EngineError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

inline Tensor add(Tensor a, Tensor b) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "add");
  const auto& nb = t.input_checked(b, "add");
  const auto kind = detail::bcast_kind(na.shape, nb.shape, "add");
  detail::Node out;
  out.op = Op::add;
  out.shape = na.shape;
  out.value = na.value;
  if (kind == detail::Bcast::same) {
    for (size_t i = 0; i < out.value.size(); ++i) out.value[i] += nb.value[i];
  } else if (kind == detail::Bcast::feature) {
    const int64_t B = na.shape[0], F = na.shape[1];
    for (int64_t i = 0; i < B; ++i)
      for (int64_t f = 0; f < F; ++f) out.value[i * F + f] += nb.value[f];
  } else {
    const int64_t B = na.shape[0], C = na.shape[1], HW = na.shape[2] * na.shape[3];
    for (int64_t b_ = 0; b_ < B; ++b_)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < HW; ++p) out.value[(b_ * C + c) * HW + p] += nb.value[c];
  }
  out.requires_grad = na.requires_grad || nb.requires_grad;
  out.in0 = a.id;
  out.in1 = b.id;
  return t.push(std::move(out));
}

inline Tensor sub(Tensor a, Tensor b) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "sub");
  const auto& nb = t.input_checked(b, "sub");
  if (na.shape != nb.shape) {
    throw EngineError("sub: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  }
  detail::Node out;
  out.op = Op::sub;
  out.shape = na.shape;
  out.value = na.value;
  for (size_t i = 0; i < out.value.size(); ++i) out.value[i] -= nb.value[i];
  out.requires_grad = na.requires_grad || nb.requires_grad;
  out.in0 = a.id;
  out.in1 = b.id;
  return t.push(std::move(out));
}

inline Tensor mul(Tensor a, Tensor b) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "mul_elementwise");
  const auto& nb = t.input_checked(b, "mul_elementwise");
  const auto kind = detail::bcast_kind(na.shape, nb.shape, "mul_elementwise");
  detail::Node out;
  out.op = Op::mul;
  out.shape = na.shape;
  out.value = na.value;
  if (kind == detail::Bcast::same) {
    for (size_t i = 0; i < out.value.size(); ++i) out.value[i] *= nb.value[i];
  } else if (kind == detail::Bcast::feature) {
    const int64_t B = na.shape[0], F = na.shape[1];
    for (int64_t i = 0; i < B; ++i)
      for (int64_t f = 0; f < F; ++f) out.value[i * F + f] *= nb.value[f];
  } else {
    const int64_t B = na.shape[0], C = na.shape[1], HW = na.shape[2] * na.shape[3];
    for (int64_t b_ = 0; b_ < B; ++b_)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < HW; ++p) out.value[(b_ * C + c) * HW + p] *= nb.value[c];
  }
  out.requires_grad = na.requires_grad || nb.requires_grad;
  out.in0 = a.id;
  out.in1 = b.id;
  return t.push(std::move(out));
}

inline Tensor scale(Tensor a, double c) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "scale");
  if (!std::isfinite(c)) throw EngineError("scale: non-finite factor");
  detail::Node out;
  out.op = Op::scale;
  out.shape = na.shape;
  out.value = na.value;
  for (double& v : out.value) v *= c;
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  out.alpha = c;
  return t.push(std::move(out));
}

inline Tensor relu(Tensor a) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "relu");
  detail::Node out;
  out.op = Op::relu;
  out.shape = na.shape;
  out.value = na.value;
  for (double& v : out.value) v = v > 0.0 ? v : 0.0;
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

inline Tensor mean(Tensor a) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "mean");
  detail::Node out;
  out.op = Op::mean;
  out.shape = {};
  double acc = 0.0;
  for (double v : na.value) acc += v;
  out.value = {acc / static_cast<double>(na.value.size())};
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

inline Tensor sum(Tensor a) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "sum");
  detail::Node out;
  out.op = Op::sum;
  out.shape = {};
  double acc = 0.0;
  for (double v : na.value) acc += v;
  out.value = {acc};
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

inline Tensor reshape(Tensor a, Shape shape) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "reshape");
  if (numel(shape) != numel(na.shape)) {
    throw EngineError("reshape: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(shape));
  }
  detail::Node out;
  out.op = Op::reshape;
  out.shape = std::move(shape);
  out.value = na.value;
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

inline Tensor transpose(Tensor a) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "transpose");
  if (na.shape.size() != 2) {
    throw EngineError("transpose: expected rank-2 tensor, got " + shape_str(na.shape));
  }
  const int64_t m = na.shape[0], n = na.shape[1];
  detail::Node out;
  out.op = Op::transpose;
  out.shape = {n, m};
  out.value.assign(na.value.size(), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.value[j * m + i] = na.value[i * n + j];
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

inline Tensor max_pool2x2(Tensor a) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "max_pool2x2");
  if (na.shape.size() != 4 || na.shape[2] % 2 != 0 || na.shape[3] % 2 != 0) {
    throw EngineError("max_pool2x2: expected rank-4 tensor with even H,W, got " + shape_str(na.shape));
  }
  const int64_t B = na.shape[0], C = na.shape[1], H = na.shape[2], W = na.shape[3];
  const int64_t Ho = H / 2, Wo = W / 2;
  detail::Node out;
  out.op = Op::max_pool2x2;
  out.shape = {B, C, Ho, Wo};
  out.value.assign(static_cast<size_t>(B * C * Ho * Wo), 0.0);
  out.iaux.assign(out.value.size(), 0);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t i = 0; i < Ho; ++i) {
        for (int64_t j = 0; j < Wo; ++j) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t best_idx = 0;
          for (int64_t u = 0; u < 2; ++u) {
            for (int64_t v = 0; v < 2; ++v) {
              const int64_t src = ((b * C + c) * H + 2 * i + u) * W + 2 * j + v;
              if (na.value[src] > best) {
                best = na.value[src];
                best_idx = src;
              }
            }
          }
          const int64_t dst = ((b * C + c) * Ho + i) * Wo + j;
          out.value[dst] = best;
          out.iaux[dst] = static_cast<int32_t>(best_idx);
        }
      }
    }
  }
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

/// Row-wise log-softmax over the class axis, stabilized via logsumexp.
inline Tensor log_softmax(Tensor a) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "softmax_logsumexp");
  if (na.shape.size() != 2) {
    throw EngineError("softmax_logsumexp: expected rank-2 tensor, got " + shape_str(na.shape));
  }
  const int64_t B = na.shape[0], C = na.shape[1];
  detail::Node out;
  out.op = Op::log_softmax;
  out.shape = na.shape;
  out.value.assign(na.value.size(), 0.0);
  for (int64_t i = 0; i < B; ++i) {
    double m = na.value[i * C];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, na.value[i * C + c]);
    double acc = 0.0;
    for (int64_t c = 0; c < C; ++c) acc += std::exp(na.value[i * C + c] - m);
    const double lse = m + std::log(acc);
    for (int64_t c = 0; c < C; ++c) out.value[i * C + c] = na.value[i * C + c] - lse;
  }
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

/// Normalize with statistics over the batch dimension: per feature for rank-2
/// input, per channel (over B,H,W) for rank-4. Returns xhat; biased batch
/// mean/variance are written to the out parameters for running-stat updates.
inline Tensor batch_norm_xhat(Tensor a, double epsilon,
                              std::vector<double>* mean_out = nullptr,
                              std::vector<double>* var_out = nullptr) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "batch_norm_xhat");
  if (na.shape.size() != 2 && na.shape.size() != 4) {
    throw EngineError("batch_norm_xhat: expected rank-2 or rank-4 tensor, got " + shape_str(na.shape));
  }
  if (na.shape[0] < 2) {
    throw EngineError("batch_norm_xhat: batch of " + std::to_string(na.shape[0]) +
                      " in train mode (need >= 2)");
  }
  if (epsilon <= 0.0) throw EngineError("batch_norm_xhat: epsilon must be positive");
  const bool conv = na.shape.size() == 4;
  const int64_t B = na.shape[0];
  const int64_t F = na.shape[1];
  const int64_t HW = conv ? na.shape[2] * na.shape[3] : 1;
  const int64_t N = B * HW;

  detail::Node out;
  out.op = Op::batch_norm_xhat;
  out.shape = na.shape;
  out.value.assign(na.value.size(), 0.0);
  out.aux.assign(static_cast<size_t>(F), 0.0);
  out.alpha = epsilon;
  std::vector<double> mean(static_cast<size_t>(F), 0.0), var(static_cast<size_t>(F), 0.0);
  for (int64_t f = 0; f < F; ++f) {
    double m = 0.0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < HW; ++p) m += na.value[(b * F + f) * HW + p];
    m /= static_cast<double>(N);
    double v = 0.0;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < HW; ++p) {
        const double d = na.value[(b * F + f) * HW + p] - m;
        v += d * d;
      }
    v /= static_cast<double>(N);
    const double inv_std = 1.0 / std::sqrt(v + epsilon);
    mean[static_cast<size_t>(f)] = m;
    var[static_cast<size_t>(f)] = v;
    out.aux[static_cast<size_t>(f)] = inv_std;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t p = 0; p < HW; ++p) {
        const int64_t idx = (b * F + f) * HW + p;
        out.value[idx] = (na.value[idx] - m) * inv_std;
      }
  }
  if (mean_out) *mean_out = std::move(mean);
  if (var_out) *var_out = std::move(var);
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

/// Normalize each row over the feature axis (LayerNorm core, no affine).
inline Tensor layer_norm_xhat(Tensor a, double epsilon) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "layer_norm_xhat");
  if (na.shape.size() != 2) {
    throw EngineError("layer_norm_xhat: expected rank-2 tensor, got " + shape_str(na.shape));
  }
  if (na.shape[1] < 2) {
    throw EngineError("layer_norm_xhat: need >= 2 features, got " + shape_str(na.shape));
  }
  if (epsilon <= 0.0) throw EngineError("layer_norm_xhat: epsilon must be positive");
  const int64_t B = na.shape[0], F = na.shape[1];
  detail::Node out;
  out.op = Op::layer_norm_xhat;
  out.shape = na.shape;
  out.value.assign(na.value.size(), 0.0);
  out.aux.assign(static_cast<size_t>(B), 0.0);
  out.alpha = epsilon;
  for (int64_t i = 0; i < B; ++i) {
    double m = 0.0;
    for (int64_t f = 0; f < F; ++f) m += na.value[i * F + f];
    m /= static_cast<double>(F);
    double v = 0.0;
    for (int64_t f = 0; f < F; ++f) {
      const double d = na.value[i * F + f] - m;
      v += d * d;
    }
    v /= static_cast<double>(F);
    const double inv_std = 1.0 / std::sqrt(v + epsilon);
    out.aux[static_cast<size_t>(i)] = inv_std;
    for (int64_t f = 0; f < F; ++f) out.value[i * F + f] = (na.value[i * F + f] - m) * inv_std;
  }
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

/// Divide each row by its l2 norm (plus 1e-12 guard). Used for logit
/// normalization in losses and sharpness evaluation.
inline Tensor row_l2_normalize(Tensor a) {
  Tape& t = *a.tape;
  const auto& na = t.input_checked(a, "row_l2_normalize");
  if (na.shape.size() != 2) {
    throw EngineError("row_l2_normalize: expected rank-2 tensor, got " + shape_str(na.shape));
  }
  const int64_t B = na.shape[0], F = na.shape[1];
  detail::Node out;
  out.op = Op::row_l2_normalize;
  out.shape = na.shape;
  out.value.assign(na.value.size(), 0.0);
  out.aux.assign(static_cast<size_t>(B), 0.0);
  for (int64_t i = 0; i < B; ++i) {
    double acc = 0.0;
    for (int64_t f = 0; f < F; ++f) acc += na.value[i * F + f] * na.value[i * F + f];
    const double r = std::sqrt(acc);
    out.aux[static_cast<size_t>(i)] = r;
    const double denom = r + 1e-12;
    for (int64_t f = 0; f < F; ++f) out.value[i * F + f] = na.value[i * F + f] / denom;
  }
  out.requires_grad = na.requires_grad;
  out.in0 = a.id;
  return t.push(std::move(out));
}

// ---------------------------------------------------------------------------
// backward rules
// ---------------------------------------------------------------------------

inline void Tape::backward_node(int id, const std::unordered_set<int>* needed) {
  detail::Node& n = node(id);
  const std::vector<double>& g = n.grad;
  switch (n.op) {
    case Op::leaf:
      break;
    case Op::matmul: {
      const detail::Node& a = node(n.in0);
      const detail::Node& b = node(n.in1);
      const int64_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (int64_t j = 0; j < c; ++j) acc += g[i * c + j] * b.value[p * c + j];
            ag.grad[i * k + p] += acc;
          }
      }
      if (!skip_input(n.in1, needed)) {
        detail::Node& bg = node(n.in1);
        for (int64_t p = 0; p < k; ++p)
          for (int64_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) acc += a.value[i * k + p] * g[i * c + j];
            bg.grad[p * c + j] += acc;
          }
      }
      break;
    }
    case Op::conv2d_3x3: {
      const detail::Node& x = node(n.in0);
      const detail::Node& kn = node(n.in1);
      const int64_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
      const int64_t K = kn.shape[0];
      if (!skip_input(n.in0, needed)) {
        detail::Node& xg = node(n.in0);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t ci = 0; ci < C; ++ci)
            for (int64_t r = 0; r < H; ++r)
              for (int64_t cc = 0; cc < W; ++cc) {
                double acc = 0.0;
                for (int64_t co = 0; co < K; ++co)
                  for (int64_t u = 0; u < 3; ++u) {
                    const int64_t i = r - u + 1;
                    if (i < 0 || i >= H) continue;
                    for (int64_t v = 0; v < 3; ++v) {
                      const int64_t j = cc - v + 1;
                      if (j < 0 || j >= W) continue;
                      acc += g[((b * K + co) * H + i) * W + j] *
                             kn.value[((co * C + ci) * 3 + u) * 3 + v];
                    }
                  }
                xg.grad[((b * C + ci) * H + r) * W + cc] += acc;
              }
      }
      if (!skip_input(n.in1, needed)) {
        detail::Node& kg = node(n.in1);
        for (int64_t co = 0; co < K; ++co)
          for (int64_t ci = 0; ci < C; ++ci)
            for (int64_t u = 0; u < 3; ++u)
              for (int64_t v = 0; v < 3; ++v) {
                double acc = 0.0;
                for (int64_t b = 0; b < B; ++b)
                  for (int64_t i = 0; i < H; ++i) {
                    const int64_t r = i + u - 1;
                    if (r < 0 || r >= H) continue;
                    for (int64_t j = 0; j < W; ++j) {
                      const int64_t c = j + v - 1;
                      if (c < 0 || c >= W) continue;
                      acc += g[((b * K + co) * H + i) * W + j] *
                             x.value[((b * C + ci) * H + r) * W + c];
                    }
                  }
                kg.grad[((co * C + ci) * 3 + u) * 3 + v] += acc;
              }
      }
      break;
    }
    case Op::add: {
      const detail::Node& a = node(n.in0);
      const detail::Node& b = node(n.in1);
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        for (size_t i = 0; i < g.size(); ++i) ag.grad[i] += g[i];
      }
      if (!skip_input(n.in1, needed)) {
        detail::Node& bg = node(n.in1);
        if (a.shape == b.shape) {
          for (size_t i = 0; i < g.size(); ++i) bg.grad[i] += g[i];
        } else if (a.shape.size() == 2) {
          const int64_t B = a.shape[0], F = a.shape[1];
          for (int64_t i = 0; i < B; ++i)
            for (int64_t f = 0; f < F; ++f) bg.grad[f] += g[i * F + f];
        } else {
          const int64_t B = a.shape[0], C = a.shape[1], HW = a.shape[2] * a.shape[3];
          for (int64_t b_ = 0; b_ < B; ++b_)
            for (int64_t c = 0; c < C; ++c)
              for (int64_t p = 0; p < HW; ++p) bg.grad[c] += g[(b_ * C + c) * HW + p];
        }
      }
      break;
    }
    case Op::sub: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        for (size_t i = 0; i < g.size(); ++i) ag.grad[i] += g[i];
      }
      if (!skip_input(n.in1, needed)) {
        detail::Node& bg = node(n.in1);
        for (size_t i = 0; i < g.size(); ++i) bg.grad[i] -= g[i];
      }
      break;
    }
    case Op::mul: {
      const detail::Node& a = node(n.in0);
      const detail::Node& b = node(n.in1);
      const bool same = a.shape == b.shape;
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        if (same) {
          for (size_t i = 0; i < g.size(); ++i) ag.grad[i] += g[i] * b.value[i];
        } else if (a.shape.size() == 2) {
          const int64_t B = a.shape[0], F = a.shape[1];
          for (int64_t i = 0; i < B; ++i)
            for (int64_t f = 0; f < F; ++f) ag.grad[i * F + f] += g[i * F + f] * b.value[f];
        } else {
          const int64_t B = a.shape[0], C = a.shape[1], HW = a.shape[2] * a.shape[3];
          for (int64_t b_ = 0; b_ < B; ++b_)
            for (int64_t c = 0; c < C; ++c)
              for (int64_t p = 0; p < HW; ++p)
                ag.grad[(b_ * C + c) * HW + p] += g[(b_ * C + c) * HW + p] * b.value[c];
        }
      }
      if (!skip_input(n.in1, needed)) {
        detail::Node& bg = node(n.in1);
        if (same) {
          for (size_t i = 0; i < g.size(); ++i) bg.grad[i] += g[i] * a.value[i];
        } else if (a.shape.size() == 2) {
          const int64_t B = a.shape[0], F = a.shape[1];
          for (int64_t i = 0; i < B; ++i)
            for (int64_t f = 0; f < F; ++f) bg.grad[f] += g[i * F + f] * a.value[i * F + f];
        } else {
          const int64_t B = a.shape[0], C = a.shape[1], HW = a.shape[2] * a.shape[3];
          for (int64_t b_ = 0; b_ < B; ++b_)
            for (int64_t c = 0; c < C; ++c)
              for (int64_t p = 0; p < HW; ++p)
                bg.grad[c] += g[(b_ * C + c) * HW + p] * a.value[(b_ * C + c) * HW + p];
        }
      }
      break;
    }
    case Op::scale: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        for (size_t i = 0; i < g.size(); ++i) ag.grad[i] += g[i] * n.alpha;
      }
      break;
    }
    case Op::relu: {
      if (!skip_input(n.in0, needed)) {
        const detail::Node& a = node(n.in0);
        detail::Node& ag = node(n.in0);
        for (size_t i = 0; i < g.size(); ++i) ag.grad[i] += a.value[i] > 0.0 ? g[i] : 0.0;
      }
      break;
    }
    case Op::mean: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        const double s = g[0] / static_cast<double>(ag.value.size());
        for (size_t i = 0; i < ag.grad.size(); ++i) ag.grad[i] += s;
      }
      break;
    }
    case Op::sum: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        for (size_t i = 0; i < ag.grad.size(); ++i) ag.grad[i] += g[0];
      }
      break;
    }
    case Op::reshape: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        for (size_t i = 0; i < g.size(); ++i) ag.grad[i] += g[i];
      }
      break;
    }
    case Op::transpose: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        const int64_t m = ag.shape[0], c = ag.shape[1];
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) ag.grad[i * c + j] += g[j * m + i];
      }
      break;
    }
    case Op::max_pool2x2: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        for (size_t i = 0; i < g.size(); ++i) ag.grad[static_cast<size_t>(n.iaux[i])] += g[i];
      }
      break;
    }
    case Op::log_softmax: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        const int64_t B = n.shape[0], C = n.shape[1];
        for (int64_t i = 0; i < B; ++i) {
          double s = 0.0;
          for (int64_t c = 0; c < C; ++c) s += g[i * C + c];
          for (int64_t c = 0; c < C; ++c)
            ag.grad[i * C + c] += g[i * C + c] - std::exp(n.value[i * C + c]) * s;
        }
      }
      break;
    }
    case Op::batch_norm_xhat: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        const bool conv = n.shape.size() == 4;
        const int64_t B = n.shape[0], F = n.shape[1];
        const int64_t HW = conv ? n.shape[2] * n.shape[3] : 1;
        const double N = static_cast<double>(B * HW);
        for (int64_t f = 0; f < F; ++f) {
          double m1 = 0.0, m2 = 0.0;
          for (int64_t b = 0; b < B; ++b)
            for (int64_t p = 0; p < HW; ++p) {
              const int64_t idx = (b * F + f) * HW + p;
              m1 += g[idx];
              m2 += g[idx] * n.value[idx];
            }
          m1 /= N;
          m2 /= N;
          const double inv_std = n.aux[static_cast<size_t>(f)];
          for (int64_t b = 0; b < B; ++b)
            for (int64_t p = 0; p < HW; ++p) {
              const int64_t idx = (b * F + f) * HW + p;
              ag.grad[idx] += inv_std * (g[idx] - m1 - n.value[idx] * m2);
            }
        }
      }
      break;
    }
    case Op::layer_norm_xhat: {
      if (!skip_input(n.in0, needed)) {
        detail::Node& ag = node(n.in0);
        const int64_t B = n.shape[0], F = n.shape[1];
        for (int64_t i = 0; i < B; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (int64_t f = 0; f < F; ++f) {
            m1 += g[i * F + f];
            m2 += g[i * F + f] * n.value[i * F + f];
          }
          m1 /= static_cast<double>(F);
          m2 /= static_cast<double>(F);
          const double inv_std = n.aux[static_cast<size_t>(i)];
          for (int64_t f = 0; f < F; ++f)
            ag.grad[i * F + f] += inv_std * (g[i * F + f] - m1 - n.value[i * F + f] * m2);
        }
      }
      break;
    }
    case Op::row_l2_normalize: {
      if (!skip_input(n.in0, needed)) {
        const detail::Node& a = node(n.in0);
        detail::Node& ag = node(n.in0);
        const int64_t B = n.shape[0], F = n.shape[1];
        for (int64_t i = 0; i < B; ++i) {
          const double r = n.aux[static_cast<size_t>(i)];
          const double denom = r + 1e-12;
          double dot = 0.0;
          for (int64_t f = 0; f < F; ++f) dot += g[i * F + f] * a.value[i * F + f];
          for (int64_t f = 0; f < F; ++f) {
            double dx = g[i * F + f] / denom;
            if (r > 1e-300) dx -= a.value[i * F + f] * dot / (r * denom * denom);
            ag.grad[i * F + f] += dx;
          }
        }
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Max over coordinates of |autodiff - central FD| / max(1, |central FD|) for
/// a scalar-valued tensor program evaluated at `point`.
inline double grad_check(const std::function<Tensor(Tape&, Tensor)>& fn, const Shape& shape,
                         const std::vector<double>& point, double fd_step) {
  std::vector<double> ad;
  {
    Tape tape;
    Tensor x = tape.leaf(shape, point, true);
    Tensor y = fn(tape, x);
    if (y.size() != 1) throw EngineError("grad_check: function must be scalar-valued");
    tape.backward(y);
    ad = x.grad();
  }
  auto eval = [&](const std::vector<double>& p) {
    Tape tape;
    Tensor x = tape.leaf(shape, p, false);
    Tensor y = fn(tape, x);
    return y.value()[0];
  };
  double max_rel = 0.0;
  std::vector<double> p = point;
  for (size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + fd_step;
    const double fp = eval(p);
    p[i] = keep - fd_step;
    const double fm = eval(p);
    p[i] = keep;
    const double fd = (fp - fm) / (2.0 * fd_step);
    const double rel = std::abs(ad[i] - fd) / std::max(1.0, std::abs(fd));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace samlab
