#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "samlab/common.hpp"
#include "samlab/nn.hpp"
#include "samlab/rng.hpp"

namespace samlab {

enum class Variant { sam, elem_l2, elem_l2_orig, elem_linf, layer_l2, fisher };
enum class NormOrder { l2, linf };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::sam: return "sam";
    case Variant::elem_l2: return "elem_l2";
    case Variant::elem_l2_orig: return "elem_l2_orig";
    case Variant::elem_linf: return "elem_linf";
    case Variant::layer_l2: return "layer_l2";
    case Variant::fisher: return "fisher";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "sam") return Variant::sam;
  if (s == "elem_l2") return Variant::elem_l2;
  if (s == "elem_l2_orig") return Variant::elem_l2_orig;
  if (s == "elem_linf") return Variant::elem_linf;
  if (s == "layer_l2") return Variant::layer_l2;
  if (s == "fisher") return Variant::fisher;
  throw ConfigError("unknown perturbation variant '" + s + "'");
}

/// Which coordinates the ascent step may touch.
struct ScopeSpec {
  enum class Kind { all, only_norm, no_norm, random, fisher_topk };
  Kind kind = Kind::all;
  double sparsity = 0.0;  // random / fisher_topk
  uint64_t seed = 0;      // random

  // compact form used by config files and the CLI:
  //   all | only_norm | no_norm | random:<sparsity>:<seed> | fisher_topk:<sparsity>
  static ScopeSpec parse(const std::string& s) {
    ScopeSpec sc;
    if (s == "all") return sc;
    if (s == "only_norm") {
      sc.kind = Kind::only_norm;
      return sc;
    }
    if (s == "no_norm") {
      sc.kind = Kind::no_norm;
      return sc;
    }
    auto split = [](const std::string& str) {
      std::vector<std::string> parts;
      size_t pos = 0;
      while (true) {
        size_t next = str.find(':', pos);
        parts.push_back(str.substr(pos, next - pos));
        if (next == std::string::npos) break;
        pos = next + 1;
      }
      return parts;
    };
    const auto parts = split(s);
    try {
      if (parts.size() == 3 && parts[0] == "random") {
        sc.kind = Kind::random;
        sc.sparsity = std::stod(parts[1]);
        sc.seed = std::stoull(parts[2]);
      } else if (parts.size() == 2 && parts[0] == "fisher_topk") {
        sc.kind = Kind::fisher_topk;
        sc.sparsity = std::stod(parts[1]);
      } else {
        throw ConfigError("unknown scope '" + s + "'");
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad scope spec '" + s + "'");
    }
    if (sc.sparsity < 0.0 || sc.sparsity > 1.0) {
      throw ConfigError("scope sparsity must be in [0,1], got " + std::to_string(sc.sparsity));
    }
    return sc;
  }

  std::string str() const {
    switch (kind) {
      case Kind::all: return "all";
      case Kind::only_norm: return "only_norm";
      case Kind::no_norm: return "no_norm";
      case Kind::random: return "random:" + std::to_string(sparsity) + ":" + std::to_string(seed);
      case Kind::fisher_topk: return "fisher_topk:" + std::to_string(sparsity);
    }
    return "?";
  }

  bool operator==(const ScopeSpec&) const = default;
};

/// Variant + radius + eta + scope. p is forced by the variant.
struct PerturbSpec {
  Variant variant = Variant::sam;
  double rho = 0.05;
  double eta = 0.0;
  ScopeSpec scope;

  NormOrder p() const { return variant == Variant::elem_linf ? NormOrder::linf : NormOrder::l2; }

  static double default_eta(Variant v) {
    if (v == Variant::elem_l2_orig) return 0.01;
    if (v == Variant::fisher) return 1.0;
    return 0.0;
  }

  void validate() const {
    if (rho <= 0.0) throw ConfigError("perturb: rho must be > 0");
    if (eta < 0.0) throw ConfigError("perturb: eta must be >= 0");
  }
};

/// Diagonal of T_w, already composed with a scope mask or not; zeros mark
/// excluded coordinates.
struct MaskedOperator {
  std::vector<double> t_diag;
  int64_t active_count = 0;

  void recount() {
    active_count = std::count_if(t_diag.begin(), t_diag.end(), [](double v) { return v > 0.0; });
  }
};

/// T_w per variant, over all coordinates (scope applied separately):
///   sam: 1; elem_l2/elem_linf: |w_i|; elem_l2_orig: |w_i|+eta for weights,
///   1+eta for biases; layer_l2: l2 norm of the coordinate's parameter
///   tensor; fisher: (1 + eta * g_i^2)^(-1/2) with g the mean batch gradient.
inline MaskedOperator normalization_operator(Variant variant, const std::vector<double>& params,
                                             const std::vector<double>& grads, double eta,
                                             const std::vector<ParamView>& views) {
  const size_t n = params.size();
  if (variant == Variant::fisher && grads.size() != n) {
    throw EngineError("normalization_operator: fisher variant needs gradients aligned with params");
  }
  MaskedOperator op;
  op.t_diag.assign(n, 0.0);
  switch (variant) {
    case Variant::sam:
      std::fill(op.t_diag.begin(), op.t_diag.end(), 1.0);
      break;
    case Variant::elem_l2:
    case Variant::elem_linf:
      for (size_t i = 0; i < n; ++i) op.t_diag[i] = std::abs(params[i]);
      break;
    case Variant::elem_l2_orig:
      for (const auto& v : views) {
        const bool weight_like = v.tag == Tag::weight || v.tag == Tag::norm_weight;
        for (int64_t i = v.offset; i < v.offset + v.length; ++i) {
          op.t_diag[static_cast<size_t>(i)] =
              weight_like ? std::abs(params[static_cast<size_t>(i)]) + eta : 1.0 + eta;
        }
      }
      break;
    case Variant::layer_l2:
      for (const auto& v : views) {
        double acc = 0.0;
        for (int64_t i = v.offset; i < v.offset + v.length; ++i) {
          acc += params[static_cast<size_t>(i)] * params[static_cast<size_t>(i)];
        }
        const double norm = std::sqrt(acc);
        for (int64_t i = v.offset; i < v.offset + v.length; ++i) {
          op.t_diag[static_cast<size_t>(i)] = norm;
        }
      }
      break;
    case Variant::fisher:
      for (size_t i = 0; i < n; ++i) {
        op.t_diag[i] = 1.0 / std::sqrt(1.0 + eta * grads[i] * grads[i]);
      }
      break;
  }
  op.recount();
  return op;
}

/// Boolean scope mask over the flat parameter vector.
///   all: everything; only_norm: norm_weight/norm_bias slices; no_norm: the
///   complement; random(s, seed): exactly round((1-s)*N) seeded coordinates;
///   fisher_topk(s): the round((1-s)*N) largest g_i^2, ties to lower index.
inline std::vector<uint8_t> scope_mask(const ScopeSpec& scope, const std::vector<ParamView>& views,
                                       const std::vector<double>* grads, int64_t total_params) {
  std::vector<uint8_t> mask(static_cast<size_t>(total_params), 0);
  switch (scope.kind) {
    case ScopeSpec::Kind::all:
      std::fill(mask.begin(), mask.end(), uint8_t{1});
      break;
    case ScopeSpec::Kind::only_norm:
    case ScopeSpec::Kind::no_norm: {
      const bool want_norm = scope.kind == ScopeSpec::Kind::only_norm;
      if (!want_norm) std::fill(mask.begin(), mask.end(), uint8_t{1});
      for (const auto& v : views) {
        if (is_norm_tag(v.tag)) {
          std::fill(mask.begin() + v.offset, mask.begin() + v.offset + v.length,
                    static_cast<uint8_t>(want_norm ? 1 : 0));
        }
      }
      break;
    }
    case ScopeSpec::Kind::random: {
      const auto k = static_cast<int64_t>(
          std::llround((1.0 - scope.sparsity) * static_cast<double>(total_params)));
      std::vector<int64_t> idx(static_cast<size_t>(total_params));
      std::iota(idx.begin(), idx.end(), int64_t{0});
      Rng rng(scope.seed);
      rng.shuffle(idx);
      for (int64_t i = 0; i < k; ++i) mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
      break;
    }
    case ScopeSpec::Kind::fisher_topk: {
      if (grads == nullptr || static_cast<int64_t>(grads->size()) != total_params) {
        throw EngineError("scope_mask: fisher_topk requires gradients");
      }
      const auto k = static_cast<int64_t>(
          std::llround((1.0 - scope.sparsity) * static_cast<double>(total_params)));
      std::vector<int64_t> idx(static_cast<size_t>(total_params));
      std::iota(idx.begin(), idx.end(), int64_t{0});
      std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        const double ga = (*grads)[static_cast<size_t>(a)] * (*grads)[static_cast<size_t>(a)];
        const double gb = (*grads)[static_cast<size_t>(b)] * (*grads)[static_cast<size_t>(b)];
        if (ga != gb) return ga > gb;
        return a < b;
      });
      for (int64_t i = 0; i < k; ++i) mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
      break;
    }
  }
  return mask;
}

/// t_diag[i] <- 0 where the mask is false.
inline MaskedOperator apply_scope(MaskedOperator op, const std::vector<uint8_t>& mask) {
  if (mask.size() != op.t_diag.size()) throw EngineError("apply_scope: mask/operator size mismatch");
  for (size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) op.t_diag[i] = 0.0;
  }
  op.recount();
  return op;
}

struct Perturbation {
  std::vector<double> eps;
  bool degenerate = false;   // gradient too small on the active support, eps = 0
  double scaled_norm = 0.0;  // ||T^+ eps||_p on the active support; rho unless degenerate
};

inline double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// Single ascent step solving the inner maximization:
///   p=2:   eps = rho * T^2 g / ||T g||_2
///   p=inf: eps = rho * T * sign(g)
/// The operator must already be scope-composed (zeros outside the mask).
inline Perturbation perturbation(const MaskedOperator& op, const std::vector<uint8_t>& mask,
                                 const std::vector<double>& grads, double rho, NormOrder p) {
  if (rho <= 0.0) throw EngineError("perturbation: rho must be > 0");
  const size_t n = grads.size();
  if (op.t_diag.size() != n || mask.size() != n) {
    throw EngineError("perturbation: operator/mask/gradient size mismatch");
  }
  Perturbation out;
  out.eps.assign(n, 0.0);
  if (p == NormOrder::l2) {
    double denom_sq = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double tg = op.t_diag[i] * grads[i];
      denom_sq += tg * tg;
    }
    const double denom = std::sqrt(denom_sq);
    if (denom < 1e-12) {
      out.degenerate = true;
      return out;
    }
    for (size_t i = 0; i < n; ++i) {
      out.eps[i] = rho * op.t_diag[i] * op.t_diag[i] * grads[i] / denom;
    }
  } else {
    bool any = false;
    for (size_t i = 0; i < n; ++i) {
      out.eps[i] = rho * op.t_diag[i] * sign(grads[i]);
      any = any || (op.t_diag[i] > 0.0 && grads[i] != 0.0);
    }
    if (!any) {
      out.eps.assign(n, 0.0);
      out.degenerate = true;
      return out;
    }
  }
  // ||T^+ eps||_p restricted to the active support
  if (p == NormOrder::l2) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
      if (op.t_diag[i] > 0.0) {
        const double s = out.eps[i] / op.t_diag[i];
        acc += s * s;
      }
    }
    out.scaled_norm = std::sqrt(acc);
  } else {
    double m = 0.0;
    for (size_t i = 0; i < n; ++i) {
      if (op.t_diag[i] > 0.0) m = std::max(m, std::abs(out.eps[i] / op.t_diag[i]));
    }
    out.scaled_norm = m;
  }
  return out;
}

/// Reporting convention from the sparse-perturbation comparisons: sparsity is
/// the fraction of parameters NOT perturbed.
struct SparsityReport {
  double sparsity = 0.0;
  int64_t total = 0;
  int64_t active_total = 0;
  int64_t active_weight = 0;
  int64_t active_bias = 0;
  int64_t active_norm_weight = 0;
  int64_t active_norm_bias = 0;
};

inline SparsityReport sparsity_report(const std::vector<uint8_t>& mask,
                                      const std::vector<ParamView>& views) {
  SparsityReport r;
  r.total = static_cast<int64_t>(mask.size());
  for (const auto& v : views) {
    int64_t active = 0;
    for (int64_t i = v.offset; i < v.offset + v.length; ++i) {
      active += mask[static_cast<size_t>(i)] ? 1 : 0;
    }
    r.active_total += active;
    switch (v.tag) {
      case Tag::weight: r.active_weight += active; break;
      case Tag::bias: r.active_bias += active; break;
      case Tag::norm_weight: r.active_norm_weight += active; break;
      case Tag::norm_bias: r.active_norm_bias += active; break;
    }
  }
  r.sparsity = 1.0 - static_cast<double>(r.active_total) / static_cast<double>(r.total);
  return r;
}

}  // namespace samlab
