#pragma once

// Compute-budget planning: effective FLOPs, Chinchilla fits, the Levine
// depth-width rule, shape rounding and exact parameter accounting.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "finforge/errors.hpp"

namespace finforge::scaling {

struct ComputeBudget {
  double gpu_hours = 1.3e6;
  double flops_per_gpu_second = 1.02e14;
  double checkpoint_discount = 0.75;
};

inline double effective_flops(const ComputeBudget& b) {
  if (!(b.gpu_hours > 0) || !(b.flops_per_gpu_second > 0) || !(b.checkpoint_discount > 0) ||
      b.checkpoint_discount > 1)
    throw UsageError("compute budget entries must be positive and discount in (0,1]");
  return b.checkpoint_discount * b.gpu_hours * 3600.0 * b.flops_per_gpu_second;
}

struct ChinchillaFit {
  int approach = 1;
  double param_slope = 0.498;
  double param_intercept = -1.004;
  double token_slope = 0.502;
  double token_intercept = 0.229;

  static ChinchillaFit approach1() { return {1, 0.498, -1.004, 0.502, 0.229}; }
  static ChinchillaFit approach2() { return {2, 0.490, -0.839, 0.510, 0.062}; }
};

struct ChinchillaPrediction {
  double params;
  double tokens;
};

inline ChinchillaPrediction chinchilla_predict(double flops, const ChinchillaFit& fit) {
  if (!(flops > 0)) throw UsageError("chinchilla_predict: flops must be positive");
  const double lf = std::log10(flops);
  return {std::pow(10.0, lf * fit.param_slope + fit.param_intercept),
          std::pow(10.0, lf * fit.token_slope + fit.token_intercept)};
}

inline double levine_width(int layers) { return std::exp(5.039) * std::exp(0.0555 * layers); }

struct ModelShape {
  std::int64_t layers = 0;     // L
  std::int64_t heads = 0;      // N
  std::int64_t hidden = 0;     // D
  std::int64_t head_dim = 0;   // D^n
  std::int64_t ffn = 0;        // D'
  std::int64_t vocab = 0;      // |V|

  bool operator==(const ModelShape&) const = default;

  // L = 0 is allowed (embedding + LayerNorms only).
  void validate() const {
    if (layers < 0 || heads <= 0 || hidden <= 0 || head_dim <= 0 || ffn <= 0 || vocab <= 0)
      throw UsageError("model shape entries must be positive");
    if (hidden != heads * head_dim) throw UsageError("model shape: hidden must equal heads * head_dim");
    if (ffn != 4 * hidden) throw UsageError("model shape: ffn must equal 4 * hidden");
  }

  // Tensor-core friendly: hidden and head dims divisible by 8.
  bool aligned() const { return hidden % 8 == 0 && head_dim % 8 == 0; }

  static ModelShape make(std::int64_t layers, std::int64_t heads, std::int64_t head_dim, std::int64_t vocab) {
    ModelShape s{layers, heads, heads * head_dim, head_dim, 4 * heads * head_dim, vocab};
    s.validate();
    return s;
  }
};

inline std::ostream& operator<<(std::ostream& os, const ModelShape& s) {
  return os << "L=" << s.layers << " N=" << s.heads << " D=" << s.hidden << " Dhead=" << s.head_dim
            << " Dff=" << s.ffn << " V=" << s.vocab;
}

struct ParamRow {
  std::string group;
  std::string name;
  std::string shape;
  std::int64_t size;       // per instance
  std::int64_t instances;  // layers, or layers * heads
  std::int64_t total() const { return size * instances; }
};

struct ParamTable {
  std::vector<ParamRow> rows;
  std::int64_t grand_total = 0;

  std::optional<ParamRow> row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    return std::nullopt;
  }
};

// One row per trainable parameter of the architecture.
inline ParamTable count_parameters(const ModelShape& s) {
  s.validate();
  const auto L = s.layers, N = s.heads, D = s.hidden, Dh = s.head_dim, Dff = s.ffn, V = s.vocab;
  const std::string d = "D", dh = "Dhead";
  ParamTable t;
  t.rows = {
      {"embedding", "W_em", "D x V", D * V, 1},
      {"ln_em", "gamma_em", d, D, 1},
      {"ln_em", "beta_em", d, D, 1},
      {"ln_in", "gamma_in", d, D, L},
      {"ln_in", "beta_in", d, D, L},
      {"attention", "W_q", "Dhead x D", Dh * D, L * N},
      {"attention", "W_k", "Dhead x D", Dh * D, L * N},
      {"attention", "W_v", "Dhead x D", Dh * D, L * N},
      {"attention", "U", "D x Dhead", D * Dh, L * N},
      {"attention", "b_q", dh, Dh, L * N},
      {"attention", "b_k", dh, Dh, L * N},
      {"attention", "b_v", dh, Dh, L * N},
      {"attention", "c", d, D, L},
      {"ln_at", "gamma_at", d, D, L},
      {"ln_at", "beta_at", d, D, L},
      {"ffn", "W_f", "Dff x D", Dff * D, L},
      {"ffn", "U_f", "D x Dff", D * Dff, L},
      {"ffn", "b_f", "Dff", Dff, L},
      {"ffn", "c_f", d, D, L},
      {"ln_f", "gamma_f", d, D, 1},
      {"ln_f", "beta_f", d, D, 1},
  };
  for (const auto& r : t.rows) t.grand_total += r.total();
  return t;
}

// Admissible (heads, head_dim) grid used when rounding a raw width.
struct ShapeSearch {
  std::int64_t min_heads = 8, max_heads = 128, heads_step = 8;
  std::int64_t min_head_dim = 64, max_head_dim = 256, head_dim_step = 64;
  int min_layers = 1, max_layers = 200;
};

struct HeadSplit {
  std::int64_t heads;
  std::int64_t head_dim;
};

// Closest admissible N * Dhead to `raw_width`; ties go to fewer heads.
inline std::optional<HeadSplit> round_width(double raw_width, const ShapeSearch& search = {}) {
  std::optional<HeadSplit> best;
  double best_err = std::numeric_limits<double>::infinity();
  for (auto n = search.min_heads; n <= search.max_heads; n += search.heads_step) {
    for (auto dh = search.min_head_dim; dh <= search.max_head_dim; dh += search.head_dim_step) {
      if (dh % 8 != 0 || (n * dh) % 8 != 0) continue;
      const double err = std::abs(static_cast<double>(n * dh) - raw_width);
      if (err < best_err || (err == best_err && best && n < best->heads)) {
        best_err = err;
        best = HeadSplit{n, dh};
      }
    }
  }
  return best;
}

// Sweeps L, rounds the Levine width for each, and returns the shape whose
// exact parameter count is closest to the target. Ties: smaller L, then
// smaller width error, then fewer heads.
inline ModelShape propose_shape(double target_params, std::int64_t vocab, const ShapeSearch& search = {}) {
  if (!(target_params > static_cast<double>(vocab) * 1000.0))
    throw UsageError("propose_shape: target_params must exceed 1000 * vocab");
  std::optional<ModelShape> best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int L = search.min_layers; L <= search.max_layers; ++L) {
    const double raw = levine_width(L);
    const auto split = round_width(raw, search);
    if (!split) continue;
    const auto shape = ModelShape::make(L, split->heads, split->head_dim, vocab);
    const double dist = std::abs(static_cast<double>(count_parameters(shape).grand_total) - target_params);
    // L ascends, so strict improvement keeps the smaller L on ties. Width
    // error and head count are already settled per L by round_width.
    if (dist < best_dist) {
      best_dist = dist;
      best = shape;
    }
  }
  if (!best) throw UsageError("propose_shape: no admissible shape");
  return *best;
}

}  // namespace finforge::scaling
