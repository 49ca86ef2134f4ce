#pragma once

// Training loop: document packing and shuffling, warmup/cosine learning
// rate, batch-size warmup, global-norm clipping, AdamW with decay applied to
// weight matrices only, smoothed loss and per-step diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <exception>
#include <map>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "finforge/errors.hpp"
#include "finforge/model.hpp"
#include "finforge/rng.hpp"

namespace finforge::trainer {

using model::ModelParams;
using model::ParamKind;
using model::Tensor;
using model::TokenId;

inline constexpr TokenId kEndOfText = 0;

enum class ShuffleMode { Full, ShardLevel };

inline std::string to_string(ShuffleMode m) { return m == ShuffleMode::Full ? "full" : "shard_level"; }

inline ShuffleMode parse_shuffle_mode(const std::string& s) {
  if (s == "full") return ShuffleMode::Full;
  if (s == "shard_level") return ShuffleMode::ShardLevel;
  throw UsageError("shuffle mode must be 'full' or 'shard_level', got '" + s + "'");
}

struct TrainConfig {
  double max_lr = 6e-5;
  double final_lr = 6e-6;
  std::int64_t warmup_steps = 1800;
  std::int64_t horizon_steps = 0;  // 0: ceil(planned_tokens / post-warmup tokens per step)
  double planned_tokens = 709e9;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 0.3;
  std::int64_t seq_len = 2048;
  std::int64_t batch_size = 1024;
  std::int64_t batch_size_after = 2048;
  std::int64_t batch_warmup_steps = 7200;
  double dropout = 0.0;
  bool qk_layer_scaling = false;
  bool loss_on_eot = true;
  std::uint64_t seed = 0;
  std::int64_t total_steps = 0;
  ShuffleMode shuffle = ShuffleMode::Full;
  std::int64_t shard_size = 1;
  std::int64_t log_every = 5;
  std::int64_t val_every = 300;
  std::int64_t checkpoint_every = 300;
  double smoothing_alpha = 0.001;

  std::int64_t horizon() const {
    if (horizon_steps > 0) return horizon_steps;
    const double per_step = static_cast<double>(batch_size_after) * static_cast<double>(seq_len);
    return static_cast<std::int64_t>(std::ceil(planned_tokens / per_step));
  }

  void validate() const {
    if (!(final_lr > 0.0) || !(final_lr <= max_lr)) throw UsageError("config: need 0 < final_lr <= max_lr");
    if (warmup_steps < 0 || warmup_steps >= horizon()) throw UsageError("config: need 0 <= warmup_steps < horizon");
    if (!(clip_norm > 0.0)) throw UsageError("config: clip_norm must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw UsageError("config: betas in [0,1)");
    if (!(adam_eps > 0.0) || weight_decay < 0.0) throw UsageError("config: adam_eps > 0 and weight_decay >= 0");
    if (seq_len < 2) throw UsageError("config: seq_len must be at least 2");
    if (batch_size < 1 || batch_size_after < 1 || batch_warmup_steps < 0) throw UsageError("config: bad batch sizes");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("config: dropout in [0,1)");
    if (shard_size < 1) throw UsageError("config: shard_size must be positive");
    if (log_every < 1 || val_every < 1 || checkpoint_every < 0) throw UsageError("config: bad cadence");
    if (!(smoothing_alpha > 0.0 && smoothing_alpha <= 1.0)) throw UsageError("config: smoothing_alpha in (0,1]");
    if (total_steps < 0) throw UsageError("config: total_steps must be non-negative");
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw UsageError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw UsageError("config: '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config: '" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace detail

// Sets one TrainConfig entry from text. Returns false for unknown keys.
// `lr_scale` multiplies max_lr.
inline bool apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "max_lr") c.max_lr = parse_double(key, value);
  else if (key == "lr_scale") c.max_lr *= parse_double(key, value);
  else if (key == "final_lr") c.final_lr = parse_double(key, value);
  else if (key == "warmup_steps") c.warmup_steps = parse_int(key, value);
  else if (key == "horizon_steps") c.horizon_steps = parse_int(key, value);
  else if (key == "planned_tokens") c.planned_tokens = parse_double(key, value);
  else if (key == "beta1") c.beta1 = parse_double(key, value);
  else if (key == "beta2") c.beta2 = parse_double(key, value);
  else if (key == "adam_eps") c.adam_eps = parse_double(key, value);
  else if (key == "weight_decay") c.weight_decay = parse_double(key, value);
  else if (key == "clip_norm") c.clip_norm = parse_double(key, value);
  else if (key == "seq_len") c.seq_len = parse_int(key, value);
  else if (key == "batch_size") c.batch_size = parse_int(key, value);
  else if (key == "batch_size_after") c.batch_size_after = parse_int(key, value);
  else if (key == "batch_warmup_steps") c.batch_warmup_steps = parse_int(key, value);
  else if (key == "dropout") c.dropout = parse_double(key, value);
  else if (key == "qk_layer_scaling") c.qk_layer_scaling = parse_bool(key, value);
  else if (key == "loss_on_eot") c.loss_on_eot = parse_bool(key, value);
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "total_steps") c.total_steps = parse_int(key, value);
  else if (key == "shuffle") c.shuffle = parse_shuffle_mode(value);
  else if (key == "shard_size") c.shard_size = parse_int(key, value);
  else if (key == "log_every") c.log_every = parse_int(key, value);
  else if (key == "val_every") c.val_every = parse_int(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_int(key, value);
  else if (key == "smoothing_alpha") c.smoothing_alpha = parse_double(key, value);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Schedules.

inline double lr_at(std::int64_t step, const TrainConfig& c) {
  if (step < 0) throw UsageError("lr_at: negative step");
  const std::int64_t H = c.horizon();
  if (step <= c.warmup_steps) {
    if (c.warmup_steps == 0) return c.max_lr;
    return c.max_lr * (static_cast<double>(step) / static_cast<double>(c.warmup_steps));
  }
  if (step >= H) return c.final_lr;
  const double frac = static_cast<double>(step - c.warmup_steps) / static_cast<double>(H - c.warmup_steps);
  return c.final_lr + 0.5 * (c.max_lr - c.final_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

inline std::int64_t batch_size_at(std::int64_t step, const TrainConfig& c) {
  if (step < 1) throw UsageError("batch_size_at: steps are 1-based");
  return step <= c.batch_warmup_steps ? c.batch_size : c.batch_size_after;
}

// ---------------------------------------------------------------------------
// Data.

struct Packed {
  std::vector<std::vector<TokenId>> sequences;
  std::size_t stream_length = 0;
  std::size_t dropped = 0;
};

// doc_1 <eot> doc_2 <eot> ... cut into consecutive seq_len chunks; the
// trailing partial chunk is dropped.
inline std::vector<TokenId> concat_stream(const std::vector<std::vector<TokenId>>& docs,
                                          std::span<const std::uint32_t> order) {
  std::vector<TokenId> stream;
  for (auto i : order) {
    const auto& d = docs.at(i);
    stream.insert(stream.end(), d.begin(), d.end());
    stream.push_back(kEndOfText);
  }
  return stream;
}

inline std::vector<std::uint32_t> identity_order(std::size_t n) {
  std::vector<std::uint32_t> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = static_cast<std::uint32_t>(i);
  return o;
}

inline Packed pack_documents(const std::vector<std::vector<TokenId>>& docs, std::int64_t seq_len) {
  if (seq_len < 2) throw UsageError("pack_documents: seq_len must be at least 2");
  const auto stream = concat_stream(docs, identity_order(docs.size()));
  const auto L = static_cast<std::size_t>(seq_len);
  Packed p;
  p.stream_length = stream.size();
  for (std::size_t off = 0; off + L <= stream.size(); off += L)
    p.sequences.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(off),
                             stream.begin() + static_cast<std::ptrdiff_t>(off + L));
  p.dropped = stream.size() - p.sequences.size() * L;
  return p;
}

inline void fisher_yates(std::vector<std::uint32_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

// Permutation of n documents. shard_level keeps runs of `shard_size`
// consecutive documents together and permutes the runs.
inline std::vector<std::uint32_t> shuffle_order(std::size_t n, std::uint64_t seed, ShuffleMode mode,
                                                std::size_t shard_size = 1) {
  Rng rng(seed);
  if (mode == ShuffleMode::Full) {
    auto order = identity_order(n);
    fisher_yates(order, rng);
    return order;
  }
  if (shard_size == 0) throw UsageError("shuffle_order: shard_size must be positive");
  auto shards = identity_order((n + shard_size - 1) / shard_size);
  fisher_yates(shards, rng);
  std::vector<std::uint32_t> order;
  order.reserve(n);
  for (auto s : shards)
    for (std::size_t i = s * shard_size; i < std::min(n, (s + 1) * shard_size); ++i)
      order.push_back(static_cast<std::uint32_t>(i));
  return order;
}

// ---------------------------------------------------------------------------
// Optimizer pieces.

template <class T>
struct ParamRef {
  std::string name;
  ParamKind kind;
  Tensor<T>* tensor;
};

template <class T>
std::vector<ParamRef<T>> param_refs(ModelParams<T>& p) {
  std::vector<ParamRef<T>> out;
  p.for_each([&](const std::string& name, const char*, ParamKind kind, Tensor<T>& t) {
    out.push_back({name, kind, &t});
  });
  return out;
}

template <class T>
double global_norm(const ModelParams<T>& g) {
  double ss = 0;
  g.for_each([&](const std::string&, const char*, ParamKind, const Tensor<T>& t) {
    for (auto v : t.data) ss += static_cast<double>(v) * static_cast<double>(v);
  });
  return std::sqrt(ss);
}

// Rescales to `clip_norm` when the global norm exceeds it. Returns the norm
// before clipping.
template <class T>
double clip_gradients(ModelParams<T>& g, double clip_norm) {
  if (!(clip_norm > 0.0)) throw UsageError("clip_gradients: clip_norm must be positive");
  const double norm = global_norm(g);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > clip_norm) {
    const T scale = static_cast<T>(clip_norm / norm);
    g.for_each([&](const std::string&, const char*, ParamKind, Tensor<T>& t) {
      for (auto& v : t.data) v *= scale;
    });
  }
  return norm;
}

template <class T>
struct AdamState {
  ModelParams<T> m, v;
  std::int64_t t = 0;

  explicit AdamState(const model::ModelShape& s) : m(s), v(s) {}
};

// theta <- theta * (1 - lr*lambda) - lr * mhat / (sqrt(vhat) + eps), with
// lambda = 0 for gains and biases.
template <class T>
void adamw_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, double lr,
                const TrainConfig& c) {
  state.t += 1;
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  auto P = param_refs(params);
  auto G = param_refs(const_cast<ModelParams<T>&>(grads));
  auto M = param_refs(state.m);
  auto V = param_refs(state.v);
  if (P.size() != G.size() || P.size() != M.size()) throw UsageError("adamw_step: shape mismatch");
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2), eps = static_cast<T>(c.adam_eps);
  const T lr_t = static_cast<T>(lr);
  for (std::size_t k = 0; k < P.size(); ++k) {
    auto& th = P[k].tensor->data;
    const auto& g = G[k].tensor->data;
    auto& m = M[k].tensor->data;
    auto& v = V[k].tensor->data;
    if (th.size() != g.size()) throw UsageError("adamw_step: shape mismatch in " + P[k].name);
    const T decay = P[k].kind == ParamKind::Weight ? static_cast<T>(1.0 - lr * c.weight_decay) : T(1);
    for (std::size_t i = 0; i < th.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / static_cast<T>(c1);
      const T vhat = v[i] / static_cast<T>(c2);
      th[i] = th[i] * decay - lr_t * (mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// y_t = sum_i x_i (1-a)^(t-i) / sum_i (1-a)^(t-i), kept incrementally.
struct LossSmoother {
  double alpha = 0.001;
  double num = 0.0;
  double den = 0.0;

  void add(double x) {
    num = (1.0 - alpha) * num + x;
    den = (1.0 - alpha) * den + 1.0;
  }
  double value() const {
    if (den == 0.0) throw UsageError("smoothed loss of an empty series");
    return num / den;
  }
};

inline double smoothed_loss(std::span<const double> xs, double alpha = 0.001) {
  LossSmoother s{alpha};
  for (double x : xs) s.add(x);
  return s.value();
}

// L2 norm divided by sqrt(element count), per tensor.
template <class T>
std::map<std::string, double> component_weight_norms(const ModelParams<T>& p) {
  std::map<std::string, double> out;
  p.for_each([&](const std::string& name, const char*, ParamKind, const Tensor<T>& t) {
    double ss = 0;
    for (auto v : t.data) ss += static_cast<double>(v) * static_cast<double>(v);
    out[name] = t.size() == 0 ? 0.0 : std::sqrt(ss) / std::sqrt(static_cast<double>(t.size()));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics: `step,kind,name,value` lines.

struct DiagRecord {
  std::int64_t step;
  std::string kind;
  std::string name;
  std::string value;
};

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class Diagnostics {
 public:
  explicit Diagnostics(std::ostream* sink = nullptr, std::size_t keep = 4096) : sink_(sink), keep_(keep) {}

  void set_sink(std::ostream* sink) { sink_ = sink; }

  void record(std::int64_t step, const std::string& kind, const std::string& name, const std::string& value) {
    if (sink_) *sink_ << step << ',' << kind << ',' << name << ',' << value << '\n';
    recent_.push_back({step, kind, name, value});
    if (recent_.size() > keep_) recent_.pop_front();
  }
  void record(std::int64_t step, const std::string& kind, const std::string& name, double value) {
    record(step, kind, name, format_real(value));
  }

  const std::deque<DiagRecord>& recent() const { return recent_; }

 private:
  std::ostream* sink_;
  std::size_t keep_;
  std::deque<DiagRecord> recent_;
};

// ---------------------------------------------------------------------------
// Trainer.

struct TrainState {
  std::int64_t step = 0;
  std::uint64_t epoch = 0;
  std::vector<std::uint32_t> doc_order;
  std::uint64_t token_cursor = 0;  // offset into the current epoch's stream
  std::uint64_t rng_state = 0;
  double smooth_num = 0.0;
  double smooth_den = 0.0;
};

struct StepReport {
  std::int64_t step;
  double loss;
  double smoothed_loss;
  double grad_norm;
  double lr;
  std::int64_t batch_size;
};

// FNV-1a over document lengths and ids.
inline std::uint64_t corpus_fingerprint(const std::vector<std::vector<TokenId>>& docs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t x) {
    for (int b = 0; b < 8; ++b) {
      h ^= (x >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(docs.size());
  for (const auto& d : docs) {
    mix(d.size());
    for (auto t : d) mix(static_cast<std::uint32_t>(t));
  }
  return h;
}

template <class T = double>
class Trainer {
 public:
  Trainer(ModelParams<T> params, TrainConfig cfg, std::vector<std::vector<TokenId>> train_docs,
          std::vector<std::vector<TokenId>> val_docs = {})
      : params_(std::move(params)),
        adam_(params_.shape),
        cfg_(std::move(cfg)),
        docs_(std::move(train_docs)),
        val_(pack_documents(val_docs, cfg_.seq_len).sequences) {
    cfg_.validate();
    if (docs_.empty()) throw DataError("training corpus has no documents");
    std::size_t total = 0;
    for (const auto& d : docs_) {
      total += d.size() + 1;
      for (auto t : d)
        if (t < 0 || t >= params_.shape.vocab) throw DataError("training token id outside model vocabulary");
    }
    if (total < static_cast<std::size_t>(cfg_.seq_len))
      throw DataError("training corpus shorter than one sequence of seq_len tokens");
    rng_ = Rng(derive_key(cfg_.seed, "data-order"));
    smoother_.alpha = cfg_.smoothing_alpha;
    start_epoch();
  }

  unsigned threads = 1;
  Diagnostics diagnostics;
  std::vector<DiagRecord> provenance;  // overrides applied so far, carried in checkpoints

  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }
  const AdamState<T>& adam() const { return adam_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  std::uint64_t fingerprint() const { return corpus_fingerprint(docs_); }
  double smoothed() const { return smoother_.value(); }

  TrainState state() const {
    return {step_, epoch_, order_, cursor_, rng_.state(), smoother_.num, smoother_.den};
  }

  // Restores everything a checkpoint carries.
  void restore(const TrainState& s, ModelParams<T> params, AdamState<T> adam, const TrainConfig& cfg) {
    if (!(params.shape == params_.shape)) throw DataError("checkpoint shape does not match the model");
    if (s.doc_order.size() != docs_.size()) throw DataError("checkpoint document order does not match corpus");
    cfg.validate();
    cfg_ = cfg;
    params_ = std::move(params);
    adam_ = std::move(adam);
    step_ = s.step;
    epoch_ = s.epoch;
    order_ = s.doc_order;
    cursor_ = s.token_cursor;
    rng_.set_state(s.rng_state);
    smoother_ = LossSmoother{cfg_.smoothing_alpha, s.smooth_num, s.smooth_den};
    stream_ = concat_stream(docs_, order_);
  }

  // Applies textual overrides; provenance goes to the diagnostics log.
  void apply_overrides(const std::vector<std::pair<std::string, std::string>>& overrides) {
    TrainConfig next = cfg_;
    for (const auto& [k, v] : overrides)
      if (!apply_setting(next, k, v)) throw UsageError("unknown override key '" + k + "'");
    next.validate();
    for (const auto& [k, v] : overrides) {
      diagnostics.record(step_, "override", k, v);
      provenance.push_back({step_, "override", k, v});
    }
    cfg_ = next;
    smoother_.alpha = cfg_.smoothing_alpha;
  }

  // Re-permutes the documents not yet started in the current epoch.
  void reshuffle_remaining(std::uint64_t seed) {
    std::size_t started = 0, off = 0;
    while (started < order_.size() && off < cursor_) off += docs_[order_[started++]].size() + 1;
    std::vector<std::uint32_t> rest(order_.begin() + static_cast<std::ptrdiff_t>(started), order_.end());
    const auto perm = shuffle_order(rest.size(), seed, cfg_.shuffle, static_cast<std::size_t>(cfg_.shard_size));
    for (std::size_t i = 0; i < rest.size(); ++i) order_[started + i] = rest[perm[i]];
    stream_ = concat_stream(docs_, order_);
    diagnostics.record(step_, "override", "reshuffle_seed", std::to_string(seed));
    provenance.push_back({step_, "override", "reshuffle_seed", std::to_string(seed)});
  }

  model::ForwardConfig forward_config(std::int64_t step, std::uint64_t example, bool training) const {
    model::ForwardConfig f;
    f.training = training;
    f.p_at = f.p_h = f.p_f = cfg_.dropout;
    f.rng_seed = derive_key(cfg_.seed, "dropout");
    f.step = static_cast<std::uint64_t>(step);
    f.example = example;
    f.qk_layer_scaling = cfg_.qk_layer_scaling;
    return f;
  }

  std::vector<TokenId> targets_for(const std::vector<TokenId>& seq) const {
    std::vector<TokenId> y(seq.begin() + 1, seq.end());
    if (!cfg_.loss_on_eot)
      for (auto& t : y)
        if (t == kEndOfText) t = model::kIgnoreTarget;
    return y;
  }

  // Mean loss over all validation sequences, dropout off.
  double validation_loss() const {
    if (val_.empty()) throw DataError("no validation sequences");
    std::vector<double> losses(val_.size());
    parallel_for(val_.size(), [&](std::size_t i) {
      const auto& seq = val_[i];
      const std::vector<TokenId> x(seq.begin(), seq.end() - 1);
      const auto y = targets_for(seq);
      losses[i] = static_cast<double>(model::cross_entropy_loss(
          model::forward(params_, std::span<const TokenId>(x), forward_config(step_, i, false)),
          std::span<const TokenId>(y)));
    });
    double s = 0;
    for (double l : losses) s += l;
    return s / static_cast<double>(losses.size());
  }

  StepReport train_step() {
    const std::int64_t s = step_ + 1;
    const double lr = lr_at(s, cfg_);
    const auto B = static_cast<std::size_t>(batch_size_at(s, cfg_));
    std::vector<std::vector<TokenId>> batch;
    for (std::size_t b = 0; b < B; ++b) batch.push_back(next_sequence());

    // Per-example gradients are summed in example order so the result does
    // not depend on the worker count.
    ModelParams<T> grad(params_.shape);
    std::vector<double> losses(B);
    const std::size_t wave = std::max<std::size_t>(1, threads);
    std::vector<ModelParams<T>> local(std::min(wave, B), ModelParams<T>(params_.shape));
    for (std::size_t start = 0; start < B; start += wave) {
      const std::size_t n = std::min(wave, B - start);
      parallel_for(n, [&](std::size_t k) {
        const std::size_t e = start + k;
        local[k].zero();
        const std::vector<TokenId> x(batch[e].begin(), batch[e].end() - 1);
        const auto y = targets_for(batch[e]);
        losses[e] = static_cast<double>(model::loss_and_grad(params_, std::span<const TokenId>(x),
                                                             std::span<const TokenId>(y),
                                                             forward_config(s, e, true), local[k],
                                                             static_cast<T>(1.0 / static_cast<double>(B))));
      });
      for (std::size_t k = 0; k < n; ++k) add_into(grad, local[k]);
    }
    double loss = 0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss))
      throw NumericError("non-finite training loss at step " + std::to_string(s) + "; last good step " +
                         std::to_string(step_));

    const double norm = clip_gradients(grad, cfg_.clip_norm);
    adamw_step(params_, grad, adam_, lr, cfg_);
    smoother_.add(loss);
    step_ = s;

    diagnostics.record(s, "grad_norm", "global", norm);
    diagnostics.record(s, "lr", "lr", lr);
    for (const auto& [name, v] : component_weight_norms(params_)) diagnostics.record(s, "weight_norm", name, v);
    if (s % cfg_.log_every == 0) {
      diagnostics.record(s, "train_loss", "raw", loss);
      diagnostics.record(s, "train_loss", "smoothed", smoother_.value());
    }
    if (!val_.empty() && s % cfg_.val_every == 0) diagnostics.record(s, "val_loss", "mean", validation_loss());
    return {s, loss, smoother_.value(), norm, lr, static_cast<std::int64_t>(B)};
  }

 private:
  template <class F>
  void parallel_for(std::size_t n, F&& f) const {
    const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), n);
    if (workers <= 1) {
      for (std::size_t i = 0; i < n; ++i) f(i);
      return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) f(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  static void add_into(ModelParams<T>& acc, const ModelParams<T>& g) {
    auto A = param_refs(acc);
    auto G = param_refs(const_cast<ModelParams<T>&>(g));
    for (std::size_t k = 0; k < A.size(); ++k)
      for (std::size_t i = 0; i < A[k].tensor->size(); ++i) (*A[k].tensor)[i] += (*G[k].tensor)[i];
  }

  void start_epoch() {
    order_ = shuffle_order(docs_.size(), rng_.next_u64(), cfg_.shuffle, static_cast<std::size_t>(cfg_.shard_size));
    stream_ = concat_stream(docs_, order_);
    cursor_ = 0;
  }

  std::vector<TokenId> next_sequence() {
    const auto L = static_cast<std::size_t>(cfg_.seq_len);
    if (cursor_ + L > stream_.size()) {
      ++epoch_;
      start_epoch();
    }
    std::vector<TokenId> seq(stream_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                             stream_.begin() + static_cast<std::ptrdiff_t>(cursor_ + L));
    cursor_ += L;
    return seq;
  }

  ModelParams<T> params_;
  AdamState<T> adam_;
  TrainConfig cfg_;
  std::vector<std::vector<TokenId>> docs_;
  std::vector<std::vector<TokenId>> val_;
  Rng rng_;
  LossSmoother smoother_;
  std::int64_t step_ = 0;
  std::uint64_t epoch_ = 0;
  std::vector<std::uint32_t> order_;
  std::vector<TokenId> stream_;
  std::uint64_t cursor_ = 0;
};

}  // namespace finforge::trainer
