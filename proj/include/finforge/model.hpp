#pragma once

// Decoder-only transformer: embedding + embedding LayerNorm, pre-LN blocks
// with ALiBi self-attention and a tanh-GELU MLP, tied output head.
// Activations are row-major with one row per position (T x D); logits are
// T x V. Gradients are hand-derived and share the parameter layout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "finforge/errors.hpp"
#include "finforge/rng.hpp"
#include "finforge/scaling.hpp"

namespace finforge::model {

using scaling::ModelShape;
using TokenId = std::int32_t;

// Target value excluded from the loss.
inline constexpr TokenId kIgnoreTarget = -1;

template <class T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), T(0));
  }

  std::size_t size() const { return data.size(); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

enum class ParamKind { Weight, Gain, Bias };

template <class T>
struct LayerParams {
  Tensor<T> ln_in_gain, ln_in_bias;  // {D}
  Tensor<T> wq, wk, wv;              // {N, Dh, D}
  Tensor<T> bq, bk, bv;              // {N, Dh}
  Tensor<T> wo;                      // U: {N, D, Dh}
  Tensor<T> bo;                      // c: {D}
  Tensor<T> ln_at_gain, ln_at_bias;  // {D}
  Tensor<T> ffn_in;                  // W^f: {Dff, D}
  Tensor<T> ffn_in_bias;             // b^f: {Dff}
  Tensor<T> ffn_out;                 // U^f: {D, Dff}
  Tensor<T> ffn_out_bias;            // c^f: {D}
};

template <class T>
struct ModelParams {
  ModelShape shape;
  Tensor<T> embedding;  // W^em: {D, V}; also the output head
  Tensor<T> ln_em_gain, ln_em_bias;
  std::vector<LayerParams<T>> layers;
  Tensor<T> ln_f_gain, ln_f_bias;

  explicit ModelParams(const ModelShape& s = ModelShape::make(0, 1, 1, 1)) : shape(s) {
    s.validate();
    const auto D = static_cast<std::size_t>(s.hidden), V = static_cast<std::size_t>(s.vocab);
    const auto N = static_cast<std::size_t>(s.heads), Dh = static_cast<std::size_t>(s.head_dim);
    const auto F = static_cast<std::size_t>(s.ffn);
    embedding = Tensor<T>({D, V});
    ln_em_gain = Tensor<T>({D});
    ln_em_bias = Tensor<T>({D});
    ln_f_gain = Tensor<T>({D});
    ln_f_bias = Tensor<T>({D});
    layers.resize(static_cast<std::size_t>(s.layers));
    for (auto& l : layers) {
      l.ln_in_gain = l.ln_in_bias = l.bo = l.ln_at_gain = l.ln_at_bias = l.ffn_out_bias = Tensor<T>({D});
      l.wq = l.wk = l.wv = Tensor<T>({N, Dh, D});
      l.bq = l.bk = l.bv = Tensor<T>({N, Dh});
      l.wo = Tensor<T>({N, D, Dh});
      l.ffn_in = Tensor<T>({F, D});
      l.ffn_in_bias = Tensor<T>({F});
      l.ffn_out = Tensor<T>({D, F});
    }
  }

  // Visits every tensor as f(name, symbol, kind, tensor). `symbol` is the
  // parameter-table row the tensor contributes to.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const char*, ParamKind, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  void zero() {
    for_each([](const std::string&, const char*, ParamKind, Tensor<T>& t) { t.fill(T(0)); });
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("embedding", "W_em", ParamKind::Weight, self.embedding);
    f("ln_em.gain", "gamma_em", ParamKind::Gain, self.ln_em_gain);
    f("ln_em.bias", "beta_em", ParamKind::Bias, self.ln_em_bias);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layer" + std::to_string(i + 1) + ".";
      f(p + "ln_in.gain", "gamma_in", ParamKind::Gain, l.ln_in_gain);
      f(p + "ln_in.bias", "beta_in", ParamKind::Bias, l.ln_in_bias);
      f(p + "attn.wq", "W_q", ParamKind::Weight, l.wq);
      f(p + "attn.wk", "W_k", ParamKind::Weight, l.wk);
      f(p + "attn.wv", "W_v", ParamKind::Weight, l.wv);
      f(p + "attn.bq", "b_q", ParamKind::Bias, l.bq);
      f(p + "attn.bk", "b_k", ParamKind::Bias, l.bk);
      f(p + "attn.bv", "b_v", ParamKind::Bias, l.bv);
      f(p + "attn.wo", "U", ParamKind::Weight, l.wo);
      f(p + "attn.bo", "c", ParamKind::Bias, l.bo);
      f(p + "ln_at.gain", "gamma_at", ParamKind::Gain, l.ln_at_gain);
      f(p + "ln_at.bias", "beta_at", ParamKind::Bias, l.ln_at_bias);
      f(p + "ffn.w_in", "W_f", ParamKind::Weight, l.ffn_in);
      f(p + "ffn.b_in", "b_f", ParamKind::Bias, l.ffn_in_bias);
      f(p + "ffn.w_out", "U_f", ParamKind::Weight, l.ffn_out);
      f(p + "ffn.b_out", "c_f", ParamKind::Bias, l.ffn_out_bias);
    }
    f("ln_f.gain", "gamma_f", ParamKind::Gain, self.ln_f_gain);
    f("ln_f.bias", "beta_f", ParamKind::Bias, self.ln_f_bias);
  }
};

// Standard deviations of the initial weights.
inline double init_std(std::int64_t hidden) { return 1.0 / std::sqrt(3.0 * static_cast<double>(hidden)); }
inline double init_std_output(std::int64_t hidden, std::int64_t layers) {
  return init_std(hidden) / std::sqrt(2.0 * static_cast<double>(std::max<std::int64_t>(layers, 1)));
}

// Each tensor draws from its own stream keyed by name, so the result does
// not depend on visit order.
template <class T = double>
ModelParams<T> init_params(const ModelShape& shape, std::uint64_t seed) {
  ModelParams<T> p(shape);
  const double z = init_std(shape.hidden), z_out = init_std_output(shape.hidden, shape.layers);
  const auto root = derive_key(seed, "init");
  p.for_each([&](const std::string& name, const char* symbol, ParamKind kind, Tensor<T>& t) {
    if (kind == ParamKind::Gain) {
      t.fill(T(1));
    } else if (kind == ParamKind::Bias) {
      t.fill(T(0));
    } else {
      const std::string s = symbol;
      const double sd = (s == "U" || s == "U_f") ? z_out : z;
      Rng rng(derive_key(root, name));
      for (auto& v : t.data) v = static_cast<T>(sd * rng.normal());
    }
  });
  return p;
}

// ---------------------------------------------------------------------------
// Elementwise pieces.

inline constexpr double kGeluC = 0.79788456;
inline constexpr double kGeluA = 0.044715;

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(T(kGeluC) * x * (T(1) + T(kGeluA) * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T t = std::tanh(T(kGeluC) * x * (T(1) + T(kGeluA) * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * x * x);
}

// y = (x - mean) / sqrt(var + eps) * gain + bias, population variance.
template <class T>
void layer_norm(const T* x, std::size_t D, const T* gain, const T* bias, T eps, T* y, T* xhat = nullptr,
                T* rstd_out = nullptr) {
  T mean = 0;
  for (std::size_t i = 0; i < D; ++i) mean += x[i];
  mean /= static_cast<T>(D);
  T var = 0;
  for (std::size_t i = 0; i < D; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<T>(D);
  const T rstd = T(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < D; ++i) {
    const T h = (x[i] - mean) * rstd;
    if (xhat) xhat[i] = h;
    y[i] = h * gain[i] + bias[i];
  }
  if (rstd_out) *rstd_out = rstd;
}

template <class T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, T eps) {
  if (x.empty() || gain.size() != x.size() || bias.size() != x.size())
    throw UsageError("layer_norm: size mismatch");
  std::vector<T> y(x.size());
  layer_norm(x.data(), x.size(), gain.data(), bias.data(), eps, y.data());
  return y;
}

// Accumulates into dx, dgain, dbias.
template <class T>
void layer_norm_backward(const T* dy, const T* xhat, T rstd, const T* gain, std::size_t D, T* dx, T* dgain,
                         T* dbias) {
  T mean_dxh = 0, mean_dxh_xh = 0;
  for (std::size_t i = 0; i < D; ++i) {
    const T dxh = dy[i] * gain[i];
    mean_dxh += dxh;
    mean_dxh_xh += dxh * xhat[i];
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
  }
  mean_dxh /= static_cast<T>(D);
  mean_dxh_xh /= static_cast<T>(D);
  for (std::size_t i = 0; i < D; ++i) dx[i] += rstd * (dy[i] * gain[i] - mean_dxh - xhat[i] * mean_dxh_xh);
}

// ---------------------------------------------------------------------------
// ALiBi.

// Slope of head n (1-based) out of N.
inline double alibi_slope(std::int64_t n, std::int64_t N) {
  if (N < 1 || n < 1 || n > N) throw UsageError("alibi_slope: head index out of range");
  const std::int64_t Nt = std::int64_t{1} << static_cast<int>(std::floor(std::log2(static_cast<double>(N))));
  const double nt = 1.0 + static_cast<double>((n - 1) % Nt) - 0.5 * static_cast<double>((n - 1) / Nt);
  return std::exp2(-(8.0 / static_cast<double>(N)) * nt);
}

// bias[n][i][j] for key i, query j (0-based): slope_n * (i - j) when i < j.
// mask[i][j] is 1 when i <= j, -inf otherwise.
struct AlibiSpec {
  std::int64_t heads = 0;
  std::int64_t length = 0;
  std::vector<std::vector<std::vector<double>>> bias;
  std::vector<std::vector<double>> mask;
};

inline AlibiSpec alibi_matrices(std::int64_t N, std::int64_t T) {
  if (N < 1 || T < 1) throw UsageError("alibi_matrices: N and T must be positive");
  AlibiSpec a;
  a.heads = N;
  a.length = T;
  const auto t = static_cast<std::size_t>(T);
  a.mask.assign(t, std::vector<double>(t, 1.0));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < i; ++j) a.mask[i][j] = -std::numeric_limits<double>::infinity();
  for (std::int64_t n = 1; n <= N; ++n) {
    const double m = alibi_slope(n, N);
    std::vector<std::vector<double>> A(t, std::vector<double>(t, 0.0));
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) A[i][j] = m * (static_cast<double>(i) - static_cast<double>(j));
    a.bias.push_back(std::move(A));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Forward configuration and dropout.

struct ForwardConfig {
  double p_at = 0.0, p_h = 0.0, p_f = 0.0;
  bool training = false;
  std::uint64_t rng_seed = 0;
  std::uint64_t step = 0;     // dropout stream coordinates
  std::uint64_t example = 0;
  double eps = 1e-5;
  bool qk_layer_scaling = false;

  void validate() const {
    for (double p : {p_at, p_h, p_f})
      if (!(p >= 0.0 && p < 1.0)) throw UsageError("dropout probability must be in [0,1)");
    if (!(eps >= 0.0)) throw UsageError("LayerNorm eps must be non-negative");
  }
};

enum class DropoutSite : std::uint64_t { Attention = 1, Hidden = 2, Ffn = 3 };

template <class T>
struct Dropout {
  bool active = false;
  T scale = T(1);
  double p = 0.0;
  std::uint64_t key = 0;

  Dropout(const ForwardConfig& cfg, double prob, std::size_t layer, DropoutSite site)
      : active(cfg.training && prob > 0.0), scale(static_cast<T>(1.0 / (1.0 - prob))), p(prob) {
    if (active) key = derive_key(cfg.rng_seed, {cfg.step, cfg.example, layer, static_cast<std::uint64_t>(site)});
  }

  // Multiplier for element `index`: 0 or 1/(1-p); 1 when inactive.
  T factor(std::uint64_t index) const {
    if (!active) return T(1);
    return counter_uniform(key, index) < p ? T(0) : scale;
  }
};

// ---------------------------------------------------------------------------
// Dense helpers: y[t][o] = b[o] + sum_i W[o][i] x[t][i].

template <class T>
void affine(const T* W, const T* b, const T* x, std::size_t rows, std::size_t O, std::size_t I, T* y) {
  for (std::size_t t = 0; t < rows; ++t) {
    const T* xr = x + t * I;
    T* yr = y + t * O;
    for (std::size_t o = 0; o < O; ++o) {
      const T* w = W + o * I;
      T s = b ? b[o] : T(0);
      for (std::size_t i = 0; i < I; ++i) s += w[i] * xr[i];
      yr[o] = s;
    }
  }
}

template <class T>
void affine_backward(const T* W, const T* x, const T* dy, std::size_t rows, std::size_t O, std::size_t I, T* dx,
                     T* dW, T* db) {
  for (std::size_t t = 0; t < rows; ++t) {
    const T* xr = x + t * I;
    const T* dyr = dy + t * O;
    T* dxr = dx ? dx + t * I : nullptr;
    for (std::size_t o = 0; o < O; ++o) {
      const T g = dyr[o];
      if (g == T(0)) continue;
      if (db) db[o] += g;
      const T* w = W + o * I;
      T* dw = dW + o * I;
      for (std::size_t i = 0; i < I; ++i) {
        dw[i] += g * xr[i];
        if (dxr) dxr[i] += g * w[i];
      }
    }
  }
}

template <class T>
void check_finite(const T* x, std::size_t n, const std::string& where) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) throw NumericError("non-finite value in " + where);
}

// ---------------------------------------------------------------------------
// Per-layer activations kept for the backward pass.

template <class T>
struct LayerCache {
  std::vector<T> h_in, xhat_in, rstd_in, x;      // LN_in
  std::vector<T> q, k, v;                        // T x (N*Dh)
  std::vector<T> probs;                          // N x T x T, row = query
  std::vector<T> heads_out;                      // T x (N*Dh), after dropout-weighted mix
  std::vector<T> hbar, xhat_at, rstd_at, z;      // LN_at
  std::vector<T> u, g;                           // T x Dff
};


// ---------------------------------------------------------------------------
// Self-attention. `x` is the LayerNormed input (len x D); `out` receives the
// attention output including c and hidden dropout. `layer` is 1-based.

template <class T>
void attention_forward(const LayerParams<T>& lp, const ModelShape& s, std::size_t layer, const T* x,
                       std::size_t len, const ForwardConfig& cfg, T* out, LayerCache<T>* cache = nullptr) {
  const auto D = static_cast<std::size_t>(s.hidden), N = static_cast<std::size_t>(s.heads);
  const auto Dh = static_cast<std::size_t>(s.head_dim), NDh = N * Dh;
  std::vector<T> q_local, k_local, v_local, heads_local;
  auto& q = cache ? cache->q : q_local;
  auto& k = cache ? cache->k : k_local;
  auto& v = cache ? cache->v : v_local;
  auto& heads = cache ? cache->heads_out : heads_local;
  q.assign(len * NDh, T(0));
  k.assign(len * NDh, T(0));
  v.assign(len * NDh, T(0));
  heads.assign(len * NDh, T(0));
  affine(lp.wq.ptr(), lp.bq.ptr(), x, len, NDh, D, q.data());
  affine(lp.wk.ptr(), lp.bk.ptr(), x, len, NDh, D, k.data());
  affine(lp.wv.ptr(), lp.bv.ptr(), x, len, NDh, D, v.data());
  if (cache) cache->probs.assign(N * len * len, T(0));

  const Dropout<T> drop_at(cfg, cfg.p_at, layer, DropoutSite::Attention);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(Dh));
  const T inv_layer = cfg.qk_layer_scaling ? T(1) / static_cast<T>(layer) : T(1);
  std::vector<T> p(len);
  for (std::size_t n = 0; n < N; ++n) {
    const T slope = static_cast<T>(alibi_slope(static_cast<std::int64_t>(n + 1), s.heads));
    for (std::size_t j = 0; j < len; ++j) {
      const T* qj = q.data() + j * NDh + n * Dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i <= j; ++i) {
        const T* ki = k.data() + i * NDh + n * Dh;
        T dot = 0;
        for (std::size_t e = 0; e < Dh; ++e) dot += ki[e] * qj[e];
        const T bias = slope * (static_cast<T>(i) - static_cast<T>(j));
        p[i] = (bias + dot * inv_sqrt) * inv_layer;
        mx = std::max(mx, p[i]);
      }
      if (!std::isfinite(mx)) throw NumericError("non-finite attention score in layer " + std::to_string(layer));
      T sum = 0;
      for (std::size_t i = 0; i <= j; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
      }
      T* oj = heads.data() + j * NDh + n * Dh;
      const std::size_t row = (n * len + j) * len;
      for (std::size_t i = 0; i <= j; ++i) {
        p[i] /= sum;
        if (cache) cache->probs[row + i] = p[i];
        const T w = p[i] * drop_at.factor(row + i);
        if (w == T(0)) continue;
        const T* vi = v.data() + i * NDh + n * Dh;
        for (std::size_t e = 0; e < Dh; ++e) oj[e] += w * vi[e];
      }
    }
  }

  const Dropout<T> drop_h(cfg, cfg.p_h, layer, DropoutSite::Hidden);
  for (std::size_t j = 0; j < len; ++j) {
    const T* hj = heads.data() + j * NDh;
    for (std::size_t d = 0; d < D; ++d) {
      T acc = lp.bo[d];
      for (std::size_t n = 0; n < N; ++n) {
        const T* u = lp.wo.ptr() + (n * D + d) * Dh;
        const T* o = hj + n * Dh;
        for (std::size_t e = 0; e < Dh; ++e) acc += u[e] * o[e];
      }
      out[j * D + d] = acc * drop_h.factor(j * D + d);
    }
  }
}

// Accumulates parameter gradients into `g` and input gradients into `dx`.
template <class T>
void attention_backward(const LayerParams<T>& lp, const ModelShape& s, std::size_t layer, const T* x,
                        std::size_t len, const ForwardConfig& cfg, const LayerCache<T>& c, const T* dout, T* dx,
                        LayerParams<T>& g) {
  const auto D = static_cast<std::size_t>(s.hidden), N = static_cast<std::size_t>(s.heads);
  const auto Dh = static_cast<std::size_t>(s.head_dim), NDh = N * Dh;
  const Dropout<T> drop_h(cfg, cfg.p_h, layer, DropoutSite::Hidden);
  const Dropout<T> drop_at(cfg, cfg.p_at, layer, DropoutSite::Attention);

  std::vector<T> da(len * D), dheads(len * NDh, T(0));
  for (std::size_t j = 0; j < len; ++j)
    for (std::size_t d = 0; d < D; ++d) {
      da[j * D + d] = dout[j * D + d] * drop_h.factor(j * D + d);
      g.bo[d] += da[j * D + d];
    }
  for (std::size_t j = 0; j < len; ++j) {
    const T* hj = c.heads_out.data() + j * NDh;
    T* dhj = dheads.data() + j * NDh;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) {
        const T a = da[j * D + d];
        if (a == T(0)) continue;
        const T* u = lp.wo.ptr() + (n * D + d) * Dh;
        T* gu = g.wo.ptr() + (n * D + d) * Dh;
        for (std::size_t e = 0; e < Dh; ++e) {
          gu[e] += a * hj[n * Dh + e];
          dhj[n * Dh + e] += a * u[e];
        }
      }
  }

  std::vector<T> dq(len * NDh, T(0)), dk(len * NDh, T(0)), dv(len * NDh, T(0)), dp(len);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(Dh));
  const T inv_layer = cfg.qk_layer_scaling ? T(1) / static_cast<T>(layer) : T(1);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < len; ++j) {
      const std::size_t row = (n * len + j) * len;
      const T* P = c.probs.data() + row;
      const T* doj = dheads.data() + j * NDh + n * Dh;
      T dot_pdp = 0;
      for (std::size_t i = 0; i <= j; ++i) {
        const T m = drop_at.factor(row + i);
        const T* vi = c.v.data() + i * NDh + n * Dh;
        T* dvi = dv.data() + i * NDh + n * Dh;
        T dpd = 0;
        for (std::size_t e = 0; e < Dh; ++e) {
          dpd += doj[e] * vi[e];
          dvi[e] += P[i] * m * doj[e];
        }
        dp[i] = dpd * m;
        dot_pdp += P[i] * dp[i];
      }
      const T* qj = c.q.data() + j * NDh + n * Dh;
      T* dqj = dq.data() + j * NDh + n * Dh;
      for (std::size_t i = 0; i <= j; ++i) {
        const T ds = P[i] * (dp[i] - dot_pdp) * inv_layer * inv_sqrt;
        if (ds == T(0)) continue;
        const T* ki = c.k.data() + i * NDh + n * Dh;
        T* dki = dk.data() + i * NDh + n * Dh;
        for (std::size_t e = 0; e < Dh; ++e) {
          dqj[e] += ds * ki[e];
          dki[e] += ds * qj[e];
        }
      }
    }
  }
  affine_backward(lp.wq.ptr(), x, dq.data(), len, NDh, D, dx, g.wq.ptr(), g.bq.ptr());
  affine_backward(lp.wk.ptr(), x, dk.data(), len, NDh, D, dx, g.wk.ptr(), g.bk.ptr());
  affine_backward(lp.wv.ptr(), x, dv.data(), len, NDh, D, dx, g.wv.ptr(), g.bv.ptr());
}

// ---------------------------------------------------------------------------
// MLP: U^f gelu(W^f z + b^f) + c^f, then dropout.

template <class T>
void ffn_forward(const LayerParams<T>& lp, const ModelShape& s, std::size_t layer, const T* z, std::size_t len,
                 const ForwardConfig& cfg, T* out, LayerCache<T>* cache = nullptr) {
  const auto D = static_cast<std::size_t>(s.hidden), F = static_cast<std::size_t>(s.ffn);
  std::vector<T> u_local, g_local;
  auto& u = cache ? cache->u : u_local;
  auto& g = cache ? cache->g : g_local;
  u.assign(len * F, T(0));
  g.assign(len * F, T(0));
  affine(lp.ffn_in.ptr(), lp.ffn_in_bias.ptr(), z, len, F, D, u.data());
  for (std::size_t i = 0; i < u.size(); ++i) g[i] = gelu(u[i]);
  affine(lp.ffn_out.ptr(), lp.ffn_out_bias.ptr(), g.data(), len, D, F, out);
  const Dropout<T> drop_f(cfg, cfg.p_f, layer, DropoutSite::Ffn);
  if (drop_f.active)
    for (std::size_t i = 0; i < len * D; ++i) out[i] *= drop_f.factor(i);
}

template <class T>
void ffn_backward(const LayerParams<T>& lp, const ModelShape& s, std::size_t layer, const T* z, std::size_t len,
                  const ForwardConfig& cfg, const LayerCache<T>& c, const T* dout, T* dz, LayerParams<T>& g) {
  const auto D = static_cast<std::size_t>(s.hidden), F = static_cast<std::size_t>(s.ffn);
  const Dropout<T> drop_f(cfg, cfg.p_f, layer, DropoutSite::Ffn);
  std::vector<T> df(len * D), dg(len * F, T(0));
  for (std::size_t i = 0; i < len * D; ++i) df[i] = dout[i] * drop_f.factor(i);
  affine_backward(lp.ffn_out.ptr(), c.g.data(), df.data(), len, D, F, dg.data(), g.ffn_out.ptr(),
                  g.ffn_out_bias.ptr());
  for (std::size_t i = 0; i < len * F; ++i) dg[i] *= gelu_grad(c.u[i]);
  affine_backward(lp.ffn_in.ptr(), z, dg.data(), len, F, D, dz, g.ffn_in.ptr(), g.ffn_in_bias.ptr());
}

// ---------------------------------------------------------------------------
// Full forward pass.

template <class T>
struct Activations {
  std::vector<TokenId> tokens;
  std::vector<T> xhat_em, rstd_em;
  std::vector<LayerCache<T>> layers;
  std::vector<T> xhat_f, rstd_f, h_final;  // h_final = LN_f output
};

// Returns logits, one row of V scores per position.
template <class T>
Tensor<T> forward(const ModelParams<T>& p, std::span<const TokenId> tokens, const ForwardConfig& cfg,
                  Activations<T>* act = nullptr) {
  cfg.validate();
  const ModelShape& s = p.shape;
  const auto D = static_cast<std::size_t>(s.hidden), V = static_cast<std::size_t>(s.vocab);
  const std::size_t len = tokens.size();
  if (len == 0) throw UsageError("forward: empty token sequence");
  for (auto t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw DataError("forward: token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(V));
  const T eps = static_cast<T>(cfg.eps);

  std::vector<T> h(len * D), e(D);
  if (act) {
    act->tokens.assign(tokens.begin(), tokens.end());
    act->xhat_em.assign(len * D, T(0));
    act->rstd_em.assign(len, T(0));
    act->layers.assign(p.layers.size(), {});
  }
  for (std::size_t t = 0; t < len; ++t) {
    const auto x = static_cast<std::size_t>(tokens[t]);
    for (std::size_t d = 0; d < D; ++d) e[d] = p.embedding[d * V + x];
    layer_norm(e.data(), D, p.ln_em_gain.ptr(), p.ln_em_bias.ptr(), eps, h.data() + t * D,
               act ? act->xhat_em.data() + t * D : nullptr, act ? act->rstd_em.data() + t : nullptr);
  }
  check_finite(h.data(), h.size(), "embedding");

  std::vector<T> xbuf(len * D), abuf(len * D), local_xhat(len * D), local_rstd(len);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lp = p.layers[l];
    LayerCache<T>* c = act ? &act->layers[l] : nullptr;
    if (c) {
      c->h_in = h;
      c->xhat_in.assign(len * D, T(0));
      c->rstd_in.assign(len, T(0));
    }
    T* xhat = c ? c->xhat_in.data() : local_xhat.data();
    T* rstd = c ? c->rstd_in.data() : local_rstd.data();
    for (std::size_t t = 0; t < len; ++t)
      layer_norm(h.data() + t * D, D, lp.ln_in_gain.ptr(), lp.ln_in_bias.ptr(), eps, xbuf.data() + t * D,
                 xhat + t * D, rstd + t);
    if (c) c->x = xbuf;
    attention_forward(lp, s, l + 1, xbuf.data(), len, cfg, abuf.data(), c);
    for (std::size_t i = 0; i < len * D; ++i) h[i] += abuf[i];  // h is now h-bar

    if (c) {
      c->hbar = h;
      c->xhat_at.assign(len * D, T(0));
      c->rstd_at.assign(len, T(0));
    }
    xhat = c ? c->xhat_at.data() : local_xhat.data();
    rstd = c ? c->rstd_at.data() : local_rstd.data();
    for (std::size_t t = 0; t < len; ++t)
      layer_norm(h.data() + t * D, D, lp.ln_at_gain.ptr(), lp.ln_at_bias.ptr(), eps, xbuf.data() + t * D,
                 xhat + t * D, rstd + t);
    if (c) c->z = xbuf;
    ffn_forward(lp, s, l + 1, xbuf.data(), len, cfg, abuf.data(), c);
    for (std::size_t i = 0; i < len * D; ++i) h[i] += abuf[i];
    check_finite(h.data(), h.size(), "layer " + std::to_string(l + 1));
  }

  std::vector<T> hf(len * D);
  if (act) {
    act->xhat_f.assign(len * D, T(0));
    act->rstd_f.assign(len, T(0));
  }
  for (std::size_t t = 0; t < len; ++t)
    layer_norm(h.data() + t * D, D, p.ln_f_gain.ptr(), p.ln_f_bias.ptr(), eps, hf.data() + t * D,
               act ? act->xhat_f.data() + t * D : nullptr, act ? act->rstd_f.data() + t : nullptr);

  Tensor<T> logits({len, V});
  for (std::size_t t = 0; t < len; ++t) {
    T* row = logits.ptr() + t * V;
    for (std::size_t d = 0; d < D; ++d) {
      const T a = hf[t * D + d];
      const T* w = p.embedding.ptr() + d * V;
      for (std::size_t v = 0; v < V; ++v) row[v] += w[v] * a;
    }
  }
  check_finite(logits.ptr(), logits.size(), "output head");
  if (act) act->h_final = std::move(hf);
  return logits;
}

// log-softmax of one row, max-subtracted.
template <class T>
void log_softmax(const T* x, std::size_t n, T* out) {
  const T mx = *std::max_element(x, x + n);
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  const T lse = mx + std::log(sum);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - lse;
}

// Per-position negative log-likelihood in nats.
template <class T>
std::vector<T> token_nll(const Tensor<T>& logits, std::span<const TokenId> targets) {
  const std::size_t len = logits.shape.at(0), V = logits.shape.at(1);
  if (targets.size() != len) throw UsageError("token_nll: targets length must equal sequence length");
  std::vector<T> out(len), lp(V);
  for (std::size_t t = 0; t < len; ++t) {
    const auto y = targets[t];
    if (y < 0 || static_cast<std::size_t>(y) >= V) throw DataError("target id outside vocabulary");
    log_softmax(logits.ptr() + t * V, V, lp.data());
    out[t] = -lp[static_cast<std::size_t>(y)];
  }
  return out;
}

// Mean nats over positions whose target is not kIgnoreTarget.
template <class T>
T cross_entropy_loss(const Tensor<T>& logits, std::span<const TokenId> targets) {
  const std::size_t len = logits.shape.at(0), V = logits.shape.at(1);
  if (targets.size() != len) throw UsageError("cross_entropy_loss: targets length must equal sequence length");
  std::vector<T> lp(V);
  T s = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < len; ++t) {
    if (targets[t] == kIgnoreTarget) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V) throw DataError("target id outside vocabulary");
    log_softmax(logits.ptr() + t * V, V, lp.data());
    s -= lp[static_cast<std::size_t>(targets[t])];
    ++n;
  }
  return n == 0 ? T(0) : s / static_cast<T>(n);
}

// Loss of one sequence; adds scale * d(loss)/d(params) into `grad`.
template <class T>
T loss_and_grad(const ModelParams<T>& p, std::span<const TokenId> tokens, std::span<const TokenId> targets,
                const ForwardConfig& cfg, ModelParams<T>& grad, T scale = T(1)) {
  Activations<T> act;
  const Tensor<T> logits = forward(p, tokens, cfg, &act);
  const ModelShape& s = p.shape;
  const auto D = static_cast<std::size_t>(s.hidden), V = static_cast<std::size_t>(s.vocab);
  const std::size_t len = tokens.size();
  if (targets.size() != len) throw UsageError("loss_and_grad: targets length must equal sequence length");

  // d(mean NLL)/d(logits) = (softmax - onehot) / counted positions
  std::size_t counted = 0;
  for (auto y : targets) {
    if (y == kIgnoreTarget) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= V) throw DataError("target id outside vocabulary");
    ++counted;
  }
  std::vector<T> dlogits(len * V, T(0));
  T loss = 0;
  if (counted == 0) return loss;
  for (std::size_t t = 0; t < len; ++t) {
    const auto y = targets[t];
    if (y == kIgnoreTarget) continue;
    T* dl = dlogits.data() + t * V;
    log_softmax(logits.ptr() + t * V, V, dl);
    loss -= dl[static_cast<std::size_t>(y)];
    for (std::size_t v = 0; v < V; ++v) dl[v] = std::exp(dl[v]);
    dl[static_cast<std::size_t>(y)] -= T(1);
    for (std::size_t v = 0; v < V; ++v) dl[v] *= scale / static_cast<T>(counted);
  }
  loss /= static_cast<T>(counted);

  std::vector<T> dh(len * D, T(0)), dhf(len * D, T(0));
  for (std::size_t t = 0; t < len; ++t) {
    const T* dl = dlogits.data() + t * V;
    for (std::size_t d = 0; d < D; ++d) {
      const T a = act.h_final[t * D + d];
      const T* w = p.embedding.ptr() + d * V;
      T* gw = grad.embedding.ptr() + d * V;
      T acc = 0;
      for (std::size_t v = 0; v < V; ++v) {
        gw[v] += dl[v] * a;
        acc += w[v] * dl[v];
      }
      dhf[t * D + d] = acc;
    }
  }
  for (std::size_t t = 0; t < len; ++t)
    layer_norm_backward(dhf.data() + t * D, act.xhat_f.data() + t * D, act.rstd_f[t], p.ln_f_gain.ptr(), D,
                        dh.data() + t * D, grad.ln_f_gain.ptr(), grad.ln_f_bias.ptr());

  std::vector<T> dbuf(len * D);
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& lp = p.layers[l];
    const auto& c = act.layers[l];
    auto& gl = grad.layers[l];
    // h = hbar + FFN(LN_at(hbar)); dh currently holds d/dh.
    std::fill(dbuf.begin(), dbuf.end(), T(0));
    ffn_backward(lp, s, l + 1, c.z.data(), len, cfg, c, dh.data(), dbuf.data(), gl);
    for (std::size_t t = 0; t < len; ++t)
      layer_norm_backward(dbuf.data() + t * D, c.xhat_at.data() + t * D, c.rstd_at[t], lp.ln_at_gain.ptr(), D,
                          dh.data() + t * D, gl.ln_at_gain.ptr(), gl.ln_at_bias.ptr());
    // hbar = h_in + SA(LN_in(h_in)); dh now holds d/dhbar.
    std::fill(dbuf.begin(), dbuf.end(), T(0));
    attention_backward(lp, s, l + 1, c.x.data(), len, cfg, c, dh.data(), dbuf.data(), gl);
    for (std::size_t t = 0; t < len; ++t)
      layer_norm_backward(dbuf.data() + t * D, c.xhat_in.data() + t * D, c.rstd_in[t], lp.ln_in_gain.ptr(), D,
                          dh.data() + t * D, gl.ln_in_gain.ptr(), gl.ln_in_bias.ptr());
  }

  std::vector<T> de(D);
  for (std::size_t t = 0; t < len; ++t) {
    std::fill(de.begin(), de.end(), T(0));
    layer_norm_backward(dh.data() + t * D, act.xhat_em.data() + t * D, act.rstd_em[t], p.ln_em_gain.ptr(), D,
                        de.data(), grad.ln_em_gain.ptr(), grad.ln_em_bias.ptr());
    const auto x = static_cast<std::size_t>(tokens[t]);
    for (std::size_t d = 0; d < D; ++d) grad.embedding[d * V + x] += de[d];
  }
  grad.for_each([](const std::string& name, const char*, ParamKind, const Tensor<T>& t) {
    check_finite(t.ptr(), t.size(), "gradient of " + name);
  });
  return loss;
}

template <class T>
ModelParams<T> backward(const ModelParams<T>& p, std::span<const TokenId> tokens, std::span<const TokenId> targets,
                        const ForwardConfig& cfg, T scale = T(1)) {
  ModelParams<T> grad(p.shape);
  loss_and_grad(p, tokens, targets, cfg, grad, scale);
  return grad;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-12});
}

// Central differences of `loss` at each coordinate, restoring every value.
struct FdErrors {
  double max_rel = 0.0;
  double max_abs = 0.0;
};

template <class T, class F>
FdErrors fd_errors(F&& loss, std::span<T* const> coords, std::span<const double> analytic, double h) {
  FdErrors worst;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    T* x = coords[i];
    const T saved = *x;
    *x = static_cast<T>(saved + h);
    const double up = static_cast<double>(loss());
    *x = static_cast<T>(saved - h);
    const double down = static_cast<double>(loss());
    *x = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst.max_rel = std::max(worst.max_rel, relative_error(analytic[i], numeric));
    worst.max_abs = std::max(worst.max_abs, std::abs(analytic[i] - numeric));
  }
  return worst;
}

template <class T, class F>
double max_relative_error(F&& loss, std::span<T* const> coords, std::span<const double> analytic, double h) {
  return fd_errors<T>(loss, coords, analytic, h).max_rel;
}

struct GroupError {
  std::string name;
  std::string symbol;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Samples up to `samples` coordinates per tensor. `grad` may be supplied to
// check a gradient other than the one backward computes.
template <class T>
std::vector<GroupError> finite_diff_check(ModelParams<T> p, std::span<const TokenId> tokens,
                                          std::span<const TokenId> targets, const ForwardConfig& cfg, double h,
                                          std::size_t samples, std::uint64_t seed = 0,
                                          const ModelParams<T>* grad = nullptr) {
  const ModelParams<T> own = grad ? ModelParams<T>(p.shape) : backward(p, tokens, targets, cfg);
  const ModelParams<T>& g = grad ? *grad : own;
  std::vector<const Tensor<T>*> grads;
  g.for_each([&](const std::string&, const char*, ParamKind, const Tensor<T>& t) { grads.push_back(&t); });

  auto loss = [&] { return cross_entropy_loss(forward(p, tokens, cfg), targets); };
  std::vector<GroupError> out;
  std::size_t idx = 0;
  Rng rng(derive_key(seed, "finite-diff"));
  p.for_each([&](const std::string& name, const char* symbol, ParamKind, Tensor<T>& t) {
    const Tensor<T>& gt = *grads[idx++];
    std::vector<T*> coords;
    std::vector<double> analytic;
    if (t.size() <= samples) {
      for (std::size_t i = 0; i < t.size(); ++i) coords.push_back(&t[i]);
    } else {
      for (std::size_t k = 0; k < samples; ++k) coords.push_back(&t[rng.below(t.size())]);
    }
    for (T* c : coords) analytic.push_back(static_cast<double>(gt[static_cast<std::size_t>(c - t.ptr())]));
    const auto e = fd_errors<T>(loss, std::span<T* const>(coords), analytic, h);
    out.push_back({name, symbol, e.max_rel, e.max_abs, coords.size()});
  });
  return out;
}

}  // namespace finforge::model
