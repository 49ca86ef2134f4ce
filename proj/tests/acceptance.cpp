// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "finforge/checkpoint.hpp"
#include "finforge/cli.hpp"
#include "finforge/eval.hpp"
#include "finforge/model.hpp"
#include "finforge/scaling.hpp"
#include "finforge/tokenizer.hpp"
#include "finforge/trainer.hpp"
#include "finforge/vocabselect.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
namespace md = finforge::model;
namespace sc = finforge::scaling;
namespace tk = finforge::tokenizer;
namespace tr = finforge::trainer;
namespace vs = finforge::vocabselect;
namespace ev = finforge::eval;
using md::TokenId;
using Ids = std::vector<TokenId>;

namespace {

struct Check {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    if (!(std::abs(got - want) <= tol)) {
      std::ostringstream os;
      os.precision(17);
      os << what << ": got " << got << ", want " << want << " +- " << tol;
      failures.push_back(os.str());
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string g17(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

void parameter_accounting(Check& c) {
  const auto t = sc::count_parameters(sc::ModelShape{70, 40, 7680, 192, 30720, 131072});
  auto total = [&](const char* name) { return t.row(name) ? t.row(name)->total() : -1; };
  c.expect(total("W_em") == 1'006'632'960, "W_em");
  for (auto name : {"gamma_em", "beta_em", "gamma_f", "beta_f"}) c.expect(total(name) == 7'680, name);
  for (auto name : {"W_q", "W_k", "W_v", "U"}) c.expect(total(name) == 4'128'768'000, name);
  for (auto name : {"b_q", "b_k", "b_v", "c", "gamma_in", "beta_in", "gamma_at", "beta_at", "c_f"})
    c.expect(total(name) == 537'600, name);
  c.expect(total("W_f") == 16'515'072'000, "W_f");
  c.expect(total("U_f") == 16'515'072'000, "U_f");
  c.expect(total("b_f") == 2'150'400, "b_f");
  std::int64_t sum = 0;
  for (const auto& r : t.rows) sum += r.total();
  c.expect(sum == t.grand_total, "rows sum to the grand total");
  c.expect(t.grand_total == 50'558'868'480, "grand total " + std::to_string(t.grand_total));
  c.note("total " + std::to_string(t.grand_total));
}

void scaling_fits(Check& c) {
  const double flops = 0.75 * 1.3e6 * 3600 * 1.02e14;
  const auto a1 = sc::chinchilla_predict(flops, sc::ChinchillaFit::approach1());
  const auto a2 = sc::chinchilla_predict(flops, sc::ChinchillaFit::approach2());
  c.near(a1.params / 52.993e9, 1, 0.02, "approach 1 params");
  c.near(a1.tokens / 1111.112e9, 1, 0.02, "approach 1 tokens");
  c.near(a2.params / 49.753e9, 1, 0.02, "approach 2 params");
  c.near(a2.tokens / 1175.766e9, 1, 0.02, "approach 2 tokens");
  const double w = sc::levine_width(70);
  c.expect(w >= 7508 && w <= 7512, "levine_width(70) = " + g17(w));
  c.note("A1 " + g17(a1.params) + "/" + g17(a1.tokens) + ", A2 " + g17(a2.params) + "/" + g17(a2.tokens) +
         ", width " + g17(w));
}

double sample_std(const std::vector<double>& x) {
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

void initialization(Check& c) {
  c.near(md::init_std(7680), 0.006588, 1e-6, "z(7680)");
  // 1000 x 1000 embedding: 10^6 draws
  const auto p = md::init_params(sc::ModelShape::make(2, 8, 125, 1000), 17);
  c.expect(p.embedding.size() == 1'000'000, "embedding holds 10^6 draws");
  const double r = sample_std(p.embedding.data) / md::init_std(1000);
  c.near(r, 1, 0.03, "embedding std ratio");
  std::vector<double> wo;
  for (const auto& l : p.layers) wo.insert(wo.end(), l.wo.data.begin(), l.wo.data.end());
  c.near(sample_std(wo) / md::init_std_output(1000, 2), 1, 0.03, "output projection std ratio");
  p.for_each([&](const std::string& name, const char*, md::ParamKind kind, const md::Tensor<double>& t) {
    for (double v : t.data) {
      if (kind == md::ParamKind::Gain && v != 1.0) c.expect(false, name + " gain not 1");
      if (kind == md::ParamKind::Bias && v != 0.0) c.expect(false, name + " bias not 0");
    }
  });
  c.note("std ratio " + g17(r));
}

void alibi(Check& c) {
  for (int n = 1; n <= 8; ++n) c.expect(md::alibi_slope(n, 8) == std::exp2(-n), "slope " + std::to_string(n) + "/8");
  c.near(md::alibi_slope(33, 40), std::exp2(-0.1), 1e-12, "slope 33/40");
  for (std::int64_t N : {8, 40}) {
    const std::size_t T = 7;
    const auto a = md::alibi_matrices(N, static_cast<std::int64_t>(T));
    for (std::size_t n = 0; n < static_cast<std::size_t>(N); ++n)
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j <= i; ++j)
          if (a.bias[n][i][j] != 0.0) c.expect(false, "A entry (" + std::to_string(i) + "," + std::to_string(j) + ") not 0");
  }

  const auto shape = sc::ModelShape::make(1, 4, 4, 32);
  const auto p = md::init_params(shape, 3);
  finforge::Rng rng(4);
  const std::size_t T = 9, D = 16;
  std::vector<double> x(T * D), out(T * D);
  for (auto& v : x) v = rng.normal();
  md::LayerCache<double> cache;
  md::attention_forward(p.layers[0], shape, 1, x.data(), T, md::ForwardConfig{}, out.data(), &cache);
  double worst = 0;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t q = 0; q < T; ++q) {
      const double* row = cache.probs.data() + (n * T + q) * T;
      double s = 0;
      for (std::size_t k = 0; k < T; ++k) {
        s += row[k];
        if (k > q && row[k] != 0.0) c.expect(false, "future key has weight");
      }
      worst = std::max(worst, std::abs(s - 1));
    }
  c.near(worst, 0, 1e-12, "attention weights sum to 1");
}

void gradients(Check& c) {
  const auto shape = sc::ModelShape::make(2, 4, 4, 64);  // D=16
  auto p = md::init_params(shape, 50);
  finforge::Rng rng(149);
  p.for_each([&](const std::string&, const char*, md::ParamKind kind, md::Tensor<double>& t) {
    if (kind != md::ParamKind::Weight)
      for (auto& v : t.data) v += 0.3 * rng.normal();
  });
  Ids toks(8), tgt(8);
  for (auto& t : toks) t = static_cast<TokenId>(rng.below(64));
  for (auto& t : tgt) t = static_cast<TokenId>(rng.below(64));
  const std::span<const TokenId> x(toks), y(tgt);
  double worst = 0, worst_sampled = 0;
  std::string worst_name;
  std::size_t coords = 0;
  for (double drop : {0.0, 0.1}) {
    md::ForwardConfig cfg;
    cfg.training = drop > 0;
    cfg.p_at = cfg.p_h = cfg.p_f = drop;
    cfg.rng_seed = 53;
    const auto g = md::backward(p, x, y, cfg);
    std::vector<const md::Tensor<double>*> grads;
    g.for_each([&](const std::string&, const char*, md::ParamKind, const md::Tensor<double>& t) { grads.push_back(&t); });
    auto loss = [&] { return md::cross_entropy_loss(md::forward(p, x, cfg), y); };

    // Every coordinate, fourth-order central difference. Gradients near 1e-7
    // are below what the two-point stencil resolves to 1e-5 relative.
    const double h = 1e-3;
    std::size_t k = 0;
    p.for_each([&](const std::string& name, const char* symbol, md::ParamKind, md::Tensor<double>& w) {
      const auto& gt = *grads[k++];
      double group = 0, abs_err = 0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double saved = w[i];
        auto f = [&](double d) {
          w[i] = saved + d;
          return loss();
        };
        const double numeric = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
        w[i] = saved;
        group = std::max(group, md::relative_error(gt[i], numeric));
        abs_err = std::max(abs_err, std::abs(gt[i] - numeric));
        ++coords;
      }
      const std::string where = name + " (dropout " + g17(drop) + ")";
      if (std::string(symbol) == "b_k") {
        // softmax cancels a per-query constant: the true gradient is zero
        for (double v : gt.data) c.expect(std::abs(v) <= 1e-15, where + " analytic gradient not zero");
        c.expect(abs_err < 1e-9, where + " abs error " + g17(abs_err));
        return;
      }
      c.expect(group < 1e-5, where + " rel error " + g17(group));
      if (group > worst) {
        worst = group;
        worst_name = name;
      }
    });

    for (const auto& r : md::finite_diff_check(p, x, y, cfg, 1e-5, 24, 7))
      if (r.symbol != "b_k") worst_sampled = std::max(worst_sampled, r.max_rel_error);
  }
  c.note(std::to_string(coords) + " coordinates, worst rel error " + g17(worst) + " in " + worst_name +
         "; two-point stencil on 24 sampled coordinates per tensor " + g17(worst_sampled));
}

void loss_sanity(Check& c) {
  const auto p = md::init_params(sc::ModelShape::make(2, 4, 4, 256), 11);
  finforge::Rng rng(12);
  double total = 0;
  for (int i = 0; i < 8; ++i) {
    Ids x(64), y(64);
    for (auto& t : x) t = static_cast<TokenId>(rng.below(256));
    for (auto& t : y) t = static_cast<TokenId>(rng.below(256));
    total += md::cross_entropy_loss(md::forward(p, std::span<const TokenId>(x), {}), std::span<const TokenId>(y));
  }
  c.near(total / 8 / std::log(256.0), 1, 0.05, "initial loss / ln V");

  Ids cycle;
  for (int k = 0; k < 4; ++k)
    for (TokenId t = 1; t <= 50; ++t) cycle.push_back(t);
  tr::TrainConfig cfg;
  cfg.max_lr = 3e-3;
  cfg.final_lr = 3e-4;
  cfg.warmup_steps = 10;
  cfg.horizon_steps = 200;
  cfg.seq_len = 32;
  cfg.batch_size = cfg.batch_size_after = 4;
  cfg.batch_warmup_steps = 0;
  cfg.seed = 7;
  cfg.val_every = 50;
  tr::Trainer<double> t(md::init_params(sc::ModelShape::make(2, 4, 8, 64), 1), cfg,
                        std::vector<Ids>(20, cycle));
  double first = 0;
  for (int s = 1; s <= 200; ++s) {
    const auto r = t.train_step();
    if (s == 1) first = r.smoothed_loss;
  }
  c.expect(t.smoothed() <= 0.5 * first, "smoothed loss " + g17(first) + " -> " + g17(t.smoothed()));
  c.note("initial loss " + g17(total / 8) + " vs ln V " + g17(std::log(256.0)) + "; smoothed " + g17(first) + " -> " +
         g17(t.smoothed()));
}

void enumerate(const std::string& w, std::size_t pos, const std::map<std::string, double>& lp, double acc,
               double& best) {
  if (pos == w.size()) {
    best = std::max(best, acc);
    return;
  }
  for (std::size_t len = 1; pos + len <= w.size(); ++len)
    if (auto it = lp.find(w.substr(pos, len)); it != lp.end()) enumerate(w, pos + len, lp, acc + it->second, best);
}

void tokenizer_properties(Check& c) {
  const auto docs = finforge::testing::synthetic_docs(1, 40, 80);
  const auto m = tk::finalize(tk::train_chunk_unigram(std::span<const std::string>(docs), 600));

  finforge::Rng rng(21);
  int bad = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto s = i % 2 ? finforge::testing::random_bytes(rng, 64) : finforge::testing::synthetic_text(rng.next_u64(), 12);
    bad += m.decode(m.encode(s)) != s;
  }
  c.expect(bad == 0, std::to_string(bad) + " round-trip failures");

  std::map<std::string, double> lp;
  for (std::size_t id = 1; id < m.size(); ++id)
    lp[m.token(static_cast<TokenId>(id))] = m.log_prob(static_cast<TokenId>(id));
  std::set<std::string> words;
  for (int d = 0; d < 20; ++d) {
    std::string fuzz = finforge::testing::synthetic_text(1000 + static_cast<std::uint64_t>(d), 60) +
                       finforge::testing::random_bytes(rng, 40);
    for (const auto& pt : tk::pretokenize(fuzz))
      if (pt.bytes.size() <= 12) words.insert(pt.bytes);
  }
  std::size_t mismatches = 0;
  for (const auto& w : words) {
    double best = -INFINITY, got = 0;
    enumerate(w, 0, lp, 0.0, best);
    for (auto id : m.encode(w)) got += m.log_prob(id);
    mismatches += !(std::abs(got - best) <= 1e-9);
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " of " + std::to_string(words.size()) + " Viterbi mismatches");

  double merge_err = 0;
  auto random_vocab = [&](int n) {
    tk::UnigramVocab v;
    for (int i = 0; i < n; ++i) v.entries[std::string(1 + rng.below(3), static_cast<char>('a' + rng.below(6)))] += 0.1 + rng.uniform();
    tk::renormalize(v);
    v.training_weight = 1.0 + static_cast<double>(rng.below(1000));
    return v;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_vocab(8), b = random_vocab(5), d = random_vocab(10);
    const auto ab_d = tk::merge_vocabs({tk::merge_vocabs({a, b}), d});
    const auto a_bd = tk::merge_vocabs({a, tk::merge_vocabs({b, d})});
    const auto dba = tk::merge_vocabs({d, b, a});
    c.expect(ab_d.size() == a_bd.size() && ab_d.size() == dba.size(), "merged vocabularies differ in size");
    for (const auto& [tok, pr] : ab_d.entries)
      merge_err = std::max({merge_err, std::abs(pr - a_bd.prob(tok)), std::abs(pr - dba.prob(tok))});
  }
  c.near(merge_err, 0, 1e-12, "merge associativity/commutativity");

  tk::PartitionedCorpus corpus(2);
  for (int k = 0; k < 2; ++k)
    for (int ch = 0; ch < 2; ++ch)
      corpus[static_cast<std::size_t>(k)].push_back(
          finforge::testing::synthetic_docs(static_cast<std::uint64_t>(100 + 10 * k + ch), 10 + 5 * static_cast<std::size_t>(ch), 30));
  tk::ParallelOptions opt;
  opt.chunk_vocab = 300;
  opt.final_vocab = 600;
  opt.threads = 2;
  const auto res = tk::train_parallel_detailed(corpus, opt);
  std::vector<tk::UnigramVocab> chunks;
  for (const auto& dom : corpus)
    for (const auto& ch : dom) chunks.push_back(tk::train_chunk_unigram(std::span<const std::string>(ch), 300));
  const auto flat = tk::merge_vocabs(std::span<const tk::UnigramVocab>(chunks));
  double par_err = 0;
  c.expect(flat.size() == res.merged.size(), "parallel merge size");
  for (const auto& [tok, pr] : flat.entries) par_err = std::max(par_err, std::abs(res.merged.prob(tok) - pr));
  c.near(par_err, 0, 1e-12, "2x2 parallel vs flat merge");

  const auto text = m.to_string();
  c.expect(tk::TokenizerModel::from_string(text).to_string() == text, "serialization round trip");
  c.note(std::to_string(words.size()) + " pretokens brute-forced; merge err " + g17(merge_err) + ", parallel err " +
         g17(par_err));
}

void vocab_heuristic(Check& c) {
  const auto docs = finforge::testing::synthetic_docs(11, 60, 300);
  const auto base = tk::train_chunk_unigram(std::span<const std::string>(docs), 2600);
  const std::vector<std::size_t> candidates{260, 512, 1024, 2048};
  const auto sel = vs::select_vocab_size(base, std::span<const std::string>(docs), candidates);

  std::size_t best = 0;
  double best_bits = INFINITY;
  std::ostringstream sweep;
  for (auto size : candidates) {
    const auto model = vs::tokenizer_for_size(base, size);
    c.expect(model.size() == size, "tokenizer for " + std::to_string(size) + " has " + std::to_string(model.size()) + " ids");
    std::uint64_t tokens = 0;
    for (const auto& d : docs) tokens += model.encode(d).size();
    const double bits = static_cast<double>(tokens) * std::log2(static_cast<double>(size));
    sweep << size << ":" << tokens << " ";
    if (bits < best_bits) {
      best_bits = bits;
      best = size;
    }
  }
  c.expect(sel.chosen_raw == best, "selected " + std::to_string(sel.chosen_raw) + ", brute force " + std::to_string(best));
  c.expect(vs::round_up_pow2(125000) == 131072, "round 125000");
  c.note("chosen " + std::to_string(sel.chosen_raw) + "; tokens " + sweep.str());
}

void schedules(Check& c) {
  const tr::TrainConfig cfg;
  c.expect(tr::lr_at(900, cfg) == 3e-5, "lr_at(900)");
  c.expect(tr::lr_at(1800, cfg) == 6e-5, "lr_at(1800)");
  c.expect(tr::lr_at(cfg.horizon(), cfg) == 6e-6, "lr_at(horizon)");
  c.expect(tr::batch_size_at(7200, cfg) == 1024, "batch_size_at(7200)");
  c.expect(tr::batch_size_at(7201, cfg) == 2048, "batch_size_at(7201)");

  const auto shape = sc::ModelShape::make(2, 4, 8, 64);
  auto p = md::init_params(shape, 3);
  const auto p0 = p;
  md::ModelParams<double> zero(shape);
  tr::AdamState<double> st(shape);
  const double lr = 6e-5;
  tr::adamw_step(p, zero, st, lr, cfg);
  std::vector<const md::Tensor<double>*> before;
  p0.for_each([&](const std::string&, const char*, md::ParamKind, const md::Tensor<double>& t) { before.push_back(&t); });
  std::size_t k = 0, wrong = 0;
  p.for_each([&](const std::string&, const char*, md::ParamKind kind, const md::Tensor<double>& t) {
    const auto& b = *before[k++];
    for (std::size_t i = 0; i < t.size(); ++i)
      wrong += kind == md::ParamKind::Weight ? t[i] != b[i] * (1.0 - lr * cfg.weight_decay) : t[i] != b[i];
  });
  c.expect(wrong == 0, std::to_string(wrong) + " coordinates off after a zero-gradient step");

  finforge::Rng rng(4);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    md::ModelParams<double> g(shape);
    g.for_each([&](const std::string&, const char*, md::ParamKind, md::Tensor<double>& t) {
      for (auto& v : t.data) v = rng.normal() * (trial % 2 ? 0.01 : 1.0);
    });
    tr::clip_gradients(g, 0.3);
    worst = std::max(worst, tr::global_norm(g) - 0.3);
  }
  c.expect(worst <= 1e-12, "clipped norm exceeds 0.3 by " + g17(worst));
}

md::ModelParams<double> toy_model(std::uint64_t seed) {
  auto p = md::init_params(sc::ModelShape::make(2, 2, 4, 4), seed);
  p.for_each([](const std::string&, const char*, md::ParamKind kind, md::Tensor<double>& t) {
    if (kind == md::ParamKind::Weight)
      for (auto& v : t.data) v *= 8.0;
  });
  return p;
}

double next_logprob(const md::ModelParams<double>& p, const Ids& prefix, TokenId next) {
  const auto logits = md::forward(p, std::span<const TokenId>(prefix), {});
  const std::size_t V = logits.shape[1];
  std::vector<double> lp(V);
  md::log_softmax(logits.ptr() + (prefix.size() - 1) * V, V, lp.data());
  return lp[static_cast<std::size_t>(next)];
}

// Marginal p(a | ctx) from the joint over every length-3 continuation.
double marginal(const md::ModelParams<double>& p, const Ids& ctx, const Ids& a) {
  const TokenId V = 4;
  double total = 0;
  Ids cont(3, 0);
  while (true) {
    if (std::equal(a.begin(), a.end(), cont.begin())) {
      double lp = 0;
      Ids prefix = ctx;
      for (auto t : cont) {
        lp += next_logprob(p, prefix, t);
        prefix.push_back(t);
      }
      total += std::exp(lp);
    }
    std::size_t k = 0;
    while (k < 3 && ++cont[k] == V) cont[k++] = 0;
    if (k == 3) break;
  }
  return total;
}

void evaluation(Check& c) {
  const std::vector<ev::CandidateScore> worked{{std::log(0.2), std::log(0.4), 1}, {std::log(0.3), std::log(0.9), 1}};
  c.expect(ev::choose(worked, ev::Method::Regular) == 1, "worked example: regular");
  c.expect(ev::choose(worked, ev::Method::Calibration) == 0, "worked example: calibration");

  auto argmax = [](const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  };
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    const auto p = toy_model(seed);
    const Ids ctx{0, 3, 1}, free_ctx{0, 2};
    const std::vector<Ids> cands{{1}, {2, 3}, {3, 0, 1}, {0, 0}};
    std::vector<ev::CandidateScore> scores;
    std::vector<double> reg, cal, norm;
    for (const auto& a : cands) {
      scores.push_back({ev::sequence_logprob(p, std::span<const TokenId>(ctx), std::span<const TokenId>(a)),
                        ev::sequence_logprob(p, std::span<const TokenId>(free_ctx), std::span<const TokenId>(a)),
                        a.size()});
      const double pr = marginal(p, ctx, a);
      reg.push_back(pr);
      cal.push_back(pr / marginal(p, free_ctx, a));
      norm.push_back(pr / static_cast<double>(a.size()));
    }
    const auto s = std::to_string(seed);
    c.expect(ev::choose(scores, ev::Method::Regular) == argmax(reg), "regular, seed " + s);
    c.expect(ev::choose(scores, ev::Method::Calibration) == argmax(cal), "calibration, seed " + s);
    c.expect(ev::choose(scores, ev::Method::Normalization) == argmax(norm), "normalization, seed " + s);
  }

  const auto p = toy_model(7);
  const std::size_t W = 8, S = 4;
  finforge::Rng rng(8);
  Ids doc(3000);
  for (auto& t : doc) t = static_cast<TokenId>(rng.below(4));
  Ids seq{0};
  seq.insert(seq.end(), doc.begin(), doc.end());
  // window [0, W) scores its whole span; a window at aS scores the last S
  std::vector<std::size_t> start(doc.size(), SIZE_MAX);
  for (std::size_t i = 0; i < W; ++i) start[i] = 0;
  for (std::size_t a = S; a + W - S < doc.size(); a += S)
    for (std::size_t i = a + W - S; i < std::min(a + W, doc.size()); ++i) start[i] = a;
  double oracle = 0;
  std::size_t short_context = 0, unscored = 0;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    if (start[i] == SIZE_MAX) {
      ++unscored;
      continue;
    }
    const std::size_t context = i - start[i] + 1;
    if (i >= W && context < W - S) ++short_context;
    oracle -= next_logprob(p, Ids(seq.begin() + static_cast<std::ptrdiff_t>(start[i]), seq.begin() + static_cast<std::ptrdiff_t>(i + 1)),
                           seq[i + 1]);
  }
  c.expect(unscored == 0, std::to_string(unscored) + " tokens never scored");
  c.expect(short_context == 0, std::to_string(short_context) + " tokens with less than W-S context");
  const double got = ev::document_nll(p, std::span<const TokenId>(doc), W, S);
  c.near(got, oracle, 1e-9 * oracle, "windowed nll vs enumeration");
  const double bpb = ev::bits_per_byte_from_nll(got, doc.size());
  c.near(bpb, oracle / std::numbers::ln2 / 3000.0, 1e-12, "bits per byte");
  c.note("bpb " + g17(bpb));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(std::vector<std::string> args, const fs::path& stdout_file) {
  args.insert(args.begin(), "finforge");
  std::ofstream out(stdout_file, std::ios::binary);
  std::ostringstream err;
  const int code = finforge::cli::run(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

void pipeline(const fs::path& dir, Check& c) {
  const fs::path data = fs::path(FINFORGE_SOURCE_DIR) / "data" / "smoke";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto run = [&](std::vector<std::string> args, const char* log) {
    c.expect(cli(std::move(args), dir / log) == 0, std::string(log) + " exited nonzero");
  };
  run({"train-tokenizer", "--corpus", (data / "train.jsonl").string(), "--chunks", "2", "--chunk-vocab", "600", "--vocab",
       "384", "--out", (dir / "tokenizer.txt").string()},
      "tokenizer.log");
  run({"plan"}, "plan.txt");
  run({"plan", "--layers", "2", "--heads", "2", "--head-dim", "16", "--vocab", "384"}, "plan_smoke.txt");
  std::ifstream conf(fs::path(FINFORGE_SOURCE_DIR) / "configs" / "smoke.conf");
  std::ostringstream text;
  for (std::string line; std::getline(conf, line);) {
    const auto key = finforge::config::trim(line.substr(0, line.find('=')));
    if (key == "tokenizer" || key == "train_corpus" || key == "val_corpus" || key == "out_dir") continue;
    text << line << '\n';
  }
  text << "tokenizer = tokenizer.txt\nout_dir = run\n"
       << "train_corpus = " << (data / "train.jsonl").string() << "\nval_corpus = " << (data / "val.jsonl").string() << '\n';
  std::ofstream(dir / "smoke.conf") << text.str();
  run({"train", (dir / "smoke.conf").string()}, "train.log");
  const auto ckpt = (dir / "run" / "ckpt-000200.bin").string();
  const std::vector<std::string> model{"--checkpoint", ckpt, "--tokenizer", (dir / "tokenizer.txt").string()};
  auto eval = [&](std::vector<std::string> head, std::vector<std::string> tail, const char* log) {
    head.insert(head.end(), model.begin(), model.end());
    head.insert(head.end(), tail.begin(), tail.end());
    run(std::move(head), log);
  };
  eval({"eval", "bpb"}, {"--docs", (data / "val.jsonl").string(), "--window", "64", "--stride", "32", "--out",
                         (dir / "bpb.csv").string()},
       "bpb.txt");
  eval({"eval", "classify"}, {"--tasks", (data / "sentiment.jsonl").string(), "--shots", "2", "--seed", "3", "--out",
                              (dir / "classify.csv").string()},
       "classify.txt");
  eval({"eval", "generate"}, {"--tasks", (data / "direction.jsonl").string(), "--shots", "1", "--max-new", "4", "--out",
                              (dir / "generate.csv").string()},
       "generate.txt");
}

void reproducibility(Check& c) {
  const auto root = fs::temp_directory_path() / ("finforge_acceptance_" + std::to_string(::getpid()));
  // same directory both times, so absolute paths in the outputs agree
  pipeline(root / "work", c);
  fs::rename(root / "work", root / "a");
  pipeline(root / "work", c);
  fs::rename(root / "work", root / "b");
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    const auto other = root / "b" / rel;
    c.expect(fs::exists(other) && slurp(e.path()) == slurp(other), rel.string() + " differs between runs");
    ++compared;
  }
  for (const char* f : {"tokenizer.txt", "run/ckpt-000100.bin", "run/ckpt-000200.bin", "bpb.csv", "classify.csv",
                        "generate.csv", "plan.txt", "run/config.resolved", "run/diagnostics.csv"})
    c.expect(fs::exists(root / "a" / f), std::string(f) + " missing");
  c.note(std::to_string(compared) + " files byte-identical");
  fs::remove_all(root);
}

struct Criterion {
  int id;
  const char* title;
  std::function<void(Check&)> run;
  double budget_seconds;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "parameter accounting", parameter_accounting, 1},
      {2, "scaling fits", scaling_fits, 1},
      {3, "initialization", initialization, 0},
      {4, "ALiBi", alibi, 0},
      {5, "gradient correctness", gradients, 120},
      {6, "loss sanity", loss_sanity, 300},
      {7, "tokenizer properties", tokenizer_properties, 0},
      {8, "vocabulary heuristic", vocab_heuristic, 0},
      {9, "schedules and optimizer", schedules, 0},
      {10, "evaluation methodology", evaluation, 0},
      {11, "reproducibility", reproducibility, 0},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cr.budget_seconds > 0 && secs > cr.budget_seconds)
      c.expect(false, "took " + g17(secs) + " s, budget " + g17(cr.budget_seconds) + " s");
    const bool ok = c.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << cr.id << ": " << cr.title << " (" << std::fixed
              << std::setprecision(2) << secs << " s)" << std::defaultfloat;
    for (const auto& n : c.notes) std::cout << "; " << n;
    std::cout << '\n';
    for (const auto& f : c.failures) std::cout << "    " << f << '\n';
    std::cout.flush();
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed\n";
  return failed ? 1 : 0;
}
