#pragma once

// Likelihood-based evaluation: candidate scoring and few-shot classification,
// sliding-window bits per byte, greedy decoding, exact match, support-weighted
// F1 and pairwise win rates.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "finforge/errors.hpp"
#include "finforge/model.hpp"
#include "finforge/rng.hpp"
#include "finforge/tokenizer.hpp"

namespace finforge::eval {

using model::ModelParams;
using model::TokenId;

inline constexpr TokenId kEndOfText = 0;

// ---------------------------------------------------------------------------
// Token scoring.

// log p(seq[i+1] | seq[0..i]) for i in [first, len-1), one forward pass.
template <class T>
std::vector<double> next_token_logprobs(const ModelParams<T>& p, std::span<const TokenId> seq, std::size_t first = 0) {
  std::vector<double> out;
  if (seq.size() < 2 || first + 1 >= seq.size()) return out;
  const auto logits = model::forward(p, seq.first(seq.size() - 1), model::ForwardConfig{});
  const std::size_t V = logits.shape.at(1);
  std::vector<T> lp(V);
  for (std::size_t i = first; i + 1 < seq.size(); ++i) {
    model::log_softmax(logits.ptr() + i * V, V, lp.data());
    out.push_back(static_cast<double>(lp[static_cast<std::size_t>(seq[i + 1])]));
  }
  return out;
}

// Start of the context window used for the prediction made at input
// position i (0-based) under a window/stride schedule.
inline std::size_t window_start(std::size_t i, std::size_t window, std::size_t stride) {
  if (i < window) return 0;
  return (i - window + 1 + stride - 1) / stride * stride;
}

inline void check_window(std::size_t window, std::size_t stride) {
  if (window < 1 || stride < 1 || stride > window) throw UsageError("sliding window needs 1 <= stride <= window");
}

// Log-probabilities of seq[1..] where each prediction sees at most `window`
// inputs. The first window scores everything it covers; later windows advance
// by `stride` and score only their final `stride` positions.
template <class T>
std::vector<double> windowed_logprobs(const ModelParams<T>& p, std::span<const TokenId> seq, std::size_t window,
                                      std::size_t stride) {
  check_window(window, stride);
  std::vector<double> out;
  if (seq.size() < 2) return out;
  const std::size_t n = seq.size() - 1;  // predictions
  const std::size_t first_end = std::min(window, n);
  out = next_token_logprobs(p, seq.first(first_end + 1));
  for (std::size_t a = stride; a + window - stride < n; a += stride) {
    const std::size_t end = std::min(a + window, n);
    const auto part = next_token_logprobs(p, seq.subspan(a, end - a + 1), window - stride);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// Sum of log p(continuation | context) in nats, dropout off. When the joint
// length exceeds `max_len` (0: unlimited), scoring falls back to a sliding
// window of max_len with stride max_len/2.
template <class T>
double sequence_logprob(const ModelParams<T>& p, std::span<const TokenId> context, std::span<const TokenId> continuation,
                        std::size_t max_len = 0) {
  if (continuation.empty()) throw UsageError("sequence_logprob: empty continuation");
  if (context.empty()) throw UsageError("sequence_logprob: context must hold at least one token");
  std::vector<TokenId> seq(context.begin(), context.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  std::vector<double> lp;
  if (max_len == 0 || seq.size() - 1 <= max_len) {
    lp = next_token_logprobs(p, std::span<const TokenId>(seq), context.size() - 1);
  } else {
    lp = windowed_logprobs(p, std::span<const TokenId>(seq), max_len, std::max<std::size_t>(1, max_len / 2));
    lp.erase(lp.begin(), lp.begin() + static_cast<std::ptrdiff_t>(context.size() - 1));
  }
  double s = 0;
  for (double v : lp) s += v;
  return s;
}

// Negative log-likelihood (nats) of a tokenized document, conditioned on a
// leading <|endoftext|>.
template <class T>
double document_nll(const ModelParams<T>& p, std::span<const TokenId> doc, std::size_t window, std::size_t stride) {
  std::vector<TokenId> seq{kEndOfText};
  seq.insert(seq.end(), doc.begin(), doc.end());
  double nll = 0;
  for (double v : windowed_logprobs(p, std::span<const TokenId>(seq), window, stride)) nll -= v;
  return nll;
}

inline double bits_per_byte_from_nll(double nats, std::size_t bytes) {
  if (bytes == 0) throw UsageError("bits per byte of zero bytes");
  return nats / std::numbers::ln2 / static_cast<double>(bytes);
}

template <class T>
double bits_per_byte(const ModelParams<T>& p, const tokenizer::TokenizerModel& tok, std::span<const std::string> docs,
                     std::size_t window = 2048, std::size_t stride = 1024) {
  if (docs.empty()) throw UsageError("bits_per_byte: no documents");
  check_window(window, stride);
  double nats = 0;
  std::size_t bytes = 0;
  for (const auto& d : docs) {
    const auto ids = tok.encode(d);
    nats += document_nll(p, std::span<const TokenId>(ids), window, stride);
    bytes += d.size();
  }
  return bits_per_byte_from_nll(nats, bytes);
}

// ---------------------------------------------------------------------------
// Classification.

enum class Method { Regular, Calibration, Normalization };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Regular: return "regular";
    case Method::Calibration: return "calibration";
    case Method::Normalization: return "normalization";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "regular") return Method::Regular;
  if (s == "calibration") return Method::Calibration;
  if (s == "normalization") return Method::Normalization;
  throw UsageError("unknown method '" + s + "'");
}

inline constexpr Method kMethods[] = {Method::Regular, Method::Calibration, Method::Normalization};

struct CandidateScore {
  double logp = 0;         // log p(a | s)
  double logp_free = 0;    // log p(a | "Answer:")
  std::size_t tokens = 0;  // sub-word tokens in a
};

// Log of the method's score. Normalization divides the probability by the
// token count; per_token_logprob switches to log p / len.
inline double method_score(const CandidateScore& c, Method m, bool per_token_logprob = false) {
  switch (m) {
    case Method::Regular: return c.logp;
    case Method::Calibration: return c.logp - c.logp_free;
    case Method::Normalization:
      if (c.tokens == 0) throw UsageError("normalization needs a non-empty candidate");
      return per_token_logprob ? c.logp / static_cast<double>(c.tokens)
                               : c.logp - std::log(static_cast<double>(c.tokens));
  }
  return 0;
}

// Index of the best candidate; ties go to the earliest.
inline std::size_t choose(std::span<const CandidateScore> scores, Method m, bool per_token_logprob = false) {
  if (scores.empty()) throw UsageError("choose: no candidates");
  std::size_t best = 0;
  double best_score = method_score(scores[0], m, per_token_logprob);
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const double s = method_score(scores[i], m, per_token_logprob);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

struct Shot {
  std::string context;
  std::string gold;
};

struct ClassificationTask {
  std::string id;
  std::string context;
  std::vector<std::string> candidates;
  std::string gold;  // empty when unlabeled
  std::vector<Shot> shots;

  void validate() const {
    if (candidates.empty()) throw DataError("task " + id + ": no candidates");
    std::set<std::string> seen(candidates.begin(), candidates.end());
    if (seen.size() != candidates.size()) throw DataError("task " + id + ": duplicate candidates");
  }
};

inline constexpr std::string_view kAnswerCue = "Answer:";

inline std::string render_prompt(const std::string& context, std::span<const Shot> shots) {
  std::string out;
  for (const auto& s : shots) out += s.context + "\n" + std::string(kAnswerCue) + " " + s.gold + "\n\n";
  out += context + "\n" + std::string(kAnswerCue);
  return out;
}

// k exemplars without replacement, keyed by (shot_seed, example index).
inline std::vector<std::size_t> sample_shot_indices(std::size_t pool, std::size_t k, std::uint64_t shot_seed,
                                                    std::uint64_t example_index) {
  if (k > pool) throw UsageError("shot pool of " + std::to_string(pool) + " is smaller than k=" + std::to_string(k));
  Rng rng(derive_key(shot_seed, {example_index}));
  std::vector<std::size_t> idx(pool);
  for (std::size_t i = 0; i < pool; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(pool - i)]);
  idx.resize(k);
  return idx;
}

inline std::string assemble_prompt(const std::string& context, std::span<const Shot> pool, std::size_t k,
                                   std::uint64_t shot_seed, std::uint64_t example_index) {
  std::vector<Shot> shots;
  for (auto i : sample_shot_indices(pool.size(), k, shot_seed, example_index)) shots.push_back(pool[i]);
  return render_prompt(context, shots);
}

inline std::vector<TokenId> with_bos(const tokenizer::TokenizerModel& tok, std::string_view text) {
  std::vector<TokenId> ids{kEndOfText};
  const auto body = tok.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

// Scores " " + candidate after the prompt and after the bare cue.
template <class T>
std::vector<CandidateScore> score_candidates(const ModelParams<T>& p, const tokenizer::TokenizerModel& tok,
                                             const std::string& prompt, std::span<const std::string> candidates,
                                             std::size_t max_len = 0) {
  const auto ctx = with_bos(tok, prompt);
  const auto free_ctx = with_bos(tok, kAnswerCue);
  std::vector<CandidateScore> out;
  for (const auto& c : candidates) {
    const auto ids = tok.encode(" " + c);
    CandidateScore s;
    s.logp = sequence_logprob(p, std::span<const TokenId>(ctx), std::span<const TokenId>(ids), max_len);
    s.logp_free = sequence_logprob(p, std::span<const TokenId>(free_ctx), std::span<const TokenId>(ids), max_len);
    s.tokens = ids.size();
    out.push_back(s);
  }
  return out;
}

template <class T>
std::size_t classify(const ModelParams<T>& p, const tokenizer::TokenizerModel& tok, const ClassificationTask& task,
                     Method m, std::size_t max_len = 0) {
  task.validate();
  const auto scores = score_candidates(p, tok, render_prompt(task.context, task.shots), task.candidates, max_len);
  return choose(scores, m);
}

// ---------------------------------------------------------------------------
// Generation and scoring.

// Appends argmax tokens (ties to the lowest id) until <|endoftext|>, a stop
// token, or max_new tokens. Stop tokens are not included in the output.
template <class T>
std::vector<TokenId> greedy_decode(const ModelParams<T>& p, std::span<const TokenId> prompt, std::size_t max_new,
                                   const std::set<TokenId>& stop = {}, std::size_t max_len = 0) {
  if (max_new < 1) throw UsageError("greedy_decode: max_new_tokens must be at least 1");
  if (prompt.empty()) throw UsageError("greedy_decode: empty prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  while (out.size() < max_new) {
    std::span<const TokenId> view(seq);
    if (max_len > 0 && view.size() > max_len) view = view.last(max_len);
    const auto logits = model::forward(p, view, model::ForwardConfig{});
    const std::size_t V = logits.shape.at(1);
    const T* row = logits.ptr() + (view.size() - 1) * V;
    const auto next = static_cast<TokenId>(std::max_element(row, row + V) - row);
    if (next == kEndOfText || stop.contains(next)) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

struct Normalizer {
  bool trim = true;
  bool casefold = true;
  bool strip_thousands = false;  // "1,024" -> "1024"

  std::string apply(std::string_view s) const {
    auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    if (trim) {
      while (!s.empty() && ws(s.front())) s.remove_prefix(1);
      while (!s.empty() && ws(s.back())) s.remove_suffix(1);
    }
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      char c = s[i];
      if (strip_thousands && c == ',' && i > 0 && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i - 1])) &&
          std::isdigit(static_cast<unsigned char>(s[i + 1])))
        continue;
      if (casefold && c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      out.push_back(c);
    }
    return out;
  }
};

inline int exact_match(std::string_view pred, std::string_view gold, const Normalizer& n = {}) {
  return n.apply(pred) == n.apply(gold) ? 1 : 0;
}

// Per-label F1 averaged with weights equal to each label's gold support.
inline double weighted_f1(std::span<const std::string> preds, std::span<const std::string> golds,
                          std::span<const std::string> labels = {}) {
  if (preds.size() != golds.size()) throw UsageError("weighted_f1: length mismatch");
  if (golds.empty()) throw UsageError("weighted_f1: empty input");
  std::set<std::string> label_set(labels.begin(), labels.end());
  if (label_set.empty()) {
    label_set.insert(golds.begin(), golds.end());
    label_set.insert(preds.begin(), preds.end());
  } else {
    for (std::size_t i = 0; i < golds.size(); ++i)
      if (!label_set.contains(golds[i]) || !label_set.contains(preds[i]))
        throw UsageError("weighted_f1: label outside the label set");
  }
  double total = 0;
  for (const auto& l : label_set) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < golds.size(); ++i) {
      const bool g = golds[i] == l, pr = preds[i] == l;
      tp += g && pr;
      fp += !g && pr;
      fn += g && !pr;
    }
    const std::size_t support = tp + fn;
    if (support == 0 || tp == 0) continue;
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    total += f1 * static_cast<double>(support);
  }
  return total / static_cast<double>(golds.size());
}

// scores[model][task]; missing entries are nullopt. A model with no
// comparisons gets NaN.
inline std::vector<double> win_rate(const std::vector<std::vector<std::optional<double>>>& scores) {
  if (scores.size() < 2) throw UsageError("win_rate: need at least two models");
  const std::size_t tasks = scores[0].size();
  if (tasks == 0) throw UsageError("win_rate: need at least one task");
  for (const auto& row : scores)
    if (row.size() != tasks) throw UsageError("win_rate: ragged score matrix");
  std::vector<double> out;
  for (std::size_t m = 0; m < scores.size(); ++m) {
    double wins = 0, comps = 0;
    for (std::size_t t = 0; t < tasks; ++t) {
      if (!scores[m][t]) continue;
      for (std::size_t o = 0; o < scores.size(); ++o) {
        if (o == m || !scores[o][t]) continue;
        comps += 1;
        if (*scores[m][t] > *scores[o][t]) wins += 1;
        else if (*scores[m][t] == *scores[o][t]) wins += 0.5;
      }
    }
    out.push_back(comps > 0 ? wins / comps : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task files: one JSON object per line with `context` and either
// `candidates` (+ optional `gold`) or `gold` alone. `id` is optional.

struct TaskRecord {
  std::string id;
  std::string context;
  std::vector<std::string> candidates;
  std::optional<std::string> gold;
  std::optional<std::string> shots_pool;
};

struct RecordError {
  std::size_t line;
  std::string message;
};

struct TaskFile {
  std::vector<TaskRecord> records;
  std::vector<RecordError> errors;
};

inline TaskFile read_tasks(std::istream& is) {
  TaskFile out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TaskRecord r;
      r.id = j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump())
                              : std::to_string(out.records.size());
      r.context = j.at("context").get<std::string>();
      if (j.contains("candidates")) r.candidates = j["candidates"].get<std::vector<std::string>>();
      if (j.contains("gold")) r.gold = j["gold"].get<std::string>();
      if (j.contains("shots_pool")) r.shots_pool = j["shots_pool"].get<std::string>();
      if (r.candidates.empty() && !r.gold) throw DataError("record needs `candidates` or `gold`");
      if (!r.candidates.empty()) {
        std::set<std::string> seen(r.candidates.begin(), r.candidates.end());
        if (seen.size() != r.candidates.size()) throw DataError("duplicate candidates");
        if (r.gold && !seen.contains(*r.gold)) throw DataError("gold is not one of the candidates");
      }
      out.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      out.errors.push_back({n, e.what()});
    } catch (const DataError& e) {
      out.errors.push_back({n, e.what()});
    }
  }
  return out;
}

}  // namespace finforge::eval
