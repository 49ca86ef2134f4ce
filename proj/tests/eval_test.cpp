#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "finforge/eval.hpp"
#include "test_util.hpp"

namespace md = finforge::model;
namespace sc = finforge::scaling;
namespace ev = finforge::eval;
namespace tk = finforge::tokenizer;
using md::TokenId;
using Ids = std::vector<TokenId>;

namespace {

const sc::ModelShape kToy = sc::ModelShape::make(2, 2, 4, 4);

md::ModelParams<double> toy_model(std::uint64_t seed) {
  auto p = md::init_params(kToy, seed);
  // Larger weights make the toy distributions far from uniform.
  p.for_each([](const std::string&, const char*, md::ParamKind kind, md::Tensor<double>& t) {
    if (kind == md::ParamKind::Weight)
      for (auto& v : t.data) v *= 8.0;
  });
  return p;
}

// log p(next | prefix) straight from the logits of the full prefix.
double next_logprob(const md::ModelParams<double>& p, const Ids& prefix, TokenId next) {
  const auto logits = md::forward(p, std::span<const TokenId>(prefix), {});
  const std::size_t V = logits.shape[1];
  std::vector<double> lp(V);
  md::log_softmax(logits.ptr() + (prefix.size() - 1) * V, V, lp.data());
  return lp[static_cast<std::size_t>(next)];
}

// Joint probabilities of every length-T continuation of `context`.
std::map<Ids, double> enumerate_joint(const md::ModelParams<double>& p, const Ids& context, std::size_t T) {
  const auto V = static_cast<TokenId>(p.shape.vocab);
  std::map<Ids, double> out;
  Ids cont(T, 0);
  while (true) {
    double lp = 0;
    Ids prefix = context;
    for (auto t : cont) {
      lp += next_logprob(p, prefix, t);
      prefix.push_back(t);
    }
    out[cont] = std::exp(lp);
    std::size_t k = 0;
    while (k < T && ++cont[k] == V) cont[k++] = 0;
    if (k == T) break;
  }
  return out;
}

// p(a | context) by summing the joint over completions of a.
double marginal(const std::map<Ids, double>& joint, const Ids& a) {
  double s = 0;
  for (const auto& [seq, pr] : joint)
    if (std::equal(a.begin(), a.end(), seq.begin())) s += pr;
  return s;
}

tk::TokenizerModel small_tokenizer() {
  const auto text = finforge::testing::synthetic_text(5, 400);
  return tk::finalize(tk::train_chunk_unigram(text, 300));
}

// Model whose next-token distribution is dominated by `favored` tokens,
// whatever the input.
md::ModelParams<double> peaked_model(std::int64_t V, std::vector<TokenId> favored) {
  md::ModelParams<double> p(sc::ModelShape::make(1, 2, 2, V));
  const std::size_t D = 4;
  p.ln_f_gain.fill(0.0);
  for (std::size_t d = 0; d < D; ++d) p.ln_f_bias[d] = 1.0;
  p.ln_em_gain.fill(1.0);
  for (auto& l : p.layers) {
    l.ln_in_gain.fill(1.0);
    l.ln_at_gain.fill(1.0);
  }
  for (auto k : favored)
    for (std::size_t d = 0; d < D; ++d) p.embedding[d * static_cast<std::size_t>(V) + static_cast<std::size_t>(k)] = 10.0;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(SequenceLogprob, DegenerateVocabulary) {
  const auto p = md::init_params(sc::ModelShape::make(1, 2, 2, 1), 1);
  const Ids c{0, 0}, a{0, 0, 0};
  EXPECT_EQ(ev::sequence_logprob(p, std::span<const TokenId>(c), std::span<const TokenId>(a)), 0.0);
}

TEST(SequenceLogprob, ChainRuleAdditivity) {
  const auto p = toy_model(2);
  finforge::Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Ids c(1 + rng.below(5)), a(1 + rng.below(4)), b(1 + rng.below(4));
    for (auto* v : {&c, &a, &b})
      for (auto& t : *v) t = static_cast<TokenId>(rng.below(4));
    Ids ab = a, ca = c;
    ab.insert(ab.end(), b.begin(), b.end());
    ca.insert(ca.end(), a.begin(), a.end());
    const double whole = ev::sequence_logprob(p, std::span<const TokenId>(c), std::span<const TokenId>(ab));
    const double parts = ev::sequence_logprob(p, std::span<const TokenId>(c), std::span<const TokenId>(a)) +
                         ev::sequence_logprob(p, std::span<const TokenId>(ca), std::span<const TokenId>(b));
    EXPECT_NEAR(whole, parts, 1e-10);
  }
}

TEST(SequenceLogprob, MatchesEnumeratedDistribution) {
  const auto p = toy_model(4);
  const Ids ctx{2};
  const auto joint = enumerate_joint(p, ctx, 3);
  ASSERT_EQ(joint.size(), 64u);
  double total = 0;
  for (const auto& [seq, pr] : joint) total += pr;
  EXPECT_NEAR(total, 1.0, 1e-12);
  for (const Ids& a : {Ids{0}, Ids{3}, Ids{1, 2}, Ids{3, 3}, Ids{0, 1, 2}, Ids{2, 2, 2}}) {
    const double lp = ev::sequence_logprob(p, std::span<const TokenId>(ctx), std::span<const TokenId>(a));
    EXPECT_NEAR(std::exp(lp), marginal(joint, a), 1e-12);
  }
}

TEST(SequenceLogprob, Errors) {
  const auto p = toy_model(1);
  const Ids c{1}, empty;
  EXPECT_THROW(ev::sequence_logprob(p, std::span<const TokenId>(c), std::span<const TokenId>(empty)),
               finforge::UsageError);
  EXPECT_THROW(ev::sequence_logprob(p, std::span<const TokenId>(empty), std::span<const TokenId>(c)),
               finforge::UsageError);
}

TEST(SequenceLogprob, LengthLimitFallsBackToWindow) {
  const auto p = toy_model(6);
  const Ids c{0, 1, 2, 3, 0, 1}, a{2, 3, 1};
  const auto full = ev::sequence_logprob(p, std::span<const TokenId>(c), std::span<const TokenId>(a));
  EXPECT_EQ(ev::sequence_logprob(p, std::span<const TokenId>(c), std::span<const TokenId>(a), 8), full);
  // Limit 4, stride 2: the last three predictions see contexts starting at
  // 2, 4 and 4.
  Ids seq = c;
  seq.insert(seq.end(), a.begin(), a.end());
  const double oracle = next_logprob(p, Ids(seq.begin() + 2, seq.begin() + 6), seq[6]) +
                        next_logprob(p, Ids(seq.begin() + 4, seq.begin() + 7), seq[7]) +
                        next_logprob(p, Ids(seq.begin() + 4, seq.begin() + 8), seq[8]);
  EXPECT_NEAR(ev::sequence_logprob(p, std::span<const TokenId>(c), std::span<const TokenId>(a), 4), oracle, 1e-12);
}

// ---------------------------------------------------------------------------

TEST(BitsPerByte, UnitConversion) {
  EXPECT_DOUBLE_EQ(ev::bits_per_byte_from_nll(8 * std::numbers::ln2, 4), 2.0);
  EXPECT_THROW(ev::bits_per_byte_from_nll(1.0, 0), finforge::UsageError);
}

TEST(BitsPerByte, WindowStart) {
  EXPECT_EQ(ev::window_start(0, 8, 4), 0u);
  EXPECT_EQ(ev::window_start(7, 8, 4), 0u);
  EXPECT_EQ(ev::window_start(8, 8, 4), 4u);
  EXPECT_EQ(ev::window_start(11, 8, 4), 4u);
  EXPECT_EQ(ev::window_start(12, 8, 4), 8u);
}

TEST(BitsPerByte, SlidingScheduleMatchesEnumeration) {
  const auto p = toy_model(7);
  const std::size_t W = 8, S = 4;
  finforge::Rng rng(8);
  Ids doc(3000);
  for (auto& t : doc) t = static_cast<TokenId>(rng.below(4));
  Ids seq{0};
  seq.insert(seq.end(), doc.begin(), doc.end());

  // Hand-enumerated windows: [0, W) scores every prediction; window k >= 1
  // starts at kS and scores predictions kS+W-S .. kS+W-1.
  std::vector<std::size_t> start(doc.size(), SIZE_MAX);
  for (std::size_t i = 0; i < W; ++i) start[i] = 0;
  for (std::size_t a = S; a + W - S < doc.size(); a += S)
    for (std::size_t i = a + W - S; i < std::min(a + W, doc.size()); ++i) {
      ASSERT_EQ(start[i], SIZE_MAX);
      start[i] = a;
    }
  double oracle = 0;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    ASSERT_NE(start[i], SIZE_MAX) << i;
    const std::size_t context = i - start[i] + 1;
    ASSERT_LE(context, W);
    if (i >= W) {
      ASSERT_GE(context, W - S) << i;
    }
    EXPECT_EQ(ev::window_start(i, W, S), start[i]);
    oracle -= next_logprob(p, Ids(seq.begin() + static_cast<std::ptrdiff_t>(start[i]),
                                  seq.begin() + static_cast<std::ptrdiff_t>(i + 1)),
                           seq[i + 1]);
  }
  const double got = ev::document_nll(p, std::span<const TokenId>(doc), W, S);
  EXPECT_NEAR(got, oracle, 1e-9 * oracle);
  EXPECT_EQ(ev::windowed_logprobs(p, std::span<const TokenId>(seq), W, S).size(), doc.size());
}

TEST(BitsPerByte, ShortDocumentUsesFullContext) {
  const auto p = toy_model(9);
  const Ids doc{1, 2, 3, 0, 1, 2};
  double full = 0;
  Ids prefix{0};
  for (auto t : doc) {
    full -= next_logprob(p, prefix, t);
    prefix.push_back(t);
  }
  EXPECT_NEAR(ev::document_nll(p, std::span<const TokenId>(doc), 2048, 1024), full, 1e-12);
}

TEST(BitsPerByte, DocumentOrderInvariance) {
  const auto tok = small_tokenizer();
  const auto p = md::init_params(sc::ModelShape::make(1, 2, 4, static_cast<std::int64_t>(tok.size())), 3);
  const auto docs = finforge::testing::synthetic_docs(21, 4, 30);
  std::vector<std::string> rev(docs.rbegin(), docs.rend());
  const double a = ev::bits_per_byte(p, tok, std::span<const std::string>(docs), 16, 8);
  const double b = ev::bits_per_byte(p, tok, std::span<const std::string>(rev), 16, 8);
  EXPECT_NEAR(a, b, 1e-12);
  EXPECT_GT(a, 0.0);
  const std::vector<std::string> none;
  EXPECT_THROW(ev::bits_per_byte(p, tok, std::span<const std::string>(none)), finforge::UsageError);
}

// ---------------------------------------------------------------------------

TEST(Classify, WorkedCalibrationExample) {
  const std::vector<ev::CandidateScore> s{{std::log(0.2), std::log(0.4), 1}, {std::log(0.3), std::log(0.9), 1}};
  EXPECT_EQ(ev::choose(s, ev::Method::Regular), 1u);
  EXPECT_EQ(ev::choose(s, ev::Method::Calibration), 0u);
  EXPECT_EQ(ev::choose(s, ev::Method::Normalization), 1u);
}

TEST(Classify, NormalizationDividesProbability) {
  // 0.5/1 beats 0.36/2; per-token log-probability prefers the longer one.
  const std::vector<ev::CandidateScore> s{{std::log(0.5), 0, 1}, {std::log(0.36), 0, 2}};
  EXPECT_EQ(ev::choose(s, ev::Method::Normalization), 0u);
  EXPECT_EQ(ev::choose(s, ev::Method::Normalization, true), 1u);
}

TEST(Classify, SingleCandidateAndTies) {
  const std::vector<ev::CandidateScore> one{{-3.0, -1.0, 2}};
  const std::vector<ev::CandidateScore> tied{{-1.0, -1.0, 1}, {-1.0, -1.0, 1}, {-2.0, -5.0, 1}};
  for (auto m : ev::kMethods) {
    EXPECT_EQ(ev::choose(one, m), 0u);
    EXPECT_EQ(ev::choose(std::span(tied).first(2), m), 0u);
  }
  EXPECT_EQ(ev::choose(tied, ev::Method::Calibration), 2u);
}

TEST(Classify, MonotoneTransformInvariance) {
  finforge::Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ev::CandidateScore> s(2 + rng.below(4)), shifted;
    for (auto& c : s) c = {-5 * rng.uniform(), -5 * rng.uniform(), 1 + rng.below(5)};
    const double k = 3 * rng.normal();
    for (auto c : s) {
      c.logp += k;  // p -> e^k p
      c.logp_free += k;
      shifted.push_back(c);
    }
    for (auto m : ev::kMethods) EXPECT_EQ(ev::choose(s, m), ev::choose(shifted, m));
  }
}

TEST(Classify, AgreesWithEnumeratedFormulas) {
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    const auto p = toy_model(seed);
    const Ids ctx{0, 3, 1}, free_ctx{0, 2};
    const std::vector<Ids> cands{{1}, {2, 3}, {3, 0, 1}, {0, 0}};
    const auto joint = enumerate_joint(p, ctx, 3);
    const auto joint_free = enumerate_joint(p, free_ctx, 3);
    std::vector<ev::CandidateScore> scores;
    std::vector<double> pr, pr_free;
    for (const auto& a : cands) {
      scores.push_back({ev::sequence_logprob(p, std::span<const TokenId>(ctx), std::span<const TokenId>(a)),
                        ev::sequence_logprob(p, std::span<const TokenId>(free_ctx), std::span<const TokenId>(a)),
                        a.size()});
      pr.push_back(marginal(joint, a));
      pr_free.push_back(marginal(joint_free, a));
    }
    auto argmax = [](const std::vector<double>& v) {
      return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    };
    std::vector<double> cal, norm;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      cal.push_back(pr[i] / pr_free[i]);
      norm.push_back(pr[i] / static_cast<double>(cands[i].size()));
    }
    EXPECT_EQ(ev::choose(scores, ev::Method::Regular), argmax(pr)) << seed;
    EXPECT_EQ(ev::choose(scores, ev::Method::Calibration), argmax(cal)) << seed;
    EXPECT_EQ(ev::choose(scores, ev::Method::Normalization), argmax(norm)) << seed;
  }
}

TEST(Classify, EndToEndWithTokenizer) {
  const auto tok = small_tokenizer();
  const auto p = md::init_params(sc::ModelShape::make(1, 2, 4, static_cast<std::int64_t>(tok.size())), 4);
  ev::ClassificationTask task{"t0", "the market fell", {"negative"}, "negative", {}};
  for (auto m : ev::kMethods) EXPECT_EQ(ev::classify(p, tok, task, m), 0u);

  task.candidates = {"positive", "negative", "neutral"};
  const auto prompt = ev::render_prompt(task.context, task.shots);
  EXPECT_EQ(prompt, "the market fell\nAnswer:");
  const auto scores = ev::score_candidates(p, tok, prompt, task.candidates);
  const auto ctx = ev::with_bos(tok, prompt);
  const auto ids = tok.encode(" neutral");
  EXPECT_EQ(scores[2].tokens, ids.size());
  EXPECT_EQ(scores[2].logp, ev::sequence_logprob(p, std::span<const TokenId>(ctx), std::span<const TokenId>(ids)));
  for (auto m : ev::kMethods) EXPECT_EQ(ev::classify(p, tok, task, m), ev::choose(scores, m));

  task.candidates = {"a", "a"};
  EXPECT_THROW(ev::classify(p, tok, task, ev::Method::Regular), finforge::DataError);
}

TEST(Prompt, ShotsAndSampling) {
  const std::vector<ev::Shot> pool{{"q1", "yes"}, {"q2", "no"}, {"q3", "yes"}};
  EXPECT_EQ(ev::assemble_prompt("test", pool, 0, 1, 0), "test\nAnswer:");
  EXPECT_EQ(ev::assemble_prompt("test", pool, 2, 5, 7), ev::assemble_prompt("test", pool, 2, 5, 7));

  // Reference sampler: partial Fisher-Yates from a generator keyed by
  // (seed, example).
  for (std::uint64_t ex = 0; ex < 10; ++ex) {
    finforge::Rng rng(finforge::derive_key(5, {ex}));
    std::vector<std::size_t> idx{0, 1, 2};
    std::swap(idx[0], idx[rng.below(3)]);
    std::swap(idx[1], idx[1 + rng.below(2)]);
    const std::string expect = pool[idx[0]].context + "\nAnswer: " + pool[idx[0]].gold + "\n\n" +
                               pool[idx[1]].context + "\nAnswer: " + pool[idx[1]].gold + "\n\ntest\nAnswer:";
    EXPECT_EQ(ev::assemble_prompt("test", pool, 2, 5, ex), expect);
  }
  EXPECT_THROW(ev::assemble_prompt("test", pool, 4, 5, 0), finforge::UsageError);
}

// ---------------------------------------------------------------------------

TEST(Greedy, AllMassOnOneToken) {
  const auto p = peaked_model(6, {4});
  const Ids prompt{1, 2};
  EXPECT_EQ(ev::greedy_decode(p, std::span<const TokenId>(prompt), 5), (Ids{4, 4, 4, 4, 4}));
  EXPECT_TRUE(ev::greedy_decode(p, std::span<const TokenId>(prompt), 5, {4}).empty());
  EXPECT_THROW(ev::greedy_decode(p, std::span<const TokenId>(prompt), 0), finforge::UsageError);
}

TEST(Greedy, TiesGoToLowestIdAndEndOfTextStops) {
  EXPECT_EQ(ev::greedy_decode(peaked_model(6, {3, 2}), std::span<const TokenId>(Ids{1}), 3), (Ids{2, 2, 2}));
  EXPECT_TRUE(ev::greedy_decode(peaked_model(6, {0}), std::span<const TokenId>(Ids{1}), 3).empty());
}

TEST(Greedy, Deterministic) {
  const auto p = toy_model(11);
  const Ids prompt{1, 3};
  const auto a = ev::greedy_decode(p, std::span<const TokenId>(prompt), 20);
  EXPECT_EQ(a, ev::greedy_decode(p, std::span<const TokenId>(prompt), 20));
  for (std::size_t i = 0; i < a.size(); ++i) {
    Ids prefix = prompt;
    prefix.insert(prefix.end(), a.begin(), a.begin() + static_cast<std::ptrdiff_t>(i));
    const auto logits = md::forward(p, std::span<const TokenId>(prefix), {});
    const double* row = logits.ptr() + (prefix.size() - 1) * 4;
    for (TokenId v = 0; v < 4; ++v) EXPECT_LE(row[v], row[a[i]]);
  }
}

// ---------------------------------------------------------------------------

TEST(ExactMatch, Examples) {
  EXPECT_EQ(ev::exact_match("42.5", "42.5"), 1);
  EXPECT_EQ(ev::exact_match("42.5 ", "42.5"), 1);
  EXPECT_EQ(ev::exact_match("\tYes\n", "yes"), 1);
  EXPECT_EQ(ev::exact_match("1,024", "1024"), 0);
  EXPECT_EQ(ev::exact_match("1,024", "1024", {true, true, true}), 1);
  EXPECT_EQ(ev::exact_match("no", "yes"), 0);
}

TEST(WeightedF1, Examples) {
  const std::vector<std::string> g{"A", "B", "A", "B"};
  EXPECT_DOUBLE_EQ(ev::weighted_f1(g, g), 1.0);
  const std::vector<std::string> flipped{"B", "A", "B", "A"};
  EXPECT_DOUBLE_EQ(ev::weighted_f1(flipped, g), 0.0);

  // A: tp 2 fn 1 -> 0.8 (support 3); B: tp 1 fp 1 fn 1 -> 0.5 (2);
  // C: tp 1 fp 1 -> 2/3 (1).
  const std::vector<std::string> golds{"A", "A", "A", "B", "B", "C"};
  const std::vector<std::string> preds{"A", "A", "B", "B", "C", "C"};
  EXPECT_NEAR(ev::weighted_f1(preds, golds), (3 * 0.8 + 2 * 0.5 + 2.0 / 3.0) / 6.0, 1e-15);

  const std::vector<std::string> none;
  EXPECT_THROW(ev::weighted_f1(none, none), finforge::UsageError);
  const std::vector<std::string> labels{"A", "B"};
  EXPECT_THROW(ev::weighted_f1(preds, golds, labels), finforge::UsageError);
}

TEST(WinRate, Examples) {
  using Row = std::vector<std::optional<double>>;
  const auto dominant = ev::win_rate({Row{9, 9, 9}, Row{1, 2, 3}, Row{3, 2, 1}, Row{0, 0, 0}});
  EXPECT_EQ(dominant[0], 1.0);
  const auto same = ev::win_rate({Row{1, 2}, Row{1, 2}});
  EXPECT_EQ(same[0], 0.5);
  EXPECT_EQ(same[1], 0.5);
  const auto missing = ev::win_rate({Row{1, std::nullopt}, Row{2, 5}, Row{std::nullopt, 4}});
  EXPECT_EQ(missing[0], 0.0);
  EXPECT_EQ(missing[1], 1.0);
  EXPECT_EQ(missing[2], 0.0);
}

TEST(WinRate, FinancialTableColumns) {
  // Five tasks, four models; the first wins four tasks and is second on the
  // last one.
  using Row = std::vector<std::optional<double>>;
  const auto wr = ev::win_rate({Row{43.41, 75.07, 51.07, 82.20, 60.82}, Row{30.06, 50.59, 44.64, 73.22, 60.98},
                                Row{27.88, 51.60, 48.67, 79.41, 57.49}, Row{36.31, 53.12, 50.25, 76.51, 55.56}});
  EXPECT_DOUBLE_EQ(wr[0], 14.0 / 15.0);
  EXPECT_DOUBLE_EQ(wr[1], 4.0 / 15.0);
  EXPECT_DOUBLE_EQ(wr[2], 5.0 / 15.0);
  EXPECT_DOUBLE_EQ(wr[3], 7.0 / 15.0);
  const double reported[] = {0.93, 0.27, 0.33, 0.47};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(wr[i], reported[i], 0.005);
}

TEST(TaskFile, ParsesAndReportsBadRecords) {
  std::istringstream in(
      "{\"id\":\"a\",\"context\":\"c1\",\"candidates\":[\"x\",\"y\"],\"gold\":\"y\"}\n"
      "\n"
      "{\"context\":\"c2\",\"gold\":\"42\"}\n"
      "{\"context\":\"c3\"}\n"
      "not json\n"
      "{\"context\":\"c4\",\"candidates\":[\"x\",\"x\"]}\n"
      "{\"context\":\"c5\",\"candidates\":[\"x\"],\"gold\":\"z\"}\n");
  const auto f = ev::read_tasks(in);
  ASSERT_EQ(f.records.size(), 2u);
  EXPECT_EQ(f.records[0].id, "a");
  EXPECT_EQ(f.records[0].gold, "y");
  EXPECT_EQ(f.records[1].id, "1");
  EXPECT_TRUE(f.records[1].candidates.empty());
  ASSERT_EQ(f.errors.size(), 4u);
  EXPECT_EQ(f.errors[0].line, 4u);
  EXPECT_EQ(f.errors[1].line, 5u);
}
