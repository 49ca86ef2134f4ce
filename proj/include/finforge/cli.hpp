#pragma once

// Command-line surface: train-tokenizer, select-vocab, plan, train, eval.
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric. Data goes to `out`,
// diagnostics to `err`.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "finforge/checkpoint.hpp"
#include "finforge/config.hpp"
#include "finforge/corpus.hpp"
#include "finforge/errors.hpp"
#include "finforge/eval.hpp"
#include "finforge/model.hpp"
#include "finforge/scaling.hpp"
#include "finforge/tokenizer.hpp"
#include "finforge/trainer.hpp"
#include "finforge/vocabselect.hpp"

namespace finforge::cli {

namespace fs = std::filesystem;
using model::TokenId;

inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

// Worker count: the request (0 = hardware), capped by FINFORGE_THREADS.
inline unsigned worker_count(unsigned requested = 0) {
  unsigned n = requested > 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv("FINFORGE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(cap, &end, 10);
    if (end == cap || *end != '\0' || v < 1) throw UsageError("FINFORGE_THREADS must be a positive integer");
    n = std::min(n, static_cast<unsigned>(v));
  }
  return n;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string fmt(double v, int digits = 17) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline void write_text_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os || !(os << text)) throw DataError("cannot write " + p.string());
}

inline tokenizer::TokenizerModel load_tokenizer(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read tokenizer " + p.string());
  return tokenizer::TokenizerModel::load(in);
}

inline std::vector<std::vector<TokenId>> encode_docs(const tokenizer::TokenizerModel& tok,
                                                     const std::vector<std::string>& texts) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(tok.encode(t));
  return out;
}

// ---------------------------------------------------------------------------

struct TokenizerArgs {
  std::vector<std::string> corpora;  // one domain each
  std::size_t chunks = 1;
  std::size_t chunk_vocab = 65536;
  std::size_t vocab = 131072;
  std::size_t holdout_every = 10;
  std::size_t max_piece_len = 16;
  std::string out;
};

inline int cmd_train_tokenizer(const TokenizerArgs& a, std::ostream& out, std::ostream& err) {
  if (a.chunks < 1) throw UsageError("--chunks must be at least 1");
  tokenizer::PartitionedCorpus parts;
  std::vector<std::string> holdout, everything;
  std::size_t train_bytes = 0;
  for (const auto& path : a.corpora) {
    std::vector<std::string> train;
    const auto texts = corpus::read_texts(path);
    everything.insert(everything.end(), texts.begin(), texts.end());
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (a.holdout_every > 1 && texts.size() >= a.holdout_every && i % a.holdout_every == a.holdout_every - 1)
        holdout.push_back(texts[i]);
      else
        train.push_back(texts[i]);
    }
    if (train.size() < a.chunks)
      throw UsageError(path + ": " + std::to_string(train.size()) + " documents cannot fill " +
                       std::to_string(a.chunks) + " chunks");
    std::vector<std::vector<std::string>> chunks(a.chunks);
    for (std::size_t i = 0; i < train.size(); ++i) {
      train_bytes += train[i].size();
      chunks[i * a.chunks / train.size()].push_back(std::move(train[i]));
    }
    parts.push_back(std::move(chunks));
  }
  tokenizer::ParallelOptions opt;
  opt.chunk_vocab = a.chunk_vocab;
  opt.final_vocab = a.vocab;
  opt.threads = worker_count();
  opt.train.max_piece_len = a.max_piece_len;
  const auto tok = tokenizer::train_parallel(parts, opt);
  write_text_file(a.out, tok.to_string());

  const auto& measure = holdout.empty() ? everything : holdout;
  const auto tokens = vocabselect::count_tokens(tok, measure);
  const auto bytes = vocabselect::corpus_bytes(measure);
  out << "vocab_size," << tok.size() << '\n';
  out << "train_bytes," << train_bytes << '\n';
  out << "holdout_docs," << holdout.size() << '\n';
  out << "bytes_per_token," << fmt(tokens ? static_cast<double>(bytes) / static_cast<double>(tokens) : 0.0, 6)
      << '\n';
  err << "wrote tokenizer " << a.out << '\n';
  return 0;
}

struct SelectArgs {
  std::vector<std::string> corpora;
  std::vector<std::size_t> candidates;
  std::size_t base_vocab = 0;  // 0: largest candidate
  std::string out_tokenizer;
};

inline int cmd_select_vocab(const SelectArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<std::string> docs;
  for (const auto& p : a.corpora)
    for (auto& t : corpus::read_texts(p)) docs.push_back(std::move(t));
  if (a.candidates.empty()) throw UsageError("--candidates is empty");
  const std::size_t base_size = a.base_vocab ? a.base_vocab : *std::max_element(a.candidates.begin(), a.candidates.end());
  std::vector<tokenizer::ByteString> bytes(docs.begin(), docs.end());
  const auto base = tokenizer::train_chunk_unigram(std::span<const tokenizer::ByteString>(bytes), base_size);
  const auto sel = vocabselect::select_vocab_size(base, docs, a.candidates);
  out << "size,model_size,encoded_tokens,encoded_bits,bits_per_byte\n";
  for (const auto& c : sel.sweep)
    out << c.size << ',' << c.model_size << ',' << c.encoded_tokens << ',' << fmt(c.encoded_bits) << ','
        << fmt(c.bits_per_byte) << '\n';
  out << "chosen," << sel.chosen_raw << '\n' << "rounded," << sel.chosen_rounded << '\n';
  if (!a.out_tokenizer.empty()) {
    write_text_file(a.out_tokenizer, vocabselect::tokenizer_for_size(base, sel.chosen_raw).to_string());
    err << "wrote tokenizer " << a.out_tokenizer << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct PlanArgs {
  double gpu_hours = 1.3e6;
  double tflops = 102;
  double discount = 0.75;
  std::int64_t vocab = 131072;
  double target = 0;       // 0: Approach 1 parameter prediction
  double params_only = 0;  // skip the compute fits
  std::int64_t layers = 0, heads = 0, head_dim = 0;  // explicit shape
};

inline void print_table(const scaling::ParamTable& t, std::ostream& out) {
  std::size_t w = 0;
  for (const auto& r : t.rows) w = std::max(w, r.name.size());
  out << std::left << std::setw(10) << "group" << std::setw(static_cast<int>(w) + 2) << "name" << std::setw(12) << "shape"
      << std::right << std::setw(16) << "size" << std::setw(8) << "count" << std::setw(18) << "total" << '\n';
  for (const auto& r : t.rows)
    out << std::left << std::setw(10) << r.group << std::setw(static_cast<int>(w) + 2) << r.name << std::setw(12)
        << r.shape << std::right << std::setw(16) << r.size << std::setw(8) << r.instances << std::setw(18)
        << r.total() << '\n';
  out << std::left << std::setw(10) << "total" << std::right << std::setw(static_cast<int>(w) + 2 + 12 + 16 + 8 + 18)
      << t.grand_total << '\n';
  out << "\ngroup,name,shape,size,count,total\n";
  for (const auto& r : t.rows)
    out << r.group << ',' << r.name << ',' << r.shape << ',' << r.size << ',' << r.instances << ',' << r.total() << '\n';
  out << "total,,,,," << t.grand_total << '\n';
}

inline int cmd_plan(const PlanArgs& a, std::ostream& out) {
  scaling::ModelShape shape;
  const bool explicit_shape = a.layers > 0 || a.heads > 0 || a.head_dim > 0;
  if (explicit_shape) {
    if (a.layers < 0 || a.heads < 1 || a.head_dim < 1) throw UsageError("--layers, --heads and --head-dim go together");
    shape = scaling::ModelShape::make(a.layers, a.heads, a.head_dim, a.vocab);
  } else if (a.params_only > 0) {
    shape = scaling::propose_shape(a.params_only, a.vocab);
  } else {
    const scaling::ComputeBudget b{a.gpu_hours, a.tflops * 1e12, a.discount};
    const double flops = scaling::effective_flops(b);
    const auto p1 = scaling::chinchilla_predict(flops, scaling::ChinchillaFit::approach1());
    const auto p2 = scaling::chinchilla_predict(flops, scaling::ChinchillaFit::approach2());
    out << "effective_flops," << fmt(flops, 6) << '\n';
    out << "approach1_params," << fmt(p1.params, 6) << '\n' << "approach1_tokens," << fmt(p1.tokens, 6) << '\n';
    out << "approach2_params," << fmt(p2.params, 6) << '\n' << "approach2_tokens," << fmt(p2.tokens, 6) << '\n';
    const double target = a.target > 0 ? a.target : p1.params;
    out << "target_params," << fmt(target, 6) << '\n';
    out << "levine_width_at_70," << fmt(scaling::levine_width(70), 6) << '\n';
    shape = scaling::propose_shape(target, a.vocab);
  }
  out << "shape," << shape << '\n';
  out << "layers," << shape.layers << "\nheads," << shape.heads << "\nhidden," << shape.hidden << "\nhead_dim,"
      << shape.head_dim << "\nffn," << shape.ffn << "\nvocab," << shape.vocab << "\n\n";
  print_table(scaling::count_parameters(shape), out);
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string resume;
  std::vector<std::string> overrides;
  bool reshuffle = false;
  std::uint64_t reshuffle_seed = 0;
  bool reshuffle_seed_set = false;
};

inline std::vector<std::pair<std::string, std::string>> split_overrides(const std::vector<std::string>& raw) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& o : raw) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--override expects key=value, got '" + o + "'");
    out.emplace_back(config::trim(std::string_view(o).substr(0, eq)), config::trim(std::string_view(o).substr(eq + 1)));
  }
  return out;
}

inline std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt-%06lld.bin", static_cast<long long>(step));
  return buf;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  auto cfg = config::load_config(a.config);
  const auto overrides = split_overrides(a.overrides);
  if (a.resume.empty())
    for (const auto& [k, v] : overrides)
      if (!config::apply_run_setting(cfg, k, v)) throw UsageError("unknown override key '" + k + "'");
  cfg.train.validate();
  if (cfg.tokenizer.empty() || cfg.train_corpus.empty()) throw UsageError("config needs tokenizer and train_corpus");

  const auto tok = load_tokenizer(cfg.tokenizer);
  auto train_docs = encode_docs(tok, corpus::read_texts(cfg.train_corpus));
  std::vector<std::vector<TokenId>> val_docs;
  if (!cfg.val_corpus.empty()) val_docs = encode_docs(tok, corpus::read_texts(cfg.val_corpus));
  const auto shape = cfg.shape(static_cast<std::int64_t>(tok.size()));

  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  std::ofstream diag;
  const auto diag_path = dir / "diagnostics.csv";

  std::optional<trainer::Trainer<double>> tr;
  if (a.resume.empty()) {
    write_text_file(dir / "config.resolved", config::resolved_text(cfg));
    diag.open(diag_path, std::ios::binary | std::ios::trunc);
    diag << "step,kind,name,value\n";
    tr.emplace(model::init_params(shape, cfg.train.seed), cfg.train, std::move(train_docs), std::move(val_docs));
    tr->diagnostics.set_sink(&diag);
  } else {
    diag.open(diag_path, std::ios::binary | std::ios::app);
    const auto ck = checkpoint::load_file<double>(a.resume);
    const std::uint64_t seed =
        a.reshuffle_seed_set ? a.reshuffle_seed : derive_key(ck.config.seed, {static_cast<std::uint64_t>(ck.state.step)});
    tr.emplace(checkpoint::resume_with_overrides(ck, std::move(train_docs), std::move(val_docs), overrides, a.reshuffle,
                                                 seed, &shape, &diag));
    err << "resumed from " << a.resume << " at step " << tr->step() << '\n';
  }
  if (!diag) throw DataError("cannot write " + diag_path.string());
  tr->threads = worker_count(cfg.threads);
  cfg.train = tr->config();
  err << "# resolved config\n" << config::resolved_text(cfg);

  const auto& tc = tr->config();
  const std::int64_t total = tc.total_steps > 0 ? tc.total_steps : tc.horizon();
  std::int64_t saved = -1;
  auto save = [&] {
    const auto path = dir / checkpoint_name(tr->step());
    checkpoint::save_file(path.string(), checkpoint::snapshot(*tr));
    saved = tr->step();
    err << "wrote " << path.string() << '\n';
  };
  while (tr->step() < total) {
    const auto r = tr->train_step();
    if (r.step % tc.log_every == 0)
      out << "step " << r.step << " loss " << fmt(r.loss, 6) << " smoothed " << fmt(r.smoothed_loss, 6) << " lr "
          << fmt(r.lr, 6) << " grad_norm " << fmt(r.grad_norm, 6) << '\n';
    if (tc.checkpoint_every > 0 && r.step % tc.checkpoint_every == 0) save();
  }
  if (saved != tr->step()) save();
  if (tr->step() > 0) out << "final_smoothed_loss," << fmt(tr->smoothed(), 17) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string tokenizer;
  std::string docs;
  std::string tasks;
  std::string out;
  std::size_t window = 2048;
  std::size_t stride = 1024;
  std::string method = "all";
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  bool per_token_norm = false;
  std::size_t max_new = 32;
  std::vector<std::string> stop{"\n"};
};

struct LoadedModel {
  model::ModelParams<double> params;
  tokenizer::TokenizerModel tok;
};

inline LoadedModel load_model(const EvalArgs& a) {
  auto ck = checkpoint::load_file<double>(a.checkpoint);
  auto tok = load_tokenizer(a.tokenizer);
  if (static_cast<std::int64_t>(tok.size()) != ck.params.shape.vocab)
    throw DataError("tokenizer has " + std::to_string(tok.size()) + " ids but the model vocabulary is " +
                    std::to_string(ck.params.shape.vocab));
  return {std::move(ck.params), std::move(tok)};
}

inline std::ostream& results_stream(const EvalArgs& a, std::ofstream& file, std::ostream& fallback) {
  if (a.out.empty()) return fallback;
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  file.open(a.out, std::ios::binary | std::ios::trunc);
  if (!file) throw DataError("cannot write " + a.out);
  return file;
}

inline int cmd_eval_bpb(const EvalArgs& a, std::ostream& out) {
  const auto m = load_model(a);
  const auto docs = corpus::read_texts(a.docs);
  std::ofstream file;
  auto& res = results_stream(a, file, out);
  res << "doc_index,bytes,nll_bits\n";
  double nats = 0;
  std::size_t bytes = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto ids = m.tok.encode(docs[i]);
    const double n = eval::document_nll(m.params, std::span<const TokenId>(ids), a.window, a.stride);
    nats += n;
    bytes += docs[i].size();
    res << i << ',' << docs[i].size() << ',' << fmt(n / std::numbers::ln2) << '\n';
  }
  out << "bits_per_byte," << fmt(eval::bits_per_byte_from_nll(nats, bytes)) << '\n';
  return 0;
}

struct LoadedTasks {
  std::vector<eval::TaskRecord> records;
  std::map<std::string, std::vector<eval::Shot>> pools;
  bool had_errors = false;
};

inline LoadedTasks load_tasks(const std::string& path, std::ostream& err) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read tasks " + path);
  auto f = eval::read_tasks(in);
  LoadedTasks t;
  t.had_errors = !f.errors.empty();
  for (const auto& e : f.errors) err << path << ':' << e.line << ": " << e.message << '\n';
  t.records = std::move(f.records);
  const auto base = fs::path(path).parent_path();
  for (const auto& r : t.records) {
    if (!r.shots_pool || t.pools.contains(*r.shots_pool)) continue;
    const auto pool_path = (base / *r.shots_pool).string();
    std::ifstream pin(pool_path, std::ios::binary);
    if (!pin) throw DataError("cannot read shots pool " + pool_path);
    auto pf = eval::read_tasks(pin);
    for (const auto& e : pf.errors) err << pool_path << ':' << e.line << ": " << e.message << '\n';
    t.had_errors = t.had_errors || !pf.errors.empty();
    auto& pool = t.pools[*r.shots_pool];
    for (const auto& pr : pf.records)
      if (pr.gold) pool.push_back({pr.context, *pr.gold});
  }
  return t;
}

// Exemplars for record i: its shots_pool file, or the other labeled records.
inline std::vector<eval::Shot> pool_for(const LoadedTasks& t, std::size_t i) {
  const auto& r = t.records[i];
  if (r.shots_pool) return t.pools.at(*r.shots_pool);
  std::vector<eval::Shot> pool;
  for (std::size_t j = 0; j < t.records.size(); ++j)
    if (j != i && t.records[j].gold) pool.push_back({t.records[j].context, *t.records[j].gold});
  return pool;
}

inline int cmd_eval_classify(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const auto m = load_model(a);
  const auto tasks = load_tasks(a.tasks, err);
  std::vector<eval::Method> methods;
  if (a.method == "all")
    methods.assign(std::begin(eval::kMethods), std::end(eval::kMethods));
  else
    methods.push_back(eval::parse_method(a.method));

  std::ofstream file;
  auto& res = results_stream(a, file, out);
  res << "example_id,method,chosen,correct\n";
  std::vector<std::size_t> right(methods.size(), 0);
  std::size_t labeled = 0;
  bool bad = tasks.had_errors;
  for (std::size_t i = 0; i < tasks.records.size(); ++i) {
    const auto& r = tasks.records[i];
    if (r.candidates.empty()) {
      err << a.tasks << ": record " << r.id << " has no candidates\n";
      bad = true;
      continue;
    }
    const auto pool = pool_for(tasks, i);
    const auto prompt = eval::assemble_prompt(r.context, pool, a.shots, a.seed, i);
    const auto scores = eval::score_candidates(m.params, m.tok, prompt, r.candidates);
    labeled += r.gold.has_value();
    for (std::size_t k = 0; k < methods.size(); ++k) {
      const auto& chosen = r.candidates[eval::choose(scores, methods[k], a.per_token_norm)];
      const bool ok = r.gold && chosen == *r.gold;
      right[k] += ok;
      res << csv_field(r.id) << ',' << eval::to_string(methods[k]) << ',' << csv_field(chosen) << ','
          << (r.gold ? (ok ? "1" : "0") : "") << '\n';
    }
  }
  out << "method,accuracy\n";
  std::size_t best = 0;
  for (std::size_t k = 0; k < methods.size(); ++k) {
    const double acc = labeled ? static_cast<double>(right[k]) / static_cast<double>(labeled) : 0.0;
    out << eval::to_string(methods[k]) << ',' << fmt(acc) << '\n';
    if (right[k] > right[best]) best = k;
  }
  out << "best," << eval::to_string(methods[best]) << '\n';
  return bad ? kExitData : 0;
}

inline int cmd_eval_generate(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  const auto m = load_model(a);
  const auto tasks = load_tasks(a.tasks, err);
  std::set<TokenId> stop;
  for (const auto& s : a.stop) {
    std::string bytes = s;
    if (bytes == "\\n") bytes = "\n";
    if (const auto id = m.tok.id_of(bytes)) stop.insert(*id);
  }
  std::ofstream file;
  auto& res = results_stream(a, file, out);
  res << "example_id,method,chosen,correct\n";
  std::size_t right = 0, labeled = 0;
  for (std::size_t i = 0; i < tasks.records.size(); ++i) {
    const auto& r = tasks.records[i];
    const auto pool = pool_for(tasks, i);
    const auto prompt = eval::with_bos(m.tok, eval::assemble_prompt(r.context, pool, a.shots, a.seed, i));
    const auto ids = eval::greedy_decode(m.params, std::span<const TokenId>(prompt), a.max_new, stop);
    const auto text = m.tok.decode(ids);
    const int ok = r.gold ? eval::exact_match(text, *r.gold) : 0;
    right += static_cast<std::size_t>(ok);
    labeled += r.gold.has_value();
    res << csv_field(r.id) << ",greedy," << csv_field(text) << ',' << (r.gold ? std::to_string(ok) : "") << '\n';
  }
  out << "exact_match," << fmt(labeled ? static_cast<double>(right) / static_cast<double>(labeled) : 0.0) << '\n';
  return tasks.had_errors ? kExitData : 0;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"finforge: tokenizer, scaling, training and evaluation toolkit"};
  app.name(args.empty() ? "finforge" : args.front());
  app.require_subcommand(1);

  TokenizerArgs tka;
  auto* tk = app.add_subcommand("train-tokenizer", "train a Unigram tokenizer by split and merge");
  tk->add_option("--corpus", tka.corpora, "corpus path per domain (repeatable)")->required();
  tk->add_option("--chunks", tka.chunks, "chunks per domain");
  tk->add_option("--chunk-vocab", tka.chunk_vocab, "vocabulary size per chunk");
  tk->add_option("--vocab", tka.vocab, "final vocabulary size, <|endoftext|> included");
  tk->add_option("--holdout-every", tka.holdout_every, "hold out every n-th document for the summary (0: none)");
  tk->add_option("--max-piece-len", tka.max_piece_len, "longest token in bytes");
  tk->add_option("--out", tka.out, "tokenizer file")->required();

  SelectArgs sa;
  auto* sv = app.add_subcommand("select-vocab", "pick the vocabulary size with the smallest encoded corpus");
  sv->add_option("--corpus", sa.corpora, "corpus path (repeatable)")->required();
  sv->add_option("--candidates", sa.candidates, "candidate sizes, increasing")->delimiter(',')->required();
  sv->add_option("--base-vocab", sa.base_vocab, "size of the vocabulary the candidates are carved from");
  sv->add_option("--out-tokenizer", sa.out_tokenizer, "write the chosen tokenizer here");

  PlanArgs pa;
  auto* pl = app.add_subcommand("plan", "compute budget to model shape and parameter table");
  pl->add_option("--gpu-hours", pa.gpu_hours);
  pl->add_option("--tflops", pa.tflops, "sustained TFLOP/s per GPU");
  pl->add_option("--discount", pa.discount, "fraction of compute left after activation checkpointing");
  pl->add_option("--vocab", pa.vocab);
  pl->add_option("--target", pa.target, "parameter target for the shape search");
  pl->add_option("--params-only", pa.params_only, "skip the fits; propose a shape for this many parameters");
  pl->add_option("--layers", pa.layers);
  pl->add_option("--heads", pa.heads);
  pl->add_option("--head-dim", pa.head_dim);

  TrainArgs ta;
  auto* trc = app.add_subcommand("train", "train a model from a config file");
  trc->add_option("config", ta.config, "config file")->required();
  trc->add_option("--resume", ta.resume, "checkpoint to continue from");
  trc->add_option("--override", ta.overrides, "key=value, applied after loading (repeatable)");
  trc->add_flag("--reshuffle", ta.reshuffle, "re-permute documents not yet seen this epoch");
  auto* rs = trc->add_option("--reshuffle-seed", ta.reshuffle_seed);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->require_subcommand(1);
  auto common = [&](CLI::App* c) {
    c->add_option("--checkpoint", ea.checkpoint)->required();
    c->add_option("--tokenizer", ea.tokenizer)->required();
    c->add_option("--out", ea.out, "results file (default stdout)");
  };
  auto* bpb = ev->add_subcommand("bpb", "sliding-window bits per byte");
  common(bpb);
  bpb->add_option("--docs", ea.docs)->required();
  bpb->add_option("--window", ea.window);
  bpb->add_option("--stride", ea.stride);
  auto* cls = ev->add_subcommand("classify", "likelihood-based few-shot classification");
  common(cls);
  cls->add_option("--tasks", ea.tasks)->required();
  cls->add_option("--method", ea.method)->check(CLI::IsMember({"regular", "calibration", "normalization", "all"}));
  cls->add_option("--shots", ea.shots);
  cls->add_option("--seed", ea.seed);
  cls->add_flag("--per-token-norm", ea.per_token_norm, "normalize by per-token log-probability");
  auto* gen = ev->add_subcommand("generate", "greedy decoding scored by exact match");
  common(gen);
  gen->add_option("--tasks", ea.tasks)->required();
  gen->add_option("--max-new", ea.max_new);
  gen->add_option("--shots", ea.shots);
  gen->add_option("--seed", ea.seed);
  gen->add_option("--stop", ea.stop, "stop token surfaces (\\n for newline)");

  std::vector<std::string> rev(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  ta.reshuffle_seed_set = rs->count() > 0;

  try {
    if (*tk) return cmd_train_tokenizer(tka, out, err);
    if (*sv) return cmd_select_vocab(sa, out, err);
    if (*pl) return cmd_plan(pa, out);
    if (*trc) return cmd_train(ta, out, err);
    if (*bpb) return cmd_eval_bpb(ea, out);
    if (*cls) return cmd_eval_classify(ea, out, err);
    if (*gen) return cmd_eval_generate(ea, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace finforge::cli
