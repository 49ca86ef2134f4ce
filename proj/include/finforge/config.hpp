#pragma once

// Run configuration: `key = value` lines, `#` starts a comment. Trainer keys
// follow TrainConfig; model, path and thread keys are handled here. Unknown
// keys are rejected with their line number.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>

#include "finforge/checkpoint.hpp"
#include "finforge/errors.hpp"
#include "finforge/scaling.hpp"
#include "finforge/trainer.hpp"

namespace finforge::config {

namespace fs = std::filesystem;

struct RunConfig {
  trainer::TrainConfig train;
  std::int64_t layers = 2;
  std::int64_t heads = 2;
  std::int64_t head_dim = 8;
  std::string tokenizer;     // paths are resolved against the config file's directory
  std::string train_corpus;
  std::string val_corpus;
  std::string out_dir = "run";
  unsigned threads = 0;      // 0: every core, capped by FINFORGE_THREADS

  scaling::ModelShape shape(std::int64_t vocab) const { return scaling::ModelShape::make(layers, heads, head_dim, vocab); }
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Returns false for keys this layer does not know.
inline bool apply_run_setting(RunConfig& c, const std::string& key, const std::string& value,
                              const fs::path& base_dir = {}) {
  auto path = [&](const std::string& v) {
    const fs::path p(v);
    return (p.is_absolute() || base_dir.empty() ? p : base_dir / p).lexically_normal().string();
  };
  if (key == "layers") c.layers = trainer::detail::parse_int(key, value);
  else if (key == "heads") c.heads = trainer::detail::parse_int(key, value);
  else if (key == "head_dim") c.head_dim = trainer::detail::parse_int(key, value);
  else if (key == "tokenizer") c.tokenizer = path(value);
  else if (key == "train_corpus") c.train_corpus = path(value);
  else if (key == "val_corpus") c.val_corpus = value.empty() ? std::string() : path(value);
  else if (key == "out_dir") c.out_dir = path(value);
  else if (key == "threads") c.threads = static_cast<unsigned>(trainer::detail::parse_int(key, value));
  else return trainer::apply_setting(c.train, key, value);
  return true;
}

inline RunConfig parse_config(std::istream& in, const fs::path& base_dir = {}, const std::string& name = "config") {
  RunConfig c;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const auto where = name + ":" + std::to_string(n);
    if (eq == std::string::npos) throw UsageError(where + ": expected `key = value`");
    const auto key = trim(std::string_view(body).substr(0, eq));
    const auto value = trim(std::string_view(body).substr(eq + 1));
    try {
      if (!apply_run_setting(c, key, value, base_dir)) throw UsageError("unknown key '" + key + "'");
    } catch (const UsageError& e) {
      throw UsageError(where + ": " + e.what());
    }
  }
  if (c.layers < 0 || c.heads < 1 || c.head_dim < 1) throw UsageError(name + ": bad model shape");
  c.train.validate();
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path.string());
  return parse_config(in, path.parent_path(), path.string());
}

// Every setting, one `key = value` per line, keys sorted.
inline std::string resolved_text(const RunConfig& c) {
  std::map<std::string, std::string> kv;
  const auto train = checkpoint::config_to_json(c.train);
  for (const auto& [k, v] : train.items()) kv[k] = v.is_string() ? v.get<std::string>() : v.dump();
  kv["layers"] = std::to_string(c.layers);
  kv["heads"] = std::to_string(c.heads);
  kv["head_dim"] = std::to_string(c.head_dim);
  kv["tokenizer"] = c.tokenizer;
  kv["train_corpus"] = c.train_corpus;
  kv["val_corpus"] = c.val_corpus;
  kv["out_dir"] = c.out_dir;
  kv["threads"] = std::to_string(c.threads);
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  return os.str();
}

}  // namespace finforge::config
