#pragma once

// Corpus ingestion. `.jsonl`/`.ndjson` files hold one JSON record per line
// with a required `text` field and optional `date` and `source`; any other
// file is a single plain-text document. Directories are walked recursively
// in sorted path order.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "finforge/errors.hpp"

namespace finforge::corpus {

namespace fs = std::filesystem;

struct CorpusRecord {
  std::string text;
  std::string date;
  std::string source;
};

inline bool is_ndjson(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".jsonl" || ext == ".ndjson";
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void read_ndjson(const fs::path& p, std::vector<CorpusRecord>& out) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = p.string() + ":" + std::to_string(n);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
      throw DataError(where + ": record needs a string `text` field");
    CorpusRecord r;
    r.text = j["text"].get<std::string>();
    if (r.text.empty()) throw DataError(where + ": empty `text`");
    if (j.contains("date") && j["date"].is_string()) r.date = j["date"].get<std::string>();
    if (j.contains("source") && j["source"].is_string()) r.source = j["source"].get<std::string>();
    out.push_back(std::move(r));
  }
}

inline void read_one(const fs::path& p, std::vector<CorpusRecord>& out) {
  if (is_ndjson(p)) {
    read_ndjson(p, out);
    return;
  }
  auto text = read_file(p);
  if (text.empty()) throw DataError(p.string() + ": empty document");
  out.push_back({std::move(text), "", p.filename().string()});
}

inline std::vector<CorpusRecord> read_corpus(const fs::path& path) {
  std::vector<CorpusRecord> out;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) read_one(f, out);
  } else if (fs::exists(path)) {
    read_one(path, out);
  } else {
    throw DataError("corpus path does not exist: " + path.string());
  }
  if (out.empty()) throw DataError("corpus " + path.string() + " holds no documents");
  return out;
}

inline std::vector<std::string> read_texts(const fs::path& path) {
  std::vector<std::string> out;
  for (auto& r : read_corpus(path)) out.push_back(std::move(r.text));
  return out;
}

}  // namespace finforge::corpus
