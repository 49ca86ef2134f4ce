#pragma once

// Byte-level Unigram tokenizer: pretokenization, per-chunk EM training,
// byte-weighted vocabulary merging, pruning, finalization, Viterbi encoding.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "finforge/errors.hpp"

namespace finforge::tokenizer {

using ByteString = std::string;
using TokenId = std::int32_t;

enum class PretokenClass { alpha_space, digit, other };

struct Pretoken {
  ByteString bytes;
  PretokenClass cls;
  bool operator==(const Pretoken&) const = default;
};

inline PretokenClass byte_class(unsigned char c) {
  if (c == ' ' || (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z')) return PretokenClass::alpha_space;
  if (c >= '0' && c <= '9') return PretokenClass::digit;
  return PretokenClass::other;
}

// Calls f(std::string_view piece, PretokenClass) for every chunk of
// `[ A-Za-z]+|[0-9]|[^ A-Za-z0-9]+` matched greedily left to right.
template <class F>
void for_each_pretoken(std::string_view input, F&& f) {
  std::size_t i = 0;
  while (i < input.size()) {
    const auto cls = byte_class(static_cast<unsigned char>(input[i]));
    std::size_t j = i + 1;
    if (cls != PretokenClass::digit) {
      while (j < input.size() && byte_class(static_cast<unsigned char>(input[j])) == cls) ++j;
    }
    f(input.substr(i, j - i), cls);
    i = j;
  }
}

inline std::vector<Pretoken> pretokenize(std::string_view input) {
  std::vector<Pretoken> out;
  for_each_pretoken(input, [&](std::string_view piece, PretokenClass cls) {
    out.push_back({ByteString(piece), cls});
  });
  return out;
}

// ---------------------------------------------------------------------------
// Hex helpers for the tokenizer file format.

inline std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 0xF]);
  }
  return out;
}

inline ByteString from_hex(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  if (hex.size() % 2 != 0) throw DataError("odd-length hex token");
  ByteString out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    const int hi = nibble(hex[i]);
    const int lo = nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) throw DataError("invalid hex digit in token: " + std::string(hex));
    out.push_back(static_cast<char>((hi << 4) | lo));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Byte trie over pieces. Edges are kept in one hash table keyed by
// (node, byte); enumerating every piece that starts at a text position
// is a walk down from the root.

class PieceTrie {
 public:
  PieceTrie() : terminal_(1, -1) {}

  void insert(std::string_view piece, std::int32_t id) {
    std::int32_t node = 0;
    for (unsigned char c : piece) {
      const auto key = edge_key(node, c);
      auto it = edges_.find(key);
      if (it == edges_.end()) {
        const auto child = static_cast<std::int32_t>(terminal_.size());
        terminal_.push_back(-1);
        edges_.emplace(key, child);
        node = child;
      } else {
        node = it->second;
      }
    }
    terminal_[static_cast<std::size_t>(node)] = id;
    max_len_ = std::max(max_len_, piece.size());
  }

  // f(length, id) for every piece that is a prefix of text[start..].
  template <class F>
  void for_each_prefix(std::string_view text, std::size_t start, F&& f) const {
    std::int32_t node = 0;
    for (std::size_t k = start; k < text.size(); ++k) {
      auto it = edges_.find(edge_key(node, static_cast<unsigned char>(text[k])));
      if (it == edges_.end()) return;
      node = it->second;
      const auto id = terminal_[static_cast<std::size_t>(node)];
      if (id >= 0) f(k - start + 1, id);
    }
  }

  std::size_t max_len() const { return max_len_; }

 private:
  static std::uint64_t edge_key(std::int32_t node, unsigned char c) {
    return (static_cast<std::uint64_t>(node) << 8) | c;
  }

  std::unordered_map<std::uint64_t, std::int32_t> edges_;
  std::vector<std::int32_t> terminal_;
  std::size_t max_len_ = 0;
};

// ---------------------------------------------------------------------------
// UnigramVocab

struct UnigramVocab {
  std::map<ByteString, double> entries;  // token -> probability
  double training_weight = 0.0;          // raw corpus bytes

  std::size_t size() const { return entries.size(); }

  double total() const {
    double s = 0.0;
    for (const auto& [tok, p] : entries) s += p;
    return s;
  }

  double prob(const ByteString& tok) const {
    auto it = entries.find(tok);
    return it == entries.end() ? 0.0 : it->second;
  }
};

inline void check_vocab(const UnigramVocab& v, double tol = 1e-9) {
  for (const auto& [tok, p] : v.entries) {
    if (tok.empty()) throw DataError("vocabulary contains an empty token");
    if (!(p > 0.0) || p > 1.0) throw DataError("token probability outside (0,1]");
  }
  if (!v.entries.empty() && std::abs(v.total() - 1.0) > tol)
    throw NumericError("vocabulary probabilities do not sum to 1");
}

inline void renormalize(UnigramVocab& v) {
  const double s = v.total();
  if (!(s > 0.0)) throw NumericError("cannot renormalize an empty distribution");
  for (auto& [tok, p] : v.entries) p /= s;
}

inline std::set<ByteString> single_bytes(const UnigramVocab& v) {
  std::set<ByteString> out;
  for (const auto& [tok, p] : v.entries)
    if (tok.size() == 1) out.insert(tok);
  return out;
}

// Byte-weighted average: p(t) = sum_i w_i p_i(t) / sum_i w_i.
inline UnigramVocab merge_vocabs(std::span<const UnigramVocab> vocabs) {
  if (vocabs.empty()) throw UsageError("merge_vocabs: empty list");
  UnigramVocab out;
  for (const auto& v : vocabs) {
    if (!(v.training_weight > 0.0)) throw UsageError("merge_vocabs: non-positive training weight");
    out.training_weight += v.training_weight;
  }
  for (const auto& v : vocabs)
    for (const auto& [tok, p] : v.entries) out.entries[tok] += v.training_weight * p;
  for (auto& [tok, p] : out.entries) p /= out.training_weight;
  return out;
}

inline UnigramVocab merge_vocabs(std::initializer_list<UnigramVocab> vocabs) {
  return merge_vocabs(std::span<const UnigramVocab>(vocabs.begin(), vocabs.size()));
}

// Keeps `size` tokens: every protected token present in the vocabulary, then
// the highest-probability rest (ties: lexicographically smaller bytes first).
inline UnigramVocab prune_to_size(const UnigramVocab& vocab, long long size,
                                  const std::set<ByteString>& protected_tokens = {}) {
  if (size <= 0) throw UsageError("prune_to_size: size must be positive");
  UnigramVocab out;
  out.training_weight = vocab.training_weight;
  std::vector<std::pair<ByteString, double>> rest;
  for (const auto& [tok, p] : vocab.entries) {
    if (protected_tokens.contains(tok))
      out.entries.emplace(tok, p);
    else
      rest.emplace_back(tok, p);
  }
  if (static_cast<long long>(out.entries.size()) > size)
    throw UsageError("prune_to_size: more protected tokens than requested size");
  std::stable_sort(rest.begin(), rest.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const auto room = static_cast<std::size_t>(size) - out.entries.size();
  for (std::size_t i = 0; i < rest.size() && i < room; ++i) out.entries.emplace(rest[i]);
  renormalize(out);
  return out;
}

// ---------------------------------------------------------------------------
// Per-chunk EM training.

struct TrainOptions {
  std::size_t max_piece_len = 16;
  double min_seed_frequency = 2.0;
  std::size_t seed_factor = 10;        // seed cap = seed_factor * target_size
  int em_iterations_per_round = 2;
  double prune_fraction = 0.25;
  double prob_floor = 1e-12;
};

namespace detail {

// Distinct pretokens of a chunk with their counts, in byte order.
struct WordCounts {
  std::vector<std::pair<ByteString, double>> words;
  double raw_bytes = 0.0;
};

inline WordCounts count_words(std::span<const ByteString> docs) {
  std::map<ByteString, double> counts;
  WordCounts wc;
  for (const auto& doc : docs) {
    wc.raw_bytes += static_cast<double>(doc.size());
    for_each_pretoken(doc, [&](std::string_view piece, PretokenClass) { counts[ByteString(piece)] += 1.0; });
  }
  wc.words.assign(counts.begin(), counts.end());
  return wc;
}

// Working form of a vocabulary during EM: parallel arrays plus a trie.
struct Lattice {
  std::vector<ByteString> pieces;
  std::vector<double> log_probs;
  PieceTrie trie;

  explicit Lattice(const UnigramVocab& v) {
    pieces.reserve(v.size());
    log_probs.reserve(v.size());
    for (const auto& [tok, p] : v.entries) {
      trie.insert(tok, static_cast<std::int32_t>(pieces.size()));
      pieces.push_back(tok);
      log_probs.push_back(std::log(p));
    }
  }
};

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

// E-step: expected piece counts under the full posterior over segmentations
// (forward-backward). Returns the corpus log-likelihood via `loglik`.
inline std::vector<double> expected_counts(const Lattice& lat,
                                           std::span<const std::pair<ByteString, double>> words,
                                           double* loglik = nullptr) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> counts(lat.pieces.size(), 0.0);
  std::vector<double> alpha, beta;
  double ll = 0.0;
  for (const auto& [word, freq] : words) {
    const std::size_t n = word.size();
    alpha.assign(n + 1, kNegInf);
    beta.assign(n + 1, kNegInf);
    alpha[0] = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (alpha[s] == kNegInf) continue;
      lat.trie.for_each_prefix(word, s, [&](std::size_t len, std::int32_t id) {
        alpha[s + len] = log_add(alpha[s + len], alpha[s] + lat.log_probs[static_cast<std::size_t>(id)]);
      });
    }
    beta[n] = 0.0;
    for (std::size_t s = n; s-- > 0;) {
      lat.trie.for_each_prefix(word, s, [&](std::size_t len, std::int32_t id) {
        beta[s] = log_add(beta[s], lat.log_probs[static_cast<std::size_t>(id)] + beta[s + len]);
      });
    }
    const double z = alpha[n];
    if (z == kNegInf) throw NumericError("pretoken not segmentable by vocabulary");
    ll += freq * z;
    for (std::size_t s = 0; s < n; ++s) {
      if (alpha[s] == kNegInf) continue;
      lat.trie.for_each_prefix(word, s, [&](std::size_t len, std::int32_t id) {
        const double lp = alpha[s] + lat.log_probs[static_cast<std::size_t>(id)] + beta[s + len] - z;
        counts[static_cast<std::size_t>(id)] += freq * std::exp(lp);
      });
    }
  }
  if (loglik) *loglik = ll;
  return counts;
}

// Best segmentation of `word` as piece ids. Ties: fewer pieces, then the
// shorter (lexicographically smaller) first piece. `excluded` is skipped
// when it would span the whole word.
inline std::vector<std::int32_t> viterbi(const PieceTrie& trie, std::span<const double> log_probs,
                                         std::string_view word, std::int32_t excluded = -1) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  const std::size_t n = word.size();
  std::vector<double> score(n + 1, kNegInf);
  std::vector<std::size_t> count(n + 1, 0);
  std::vector<std::int32_t> choice(n + 1, -1);
  std::vector<std::size_t> choice_len(n + 1, 0);
  score[n] = 0.0;
  for (std::size_t s = n; s-- > 0;) {
    trie.for_each_prefix(word, s, [&](std::size_t len, std::int32_t id) {
      if (id == excluded && s == 0 && len == n) return;
      if (score[s + len] == kNegInf) return;
      const double sc = log_probs[static_cast<std::size_t>(id)] + score[s + len];
      const std::size_t cnt = count[s + len] + 1;
      bool better = false;
      if (choice[s] < 0 || sc > score[s]) {
        better = true;
      } else if (sc == score[s]) {
        better = cnt < count[s] || (cnt == count[s] && len < choice_len[s]);
      }
      if (better) {
        score[s] = sc;
        count[s] = cnt;
        choice[s] = id;
        choice_len[s] = len;
      }
    });
  }
  std::vector<std::int32_t> out;
  if (n > 0 && choice[0] < 0) return out;
  for (std::size_t s = 0; s < n; s += choice_len[s]) out.push_back(choice[s]);
  return out;
}

inline UnigramVocab seed_vocab(const WordCounts& wc, std::size_t target_size, const TrainOptions& opt) {
  std::unordered_map<ByteString, double> sub;
  for (const auto& [word, freq] : wc.words) {
    for (std::size_t s = 0; s < word.size(); ++s) {
      const std::size_t max_len = std::min(opt.max_piece_len, word.size() - s);
      for (std::size_t len = 1; len <= max_len; ++len) sub[word.substr(s, len)] += freq;
    }
  }
  UnigramVocab v;
  v.training_weight = wc.raw_bytes;
  std::vector<std::pair<ByteString, double>> multi;
  for (auto& [tok, c] : sub) {
    if (tok.size() == 1)
      v.entries.emplace(tok, c);
    else if (c >= opt.min_seed_frequency)
      multi.emplace_back(tok, c);
  }
  std::sort(multi.begin(), multi.end(), [](const auto& a, const auto& b) {
    const double sa = a.second * static_cast<double>(a.first.size());
    const double sb = b.second * static_cast<double>(b.first.size());
    if (sa != sb) return sa > sb;
    return a.first < b.first;
  });
  const std::size_t cap = opt.seed_factor * target_size;
  for (std::size_t i = 0; i < multi.size() && i < cap; ++i) v.entries.emplace(multi[i]);
  renormalize(v);
  return v;
}

inline void em_step(UnigramVocab& v, std::span<const std::pair<ByteString, double>> words,
                    const TrainOptions& opt) {
  const Lattice lat(v);
  const auto counts = expected_counts(lat, words);
  double total = 0.0;
  for (double c : counts) total += c;
  if (!(total > 0.0)) throw NumericError("EM produced zero expected counts");
  std::size_t i = 0;
  for (auto& [tok, p] : v.entries) p = std::max(counts[i++] / total, opt.prob_floor);
  renormalize(v);
}

// Removes the pieces whose removal least increases corpus log-loss.
inline void prune_round(UnigramVocab& v, std::span<const std::pair<ByteString, double>> words,
                        std::size_t target_size, const TrainOptions& opt) {
  const Lattice lat(v);
  const std::size_t n = lat.pieces.size();
  std::vector<double> freq(n, 0.0);
  for (const auto& [word, f] : words)
    for (auto id : viterbi(lat.trie, lat.log_probs, word)) freq[static_cast<std::size_t>(id)] += f;
  double sum = 0.0;
  for (double f : freq) sum += f;

  struct Candidate {
    double loss;
    std::size_t id;
  };
  std::vector<Candidate> prunable;
  for (std::size_t id = 0; id < n; ++id) {
    if (lat.pieces[id].size() == 1) continue;  // single bytes are never pruned
    double loss = 0.0;
    if (freq[id] > 0.0) {
      const auto alt = viterbi(lat.trie, lat.log_probs, lat.pieces[id], static_cast<std::int32_t>(id));
      // Re-segmenting every occurrence with `alt` moves freq[id] counts onto
      // the alternative pieces.
      const double logsum = std::log(sum);
      const double logsum_alt = std::log(sum + freq[id] * (static_cast<double>(alt.size()) - 1.0));
      const double logprob_piece = std::log(freq[id]) - logsum;
      double logprob_alt = 0.0;
      for (auto a : alt) logprob_alt += std::log(freq[static_cast<std::size_t>(a)] + freq[id]);
      logprob_alt -= static_cast<double>(alt.size()) * logsum_alt;
      loss = (freq[id] / sum) * (logprob_piece - logprob_alt);
    }
    prunable.push_back({loss, id});
  }
  std::stable_sort(prunable.begin(), prunable.end(),
                   [](const Candidate& a, const Candidate& b) { return a.loss < b.loss; });
  const std::size_t excess = v.size() - target_size;
  std::size_t drop = static_cast<std::size_t>(std::floor(opt.prune_fraction * static_cast<double>(prunable.size())));
  drop = std::clamp<std::size_t>(drop, 1, std::min(excess, prunable.size()));
  for (std::size_t i = 0; i < drop; ++i) v.entries.erase(lat.pieces[prunable[i].id]);
  renormalize(v);
}

}  // namespace detail

inline UnigramVocab train_chunk_unigram(std::span<const ByteString> docs, std::size_t target_size,
                                        const TrainOptions& opt = {}) {
  if (target_size == 0) throw UsageError("train_chunk_unigram: target_size must be positive");
  const auto wc = detail::count_words(docs);
  if (wc.words.empty()) throw InsufficientCorpus("insufficient corpus: chunk has no bytes to seed a vocabulary");
  UnigramVocab v = detail::seed_vocab(wc, target_size, opt);
  const std::span<const std::pair<ByteString, double>> words(wc.words);
  for (;;) {
    for (int k = 0; k < opt.em_iterations_per_round; ++k) detail::em_step(v, words, opt);
    const std::size_t protected_count = single_bytes(v).size();
    if (v.size() <= target_size || v.size() <= protected_count) break;
    detail::prune_round(v, words, target_size, opt);
  }
  v.training_weight = wc.raw_bytes;
  return v;
}

inline UnigramVocab train_chunk_unigram(std::string_view chunk, std::size_t target_size,
                                        const TrainOptions& opt = {}) {
  const ByteString doc(chunk);
  return train_chunk_unigram(std::span<const ByteString>(&doc, 1), target_size, opt);
}

// ---------------------------------------------------------------------------
// TokenizerModel

struct DecodeOptions {
  std::string end_of_text_surface;  // `<|endoftext|>` decodes to this
};

class TokenizerModel {
 public:
  static constexpr std::string_view kEndOfText = "<|endoftext|>";
  static constexpr TokenId kEndOfTextId = 0;
  static constexpr double kMissingByteProb = 1e-12;

  TokenizerModel() = default;

  // ids 1..n follow the order of `tokens`; id 0 is `<|endoftext|>`.
  TokenizerModel(std::vector<ByteString> tokens, std::vector<double> log_probs) {
    if (tokens.size() != log_probs.size()) throw UsageError("token/log-prob length mismatch");
    tokens_.reserve(tokens.size() + 1);
    log_probs_.reserve(tokens.size() + 1);
    tokens_.emplace_back();
    log_probs_.push_back(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].empty()) throw DataError("empty token in tokenizer");
      const auto id = static_cast<TokenId>(tokens_.size());
      if (!index_.emplace(tokens[i], id).second) throw DataError("duplicate token in tokenizer");
      trie_.insert(tokens[i], id);
      tokens_.push_back(std::move(tokens[i]));
      log_probs_.push_back(log_probs[i]);
    }
    for (int b = 0; b < 256; ++b)
      if (!index_.contains(ByteString(1, static_cast<char>(b))))
        throw DataError("tokenizer is missing single-byte token " + std::to_string(b));
  }

  std::size_t size() const { return tokens_.size(); }
  const ByteString& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  double log_prob(TokenId id) const { return log_probs_.at(static_cast<std::size_t>(id)); }
  std::span<const double> log_probs() const { return log_probs_; }

  std::optional<TokenId> id_of(std::string_view bytes) const {
    auto it = index_.find(ByteString(bytes));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t missing_bytes_added() const { return missing_bytes_added_; }

  void append_pretoken(std::string_view piece, std::vector<TokenId>& out) const {
    for (auto id : detail::viterbi(trie_, log_probs_, piece)) out.push_back(id);
  }

  std::vector<TokenId> encode(std::string_view input) const {
    std::vector<TokenId> out;
    for_each_pretoken(input, [&](std::string_view piece, PretokenClass) { append_pretoken(piece, out); });
    return out;
  }

  ByteString decode(std::span<const TokenId> ids, const DecodeOptions& opt = {}) const {
    ByteString out;
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw DataError("decode: token id " + std::to_string(id) + " out of range");
      if (id == kEndOfTextId)
        out += opt.end_of_text_surface;
      else
        out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  void save(std::ostream& os) const {
    os << "unigram-tokenizer-v1 " << tokens_.size() << "\n";
    os << "special " << kEndOfText << " " << kEndOfTextId << "\n";
    char buf[64];
    for (std::size_t id = 1; id < tokens_.size(); ++id) {
      std::snprintf(buf, sizeof buf, "%.17g", log_probs_[id]);
      os << id << '\t' << to_hex(tokens_[id]) << '\t' << buf << '\n';
    }
  }

  std::string to_string() const {
    std::ostringstream os;
    save(os);
    return os.str();
  }

  static TokenizerModel load(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("tokenizer file: missing header");
    std::istringstream header(line);
    std::string magic;
    std::size_t vocab_size = 0;
    if (!(header >> magic >> vocab_size) || magic != "unigram-tokenizer-v1")
      throw DataError("tokenizer file: bad header '" + line + "'");
    if (!std::getline(is, line) || line != "special " + std::string(kEndOfText) + " 0")
      throw DataError("tokenizer file: bad special-token line");
    std::vector<ByteString> tokens;
    std::vector<double> log_probs;
    std::size_t expected = 1;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto t1 = line.find('\t');
      const auto t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos)
        throw DataError("tokenizer file: malformed line '" + line + "'");
      const std::size_t id = std::stoull(line.substr(0, t1));
      if (id != expected++) throw DataError("tokenizer file: ids must be contiguous and ascending");
      tokens.push_back(from_hex(std::string_view(line).substr(t1 + 1, t2 - t1 - 1)));
      const std::string lp = line.substr(t2 + 1);
      char* end = nullptr;
      const double v = std::strtod(lp.c_str(), &end);
      if (end == lp.c_str()) throw DataError("tokenizer file: bad log-probability '" + lp + "'");
      log_probs.push_back(v);
    }
    if (tokens.size() + 1 != vocab_size) throw DataError("tokenizer file: vocab size does not match entries");
    return TokenizerModel(std::move(tokens), std::move(log_probs));
  }

  static TokenizerModel from_string(const std::string& s) {
    std::istringstream is(s);
    return load(is);
  }

 private:
  friend TokenizerModel finalize(const UnigramVocab& vocab);

  std::vector<ByteString> tokens_;
  std::vector<double> log_probs_;
  std::unordered_map<ByteString, TokenId> index_;
  PieceTrie trie_;
  std::size_t missing_bytes_added_ = 0;
};

inline std::size_t missing_byte_count(const UnigramVocab& v) { return 256 - single_bytes(v).size(); }

// Adds absent single bytes at a probability floor, renormalizes, and assigns
// ids 1.. by descending probability (ties: byte order). Id 0 is end-of-text.
inline TokenizerModel finalize(const UnigramVocab& vocab) {
  UnigramVocab v = vocab;
  std::size_t added = 0;
  for (int b = 0; b < 256; ++b) {
    if (v.entries.emplace(ByteString(1, static_cast<char>(b)), TokenizerModel::kMissingByteProb).second) ++added;
  }
  renormalize(v);
  std::vector<std::pair<ByteString, double>> order(v.entries.begin(), v.entries.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<ByteString> tokens;
  std::vector<double> log_probs;
  tokens.reserve(order.size());
  log_probs.reserve(order.size());
  for (auto& [tok, p] : order) {
    tokens.push_back(tok);
    log_probs.push_back(std::log(p));
  }
  TokenizerModel m(std::move(tokens), std::move(log_probs));
  m.missing_bytes_added_ = added;
  return m;
}

// ---------------------------------------------------------------------------
// Split-and-merge training.

// domains -> chunks -> documents
using PartitionedCorpus = std::vector<std::vector<std::vector<ByteString>>>;

struct ParallelOptions {
  std::size_t chunk_vocab = 65536;
  std::size_t final_vocab = 131072;
  unsigned threads = 1;
  TrainOptions train;
};

struct ParallelResult {
  TokenizerModel model;
  UnigramVocab merged;  // full union before pruning
  std::vector<UnigramVocab> domain_vocabs;
};

inline ParallelResult train_parallel_detailed(const PartitionedCorpus& corpus, const ParallelOptions& opt) {
  if (corpus.empty()) throw UsageError("train_parallel: no domains");
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    if (corpus[k].empty()) throw UsageError("train_parallel: domain " + std::to_string(k) + " has no chunks");
    for (std::size_t c = 0; c < corpus[k].size(); ++c) jobs.emplace_back(k, c);
  }
  std::vector<UnigramVocab> chunk_vocabs(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      try {
        const auto& docs = corpus[jobs[j].first][jobs[j].second];
        chunk_vocabs[j] = train_chunk_unigram(std::span<const ByteString>(docs), opt.chunk_vocab, opt.train);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(jobs.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  // Fixed grouping: chunks within a domain in order, then domains in order.
  ParallelResult result;
  std::size_t j = 0;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const std::size_t n = corpus[k].size();
    result.domain_vocabs.push_back(merge_vocabs(std::span<const UnigramVocab>(chunk_vocabs.data() + j, n)));
    j += n;
  }
  result.merged = merge_vocabs(std::span<const UnigramVocab>(result.domain_vocabs));
  const auto missing = static_cast<long long>(missing_byte_count(result.merged));
  const long long keep = static_cast<long long>(opt.final_vocab) - missing - 1;
  if (keep <= 0) throw UsageError("train_parallel: final_vocab too small for byte coverage");
  result.model = finalize(prune_to_size(result.merged, keep, single_bytes(result.merged)));
  return result;
}

inline TokenizerModel train_parallel(const PartitionedCorpus& corpus, const ParallelOptions& opt) {
  return train_parallel_detailed(corpus, opt).model;
}

}  // namespace finforge::tokenizer
