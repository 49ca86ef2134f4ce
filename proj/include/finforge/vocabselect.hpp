#pragma once

// Vocabulary-size heuristic: the size whose encoding of a corpus is smallest
// at log2(|V|) bits per token, rounded up to a power of two.

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "finforge/errors.hpp"
#include "finforge/tokenizer.hpp"

namespace finforge::vocabselect {

struct VocabCandidate {
  std::size_t size = 0;             // nominal candidate size
  std::size_t model_size = 0;       // |V| of the tokenizer actually built
  std::uint64_t encoded_tokens = 0;
  double encoded_bits = 0.0;
  double bits_per_byte = 0.0;
};

inline std::uint64_t count_tokens(const tokenizer::TokenizerModel& model, std::span<const std::string> corpus) {
  std::uint64_t n = 0;
  for (const auto& doc : corpus) n += model.encode(doc).size();
  return n;
}

inline std::uint64_t corpus_bytes(std::span<const std::string> corpus) {
  std::uint64_t n = 0;
  for (const auto& doc : corpus) n += doc.size();
  return n;
}

inline double encoded_size_bits(std::uint64_t tokens, std::size_t vocab_size) {
  if (tokens == 0) throw UsageError("encoded_size_bits: corpus encodes to zero tokens");
  return static_cast<double>(tokens) * std::log2(static_cast<double>(vocab_size));
}

inline double encoded_size_bits(const tokenizer::TokenizerModel& model, std::span<const std::string> corpus) {
  if (corpus_bytes(corpus) == 0) throw UsageError("encoded_size_bits: empty corpus");
  return encoded_size_bits(count_tokens(model, corpus), model.size());
}

// Tokenizer of `size` ids carved from one trained vocabulary.
inline tokenizer::TokenizerModel tokenizer_for_size(const tokenizer::UnigramVocab& base, std::size_t size) {
  const auto missing = static_cast<long long>(tokenizer::missing_byte_count(base));
  const long long keep = static_cast<long long>(size) - missing - 1;
  if (keep <= 0) throw UsageError("candidate size " + std::to_string(size) + " cannot cover all bytes");
  return tokenizer::finalize(tokenizer::prune_to_size(base, keep, tokenizer::single_bytes(base)));
}

inline std::uint64_t round_up_pow2(std::uint64_t n) { return n <= 1 ? 1 : std::bit_ceil(n); }

struct Selection {
  std::size_t chosen_raw = 0;
  std::uint64_t chosen_rounded = 0;
  std::vector<VocabCandidate> sweep;
};

inline VocabCandidate evaluate_candidate(const tokenizer::UnigramVocab& base, std::size_t size,
                                         std::span<const std::string> corpus) {
  const auto model = tokenizer_for_size(base, size);
  VocabCandidate c;
  c.size = size;
  c.model_size = model.size();
  c.encoded_tokens = count_tokens(model, corpus);
  // Bits are charged at the nominal candidate size.
  c.encoded_bits = encoded_size_bits(c.encoded_tokens, size);
  c.bits_per_byte = c.encoded_bits / static_cast<double>(corpus_bytes(corpus));
  return c;
}

// Argmin of encoded bits; ties go to the smaller size.
inline Selection select_vocab_size(const tokenizer::UnigramVocab& base, std::span<const std::string> corpus,
                                   std::span<const std::size_t> candidates) {
  if (candidates.empty()) throw UsageError("select_vocab_size: no candidates");
  if (corpus_bytes(corpus) == 0) throw UsageError("select_vocab_size: empty corpus");
  for (std::size_t i = 1; i < candidates.size(); ++i)
    if (candidates[i] <= candidates[i - 1]) throw UsageError("select_vocab_size: candidates must be strictly increasing");
  Selection sel;
  for (auto size : candidates) sel.sweep.push_back(evaluate_candidate(base, size, corpus));
  const VocabCandidate* best = &sel.sweep.front();
  for (const auto& c : sel.sweep)
    if (c.encoded_bits < best->encoded_bits) best = &c;
  sel.chosen_raw = best->size;
  sel.chosen_rounded = round_up_pow2(best->size);
  return sel;
}

}  // namespace finforge::vocabselect
