// SPDX-License-Identifier: Apache-2.0
//
// Context matrix over a top-frequency sub-vocabulary.
//
//   C[i][j]       windowed co-occurrence count, symmetric, zero diagonal
//   Cn[i][j]      C[i][j] / (rowsum_i * rowsum_j), 0 when either rowsum is 0
//   S[i][.]       (Cn[i][.] - min) / (max - min), all zeros for constant rows
//
// S[i][j] near 1 means j is a frequent context of i.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mpa/corpus.hpp"

namespace mpa {

class SubVocabulary {
 public:
  SubVocabulary() = default;
  // ids must be non-special and unique.
  explicit SubVocabulary(std::vector<TokenId> ids);

  std::size_t size() const { return ids_.size(); }
  const std::vector<TokenId>& ids() const { return ids_; }
  std::optional<std::size_t> index_of(TokenId id) const {
    if (id >= remap_.size() || remap_[id] < 0) return std::nullopt;
    return static_cast<std::size_t>(remap_[id]);
  }

 private:
  std::vector<TokenId> ids_;
  std::vector<std::int32_t> remap_;  // token id -> dense index, -1 if absent
};

// The k most frequent non-special tokens, clamped to what the vocabulary has.
SubVocabulary select_sub_vocab(const Vocabulary& vocab, std::size_t k);

struct CountMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> values;  // k*k row-major
  std::uint64_t at(std::size_t i, std::size_t j) const { return values[i * k + j]; }
};

// Streaming counter; shards merge by elementwise addition.
class CooccurrenceCounter {
 public:
  CooccurrenceCounter(SubVocabulary sub_vocab, std::size_t window);
  void add(std::span<const TokenId> sequence);
  void merge(const CooccurrenceCounter& other);
  const CountMatrix& counts() const { return counts_; }
  const SubVocabulary& sub_vocab() const { return sub_vocab_; }
  std::size_t window() const { return window_; }

 private:
  SubVocabulary sub_vocab_;
  std::size_t window_;
  CountMatrix counts_;
};

CountMatrix count_cooccurrence(std::span<const PackedSequence> sequences,
                               const SubVocabulary& sub_vocab, std::size_t window);
std::vector<double> normalize(const CountMatrix& counts);
std::vector<double> scale_rows(std::span<const double> normed, std::size_t k);

class ContextMatrix {
 public:
  ContextMatrix() = default;
  // S entries are rounded to float precision so the on-disk form is lossless.
  ContextMatrix(SubVocabulary sub_vocab, std::size_t window, std::vector<double> s);

  std::size_t k() const { return sub_vocab_.size(); }
  std::size_t window() const { return window_; }
  const SubVocabulary& sub_vocab() const { return sub_vocab_; }
  std::span<const double> s() const { return s_; }
  double at(std::size_t i, std::size_t j) const { return s_[i * k() + j]; }
  bool contains(TokenId id) const { return sub_vocab_.index_of(id).has_value(); }

  // Magic "MPAS", u32 version, u32 K, u32 window, K u32 token ids, K*K f32.
  void save(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static ContextMatrix load(std::istream& in);
  static ContextMatrix load(const std::filesystem::path& path);

  static constexpr std::uint32_t kVersion = 1;

 private:
  SubVocabulary sub_vocab_;
  std::size_t window_ = 0;
  std::vector<double> s_;
};

ContextMatrix build_context_matrix(std::span<const PackedSequence> sequences,
                                   const SubVocabulary& sub_vocab, std::size_t window);

// S[token][sentence_i] per position; 0 where the key is special or outside
// the sub-vocabulary. nullopt when the token itself is outside the
// sub-vocabulary (no guidance applies).
std::optional<std::vector<double>> fetch_context_vector(const ContextMatrix& context,
                                                        TokenId token,
                                                        std::span<const TokenId> sentence);

}  // namespace mpa
