// SPDX-License-Identifier: Apache-2.0
//
// Word-level vocabulary and sequence packing.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mpa {

using TokenId = std::uint32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr TokenId kCls = 3;
inline constexpr TokenId kNumSpecials = 4;

inline bool is_special(TokenId id) { return id < kNumSpecials; }

// Lowercases ASCII letters and splits on whitespace. Runs of letters, digits
// and non-ASCII bytes form words; every other printable character is a token
// of its own.
std::vector<std::string> tokenize(std::string_view line);

using TokenCounts = std::unordered_map<std::string, std::uint64_t>;

// Counts tokens over a one-document-per-line stream. Shards merge by adding
// counts.
TokenCounts count_tokens(std::istream& corpus);
void merge_counts(TokenCounts& into, const TokenCounts& from);

class Vocabulary {
 public:
  // Throws FormatError on an empty corpus.
  static Vocabulary build(std::istream& corpus, std::size_t max_size,
                          std::uint64_t min_count);
  // max_size bounds the number of non-special entries. Tokens that fall below
  // min_count or outside max_size are folded into the UNK count.
  static Vocabulary from_counts(const TokenCounts& counts, std::size_t max_size,
                                std::uint64_t min_count);

  std::size_t size() const { return tokens_.size(); }
  // UNK for unknown tokens.
  TokenId id(std::string_view token) const;
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::uint64_t count(TokenId id) const { return counts_.at(id); }

  std::vector<TokenId> encode(std::string_view line) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;

  // "mpa-vocab v1 <V>" followed by one "token<TAB>count" line per id.
  void save(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(std::istream& in);
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && counts_ == other.counts_;
  }

 private:
  void add(std::string token, std::uint64_t count);

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, TokenId> index_;
};

struct PackedSequence {
  std::vector<TokenId> ids;               // ids[0] == kCls
  std::vector<std::size_t> doc_offsets;   // positions where a document starts
};

// Concatenates documents across boundaries into CLS-prefixed sequences of at
// most max_len tokens. The final partial sequence is emitted as well.
void encode_pack(std::istream& corpus, const Vocabulary& vocab, std::size_t max_len,
                 const std::function<void(PackedSequence&&)>& sink);
std::vector<PackedSequence> encode_pack(std::istream& corpus, const Vocabulary& vocab,
                                        std::size_t max_len);

}  // namespace mpa
