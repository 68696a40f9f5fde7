// SPDX-License-Identifier: Apache-2.0
#include "mpa/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "mpa/error.hpp"

namespace mpa {

namespace {

constexpr const char* kSpecialNames[kNumSpecials] = {"[PAD]", "[MASK]", "[UNK]",
                                                     "[CLS]"};
constexpr std::string_view kVocabMagic = "mpa-vocab";
constexpr std::string_view kVocabVersion = "v1";

bool is_word_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         c >= 0x80;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (unsigned char c : line) {
    if (is_word_byte(c)) {
      word.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a')
                                          : static_cast<char>(c));
    } else {
      flush();
      if (c > ' ' && c < 0x7f) out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

TokenCounts count_tokens(std::istream& corpus) {
  TokenCounts counts;
  std::string line;
  while (std::getline(corpus, line)) {
    for (auto& tok : tokenize(line)) ++counts[tok];
  }
  return counts;
}

void merge_counts(TokenCounts& into, const TokenCounts& from) {
  for (const auto& [tok, n] : from) into[tok] += n;
}

// ---- Vocabulary -------------------------------------------------------------

void Vocabulary::add(std::string token, std::uint64_t count) {
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!index_.emplace(token, id).second) {
    throw FormatError("vocabulary: duplicate token '" + token + "'");
  }
  tokens_.push_back(std::move(token));
  counts_.push_back(count);
}

Vocabulary Vocabulary::build(std::istream& corpus, std::size_t max_size,
                             std::uint64_t min_count) {
  const TokenCounts counts = count_tokens(corpus);
  if (counts.empty()) throw FormatError("build_vocab: corpus has no tokens");
  return from_counts(counts, max_size, min_count);
}

Vocabulary Vocabulary::from_counts(const TokenCounts& counts, std::size_t max_size,
                                   std::uint64_t min_count) {
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  for (const char* name : kSpecialNames) vocab.add(name, 0);
  std::uint64_t unknown = 0;
  for (auto& [tok, n] : ranked) {
    if (n < min_count || vocab.size() - kNumSpecials >= max_size) {
      unknown += n;
      continue;
    }
    vocab.add(tok, n);
  }
  vocab.counts_[kUnk] = unknown;
  return vocab;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  return find(token).value_or(kUnk);
}

std::vector<TokenId> Vocabulary::encode(std::string_view line) const {
  std::vector<TokenId> ids;
  for (const auto& tok : tokenize(line)) ids.push_back(id(tok));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(token(id));
  return out;
}

void Vocabulary::save(std::ostream& out) const {
  out << kVocabMagic << ' ' << kVocabVersion << ' ' << tokens_.size() << '\n';
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    out << tokens_[i] << '\t' << counts_[i] << '\n';
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocabulary: " + path.string());
  save(out);
  if (!out) throw FormatError("write failed: " + path.string());
}

Vocabulary Vocabulary::load(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw FormatError("vocabulary: missing header");
  std::istringstream hs(header);
  std::string magic, version;
  std::size_t declared = 0;
  if (!(hs >> magic >> version >> declared) || magic != kVocabMagic) {
    throw FormatError("vocabulary: bad header '" + header + "'");
  }
  if (version != kVocabVersion) {
    throw FormatError("vocabulary: version " + version + " unsupported (expected " +
                      std::string(kVocabVersion) + ")");
  }
  Vocabulary vocab;
  std::string line;
  while (vocab.size() < declared && std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw FormatError("vocabulary: malformed line " + std::to_string(vocab.size() + 2));
    }
    std::uint64_t count = 0;
    try {
      std::size_t used = 0;
      count = std::stoull(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError("vocabulary: bad count on line " + std::to_string(vocab.size() + 2));
    }
    vocab.add(line.substr(0, tab), count);
  }
  if (vocab.size() != declared) {
    throw FormatError("vocabulary: header declares " + std::to_string(declared) +
                      " entries, file holds " + std::to_string(vocab.size()));
  }
  if (declared < kNumSpecials) throw FormatError("vocabulary: missing special tokens");
  for (TokenId i = 0; i < kNumSpecials; ++i) {
    if (vocab.tokens_[i] != kSpecialNames[i]) {
      throw FormatError("vocabulary: id " + std::to_string(i) + " must be " +
                        kSpecialNames[i]);
    }
  }
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read vocabulary: " + path.string());
  return load(in);
}

// ---- packing --------------------------------------------------------------

void encode_pack(std::istream& corpus, const Vocabulary& vocab, std::size_t max_len,
                 const std::function<void(PackedSequence&&)>& sink) {
  if (max_len < 2) throw ConfigError("encode_pack: max_len must be at least 2");
  PackedSequence current{{kCls}, {}};
  auto emit = [&] {
    if (current.ids.size() > 1) sink(std::move(current));
    current = PackedSequence{{kCls}, {}};
  };
  std::string line;
  while (std::getline(corpus, line)) {
    const auto ids = vocab.encode(line);
    if (ids.empty()) continue;
    bool doc_start = true;
    for (auto id : ids) {
      if (current.ids.size() == max_len) emit();
      if (doc_start) current.doc_offsets.push_back(current.ids.size());
      doc_start = false;
      current.ids.push_back(id);
    }
  }
  emit();
}

std::vector<PackedSequence> encode_pack(std::istream& corpus, const Vocabulary& vocab,
                                        std::size_t max_len) {
  std::vector<PackedSequence> out;
  encode_pack(corpus, vocab, max_len, [&](PackedSequence&& s) { out.push_back(std::move(s)); });
  return out;
}

}  // namespace mpa
