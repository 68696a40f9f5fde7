// SPDX-License-Identifier: Apache-2.0
#include "mpa/cooccurrence.hpp"

#include <algorithm>
#include <fstream>

#include "mpa/binary_io.hpp"
#include "mpa/error.hpp"

namespace mpa {

namespace {
constexpr std::string_view kMagic = "MPAS";
}

SubVocabulary::SubVocabulary(std::vector<TokenId> ids) : ids_(std::move(ids)) {
  TokenId max_id = 0;
  for (auto id : ids_) max_id = std::max(max_id, id);
  remap_.assign(ids_.empty() ? 0 : max_id + 1, -1);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const TokenId id = ids_[i];
    if (is_special(id)) {
      throw FormatError("sub-vocabulary: special id " + std::to_string(id) + " not allowed");
    }
    if (remap_[id] >= 0) {
      throw FormatError("sub-vocabulary: duplicate id " + std::to_string(id));
    }
    remap_[id] = static_cast<std::int32_t>(i);
  }
}

SubVocabulary select_sub_vocab(const Vocabulary& vocab, std::size_t k) {
  const std::size_t available = vocab.size() - kNumSpecials;
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < std::min(k, available); ++i)
    ids.push_back(static_cast<TokenId>(kNumSpecials + i));
  return SubVocabulary(std::move(ids));
}

// ---- counting -------------------------------------------------------------

CooccurrenceCounter::CooccurrenceCounter(SubVocabulary sub_vocab, std::size_t window)
    : sub_vocab_(std::move(sub_vocab)), window_(window) {
  if (window_ < 1) throw ConfigError("co-occurrence window must be at least 1");
  counts_.k = sub_vocab_.size();
  counts_.values.assign(counts_.k * counts_.k, 0);
}

void CooccurrenceCounter::add(std::span<const TokenId> sequence) {
  const std::size_t n = sequence.size();
  const std::size_t k = counts_.k;
  for (std::size_t p = 0; p < n; ++p) {
    const auto i = sub_vocab_.index_of(sequence[p]);
    if (!i) continue;
    const std::size_t last = std::min(n - 1, p + window_);
    for (std::size_t q = p + 1; q <= last; ++q) {
      const auto j = sub_vocab_.index_of(sequence[q]);
      if (!j || *j == *i) continue;
      ++counts_.values[*i * k + *j];
      ++counts_.values[*j * k + *i];
    }
  }
}

void CooccurrenceCounter::merge(const CooccurrenceCounter& other) {
  if (other.sub_vocab_.ids() != sub_vocab_.ids() || other.window_ != window_) {
    throw ContractError("co-occurrence merge: counters disagree on sub-vocabulary or window");
  }
  for (std::size_t i = 0; i < counts_.values.size(); ++i)
    counts_.values[i] += other.counts_.values[i];
}

CountMatrix count_cooccurrence(std::span<const PackedSequence> sequences,
                               const SubVocabulary& sub_vocab, std::size_t window) {
  CooccurrenceCounter counter(sub_vocab, window);
  for (const auto& s : sequences) counter.add(s.ids);
  return counter.counts();
}

std::vector<double> normalize(const CountMatrix& counts) {
  const std::size_t k = counts.k;
  std::vector<double> rowsum(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uint64_t total = 0;
    for (std::size_t z = 0; z < k; ++z) total += counts.at(i, z);
    rowsum[i] = static_cast<double>(total);
  }
  std::vector<double> normed(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (rowsum[i] == 0.0) continue;
    for (std::size_t j = 0; j < k; ++j) {
      if (rowsum[j] == 0.0) continue;
      normed[i * k + j] = static_cast<double>(counts.at(i, j)) / (rowsum[i] * rowsum[j]);
    }
  }
  return normed;
}

std::vector<double> scale_rows(std::span<const double> normed, std::size_t k) {
  if (normed.size() != k * k) throw DimensionError("scale_rows: matrix is not k x k");
  std::vector<double> s(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto row = normed.subspan(i * k, k);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double span = *hi - *lo;
    if (!(span > 0.0)) continue;
    for (std::size_t j = 0; j < k; ++j) s[i * k + j] = (row[j] - *lo) / span;
  }
  return s;
}

// ---- ContextMatrix ----------------------------------------------------------

ContextMatrix::ContextMatrix(SubVocabulary sub_vocab, std::size_t window,
                             std::vector<double> s)
    : sub_vocab_(std::move(sub_vocab)), window_(window), s_(std::move(s)) {
  if (s_.size() != k() * k()) throw DimensionError("context matrix: S is not K x K");
  for (auto& v : s_) v = static_cast<double>(static_cast<float>(v));
}

ContextMatrix build_context_matrix(std::span<const PackedSequence> sequences,
                                   const SubVocabulary& sub_vocab, std::size_t window) {
  const CountMatrix counts = count_cooccurrence(sequences, sub_vocab, window);
  return ContextMatrix(sub_vocab, window, scale_rows(normalize(counts), counts.k));
}

void ContextMatrix::save(std::ostream& out) const {
  bin::write_magic(out, kMagic);
  bin::write_le<std::uint32_t>(out, kVersion);
  bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(k()));
  bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(window_));
  for (auto id : sub_vocab_.ids()) bin::write_le<std::uint32_t>(out, id);
  for (double v : s_) bin::write_le<float>(out, static_cast<float>(v));
}

void ContextMatrix::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write context matrix: " + path.string());
  save(out);
  if (!out) throw FormatError("write failed: " + path.string());
}

ContextMatrix ContextMatrix::load(std::istream& in) {
  bin::expect_magic(in, kMagic);
  bin::expect_version(in, kVersion, "context matrix");
  const auto k = bin::read_le<std::uint32_t>(in, "K");
  const auto window = bin::read_le<std::uint32_t>(in, "window");
  if (k > 65536) throw FormatError("context matrix: implausible K " + std::to_string(k));
  std::vector<TokenId> ids(k);
  for (auto& id : ids) id = bin::read_le<std::uint32_t>(in, "token ids");
  std::vector<double> s(static_cast<std::size_t>(k) * k);
  for (auto& v : s) {
    const float f = bin::read_le<float>(in, "S values");
    if (!(f >= 0.0f && f <= 1.0f)) {
      throw FormatError("context matrix: S entry outside [0, 1]");
    }
    v = f;
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("context matrix: trailing bytes after S");
  }
  return ContextMatrix(SubVocabulary(std::move(ids)), window, std::move(s));
}

ContextMatrix ContextMatrix::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read context matrix: " + path.string());
  return load(in);
}

std::optional<std::vector<double>> fetch_context_vector(const ContextMatrix& context,
                                                        TokenId token,
                                                        std::span<const TokenId> sentence) {
  const auto row = context.sub_vocab().index_of(token);
  if (!row) return std::nullopt;
  std::vector<double> out(sentence.size(), 0.0);
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    if (const auto col = context.sub_vocab().index_of(sentence[i])) {
      out[i] = context.at(*row, *col);
    }
  }
  return out;
}

}  // namespace mpa
