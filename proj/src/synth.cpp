// SPDX-License-Identifier: Apache-2.0
#include "mpa/synth.hpp"

#include <algorithm>
#include <cmath>

#include "mpa/error.hpp"
#include "mpa/rng.hpp"

namespace mpa {

namespace {

class FillerSampler {
 public:
  explicit FillerSampler(std::size_t types) {
    double total = 0.0;
    for (std::size_t r = 0; r < types; ++r) {
      total += 1.0 / static_cast<double>(r + 1);
      cumulative_.push_back(total);
    }
    for (auto& c : cumulative_) c /= total;
  }

  std::string draw(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    const auto rank = std::min<std::size_t>(it - cumulative_.begin(), cumulative_.size() - 1);
    return "w" + std::to_string(rank);
  }

 private:
  std::vector<double> cumulative_;  // Zipf(1)
};

// Picks a free position within max_gap of slot.
std::size_t near_slot(std::size_t slot, std::size_t length, std::size_t max_gap,
                      const std::vector<bool>& used, Rng& rng) {
  std::vector<std::size_t> candidates;
  const std::size_t lo = slot >= max_gap ? slot - max_gap : 0;
  const std::size_t hi = std::min(length - 1, slot + max_gap);
  for (std::size_t p = lo; p <= hi; ++p)
    if (!used[p]) candidates.push_back(p);
  if (candidates.empty()) throw ConfigError("synth: max_gap too small for planted words");
  return candidates[rng.below(candidates.size())];
}

SynthDocument make_document(const TrapCorpusSpec& spec, const FillerSampler& fillers,
                            DocumentKind kind, std::size_t pattern_index, Rng& rng) {
  const std::size_t n = spec.sentence_length;
  SynthDocument doc;
  doc.kind = kind;
  doc.pattern = pattern_index;
  doc.words.resize(n);
  for (auto& w : doc.words) w = fillers.draw(rng);
  if (kind == DocumentKind::Filler) return doc;

  const auto& p = spec.patterns[pattern_index];
  std::vector<bool> used(n, false);
  doc.slot = rng.below(n);
  used[doc.slot] = true;
  doc.words[doc.slot] = kind == DocumentKind::Pair ? p.distractor : p.answer;
  if (kind == DocumentKind::Pair || kind == DocumentKind::Trap) {
    doc.partner_position = near_slot(doc.slot, n, spec.max_gap, used, rng);
    used[doc.partner_position] = true;
    doc.words[doc.partner_position] = p.partner;
  }
  if (kind == DocumentKind::Answer || kind == DocumentKind::Trap) {
    doc.cue_position = near_slot(doc.slot, n, spec.max_gap, used, rng);
    used[doc.cue_position] = true;
    doc.words[doc.cue_position] = p.cue;
  }
  return doc;
}

std::size_t quota(double rate, std::size_t documents) {
  return static_cast<std::size_t>(std::ceil(rate * static_cast<double>(documents) - 1e-9));
}

}  // namespace

std::vector<PlantedPattern> TrapCorpusSpec::default_patterns() {
  return {
      {"bedroom", "bed", "draft", "study"},
      {"beach", "sand", "ledger", "office"},
      {"rain", "umbrella", "verdict", "court"},
      {"bread", "butter", "chisel", "workshop"},
  };
}

void TrapCorpusSpec::validate() const {
  if (patterns.empty()) throw ConfigError("synth: at least one planted pattern required");
  if (sentence_length < 4) throw ConfigError("synth: sentence_length must be at least 4");
  if (max_gap < 2) throw ConfigError("synth: max_gap must be at least 2");
  for (double r : {pair_rate, answer_rate, trap_rate}) {
    if (r < 0.0 || r > 1.0) throw ConfigError("synth: rates must lie in [0, 1]");
  }
  if (quota(pair_rate, documents) + quota(answer_rate, documents) +
          quota(trap_rate, documents) >
      documents) {
    throw ConfigError("synth: document rates sum above 1");
  }
}

std::vector<SynthDocument> synth_documents(const TrapCorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const FillerSampler fillers(spec.filler_types);

  std::vector<DocumentKind> kinds(spec.documents, DocumentKind::Filler);
  std::size_t next = 0;
  for (auto [kind, rate] : {std::pair{DocumentKind::Pair, spec.pair_rate},
                            std::pair{DocumentKind::Answer, spec.answer_rate},
                            std::pair{DocumentKind::Trap, spec.trap_rate}}) {
    for (std::size_t i = 0; i < quota(rate, spec.documents); ++i) kinds[next++] = kind;
  }
  for (std::size_t i = kinds.size(); i > 1; --i) std::swap(kinds[i - 1], kinds[rng.below(i)]);

  std::vector<SynthDocument> docs;
  docs.reserve(spec.documents);
  for (auto kind : kinds) {
    docs.push_back(make_document(spec, fillers, kind, rng.below(spec.patterns.size()), rng));
  }
  return docs;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string line;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) line.push_back(' ');
    line += words[i];
  }
  return line;
}

std::string synth_corpus(const TrapCorpusSpec& spec, std::uint64_t seed) {
  std::string text;
  for (const auto& doc : synth_documents(spec, seed)) {
    text += join_words(doc.words);
    text.push_back('\n');
  }
  return text;
}

std::vector<SynthDocument> synth_traps(const TrapCorpusSpec& spec, std::uint64_t seed,
                                       std::size_t count) {
  spec.validate();
  Rng rng(seed);
  const FillerSampler fillers(spec.filler_types);
  std::vector<SynthDocument> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(make_document(spec, fillers, DocumentKind::Trap,
                                i % spec.patterns.size(), rng));
  }
  return out;
}

}  // namespace mpa
