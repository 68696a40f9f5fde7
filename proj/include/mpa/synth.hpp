// SPDX-License-Identifier: Apache-2.0
//
// Planted-pattern corpora. Each pattern plants a frequently co-occurring pair
// (distractor, partner) and a rare "trap" context in which the partner appears
// next to a cue word, and the true fill is the answer rather than the
// distractor. Models that rely on the pair predict the distractor in traps.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mpa {

struct PlantedPattern {
  std::string distractor;  // frequent fill, wrong in traps
  std::string partner;     // co-occurs with the distractor
  std::string cue;         // rare word that implies the answer
  std::string answer;      // correct fill in traps
};

struct TrapCorpusSpec {
  std::vector<PlantedPattern> patterns = default_patterns();
  std::size_t documents = 4000;
  std::size_t filler_types = 120;
  std::size_t sentence_length = 12;
  // Fractions of documents of each kind; the rest is filler only. Counts are
  // rounded up, so the realised rates are never below these.
  double pair_rate = 0.30;    // distractor + partner
  double answer_rate = 0.10;  // answer + cue
  double trap_rate = 0.06;    // answer + cue + partner
  // Planted words sit within this many positions of the slot.
  std::size_t max_gap = 3;

  static std::vector<PlantedPattern> default_patterns();
  void validate() const;
};

enum class DocumentKind { Filler, Pair, Answer, Trap };

struct SynthDocument {
  DocumentKind kind = DocumentKind::Filler;
  std::vector<std::string> words;
  std::size_t pattern = 0;
  std::size_t slot = 0;               // distractor or answer position
  std::size_t partner_position = 0;   // Pair and Trap
  std::size_t cue_position = 0;       // Answer and Trap
};

// Deterministic in (spec, seed).
std::vector<SynthDocument> synth_documents(const TrapCorpusSpec& spec, std::uint64_t seed);
// One document per line.
std::string synth_corpus(const TrapCorpusSpec& spec, std::uint64_t seed);
// Fresh trap documents for probing; every pattern appears equally often.
std::vector<SynthDocument> synth_traps(const TrapCorpusSpec& spec, std::uint64_t seed,
                                       std::size_t count);
std::string join_words(const std::vector<std::string>& words);

}  // namespace mpa
