// SPDX-License-Identifier: Apache-2.0
//
// Held-out probes: masked-token accuracy / perplexity, replaced-token
// detection, and trap-sentence diagnostics for the planted-pattern corpus.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mpa/cooccurrence.hpp"
#include "mpa/corpus.hpp"
#include "mpa/model.hpp"
#include "mpa/synth.hpp"
#include "mpa/trainer.hpp"

namespace mpa {

struct TrapExample {
  std::vector<TokenId> ids;  // CLS + document, answer at the slot
  std::size_t slot = 0;
  std::size_t partner_position = 0;
  std::size_t cue_position = 0;
  TokenId answer = 0, distractor = 0, partner = 0, cue = 0;
};

// Positions shift by one for the leading CLS.
std::vector<TrapExample> encode_traps(const std::vector<SynthDocument>& docs,
                                      const TrapCorpusSpec& spec, const Vocabulary& vocab);

struct AttentionMass {
  double frequent = 0.0;  // keys with S[query][key] >= 0.5
  double rare = 0.0;      // other sub-vocabulary keys
  double other = 0.0;     // specials and keys outside the sub-vocabulary
};

// Partition one softmax row by the context row of `query`.
AttentionMass partition_attention(std::span<const double> probs, std::span<const TokenId> keys,
                                  TokenId query, const ContextMatrix& context);

struct TrapReport {
  std::size_t examples = 0;
  std::optional<double> cloze_accuracy;  // MLM argmax at the masked slot == answer
  std::optional<double> rtd_accuracy;    // balanced: original vs distractor at the slot
  // Guided-head attention at the slot query when the slot holds the
  // misprediction, averaged over guided heads and examples.
  double cue_mass = 0.0;
  double partner_mass = 0.0;
  AttentionMass partition;
};

struct EvalOptions {
  std::size_t max_sequences = 256;
  std::size_t batch_size = 16;
  std::uint64_t seed = 20240607;
};

struct EvalReport {
  std::size_t masked_positions = 0;
  std::optional<double> masked_accuracy;
  std::optional<double> perplexity;
  std::optional<double> rtd_accuracy;  // balanced replaced / original
  std::optional<TrapReport> trap;
  std::string to_json() const;
};

// The MLM head is the generator on electra paths and the main model on bert
// paths. Runs without dropout and without recording gradients.
EvalReport eval_probe(const TrainConfig& config, const Model* generator, const Model& main,
                      const std::vector<PackedSequence>& heldout, const ContextMatrix* context,
                      const std::vector<TrapExample>* traps, const EvalOptions& options = {});

TrapReport probe_traps(const TrainConfig& config, const Model* generator, const Model& main,
                       const std::vector<TrapExample>& traps, const ContextMatrix* context);

}  // namespace mpa
