// SPDX-License-Identifier: Apache-2.0
//
// Masking, replacement sampling and the loss terms.
//
//   L_G  mean over masked positions of -log p(x_t | x^m)
//   L_D  mean over scored positions of the realness cross-entropy,
//        D = sigmoid(logit) = P(token is original)
//   g    detach(a(q_t, K)) * (1 - S(t, .))
//   L_A  (a - g)^2, mean over keys, then guided slots, then mispredictions
//   total = L_G + lambda * L_D + gamma * L_A
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mpa/cooccurrence.hpp"
#include "mpa/corpus.hpp"
#include "mpa/model.hpp"
#include "mpa/tensor.hpp"

namespace mpa {

class Rng;

enum class MaskPolicy { Bert, ElectraGen };

struct MaskingConfig {
  double mask_prob = 0.15;
  MaskPolicy policy = MaskPolicy::Bert;
  // Bert policy split of the selected positions; the remainder is kept.
  double mask_token_frac = 0.8;
  double random_token_frac = 0.1;
};

using Batch = std::vector<std::vector<TokenId>>;

struct MaskedBatch {
  Batch x;            // originals
  Batch x_masked;     // x^m
  Batch x_replaced;   // x^r, equals x until sample_replacements runs
  std::vector<std::vector<std::size_t>> mask_positions;  // per item, ascending
  std::vector<std::vector<std::size_t>> mispredictions;  // per item, subset of mask_positions

  std::size_t seq_len() const { return x.empty() ? 0 : x.front().size(); }
  std::size_t mask_count() const;
  std::size_t misprediction_count() const;
};

// Special tokens (PAD, MASK, UNK, CLS) are never selected. Random
// replacements are drawn uniformly from the non-special ids [4, vocab).
MaskedBatch apply_mlm_mask(const Batch& x, const MaskingConfig& config, std::size_t vocab,
                           Rng& rng);

// Flattened (item * seq_len + position) rows of the masked positions and
// their ground-truth tokens.
struct MaskedRows {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> targets;
};
MaskedRows masked_rows(const MaskedBatch& batch);

// Zero scalar (no graph) when there are no masked positions.
Tensor generator_loss(const Tensor& logits_at_masked, std::span<const std::size_t> targets);

// Fills x_replaced and mispredictions from the (detached) generator logits at
// masked_rows(batch). Sampling is at temperature 1 unless argmax is set.
void sample_replacements(const Tensor& logits_at_masked, MaskedBatch& batch, Rng& rng,
                         bool argmax = false);

// Rows scored by the discriminator: every position except CLS and PAD.
// Label 1 = original, 0 = replaced.
struct DiscriminatorRows {
  std::vector<std::size_t> rows;
  std::vector<double> labels;
};
DiscriminatorRows discriminator_rows(const Batch& input, const Batch& original);

Tensor discriminator_loss(const Tensor& realness_logits, std::span<const double> labels);

// Elementwise logit * (1 - S). PAD keys keep the logit.
std::vector<double> guidance_target(std::span<const double> logit_row,
                                    std::span<const double> context,
                                    std::span<const TokenId> keys);

enum class GuidanceSource { Mispredicted, GroundTruth, Constant };

struct GuidanceConfig {
  GuidanceSource source = GuidanceSource::Mispredicted;
  double constant = 0.9;
};

// One guided query row: misprediction (item, position) with its context
// vector over the keys of the main model's input.
struct GuidanceRow {
  std::size_t item = 0;
  std::size_t position = 0;
  std::vector<double> context;
};

// Mispredictions whose query token falls outside the sub-vocabulary are
// dropped. `keys` is what the main model reads (x^r, or x^m for bert-mpa).
std::vector<GuidanceRow> collect_guidance(const MaskedBatch& batch, const Batch& keys,
                                          const ContextMatrix& context,
                                          const GuidanceConfig& config);

// Numeric g for every (slot, row, key), slot-major.
struct GuidanceTargets {
  std::size_t slots = 0;
  std::size_t rows = 0;
  std::size_t keys = 0;
  std::vector<double> values;
};
GuidanceTargets guidance_targets(const ForwardOutput& out, std::span<const GuidanceRow> rows,
                                 const Batch& keys);

// L_A against fixed numeric targets.
Tensor mpa_loss_with_targets(const ForwardOutput& out, std::span<const GuidanceRow> rows,
                             const GuidanceTargets& targets, const Batch& keys);

// L_A with g recomputed from the current logits.
Tensor mpa_loss(const ForwardOutput& out, std::span<const GuidanceRow> rows, const Batch& keys);

// Undefined terms count as absent. Negative weights throw ConfigError.
Tensor total_loss(const Tensor& l_g, const Tensor& l_d, const Tensor& l_a, double lambda,
                  double gamma);

}  // namespace mpa
