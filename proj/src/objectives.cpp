// SPDX-License-Identifier: Apache-2.0
#include "mpa/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "mpa/error.hpp"
#include "mpa/rng.hpp"

namespace mpa {

std::size_t MaskedBatch::mask_count() const {
  std::size_t n = 0;
  for (const auto& m : mask_positions) n += m.size();
  return n;
}

std::size_t MaskedBatch::misprediction_count() const {
  std::size_t n = 0;
  for (const auto& m : mispredictions) n += m.size();
  return n;
}

MaskedBatch apply_mlm_mask(const Batch& x, const MaskingConfig& config, std::size_t vocab,
                           Rng& rng) {
  if (vocab <= kNumSpecials) throw ConfigError("masking: vocabulary has no ordinary tokens");
  MaskedBatch b;
  b.x = x;
  b.x_masked = x;
  b.x_replaced = x;
  b.mask_positions.resize(x.size());
  b.mispredictions.resize(x.size());
  const std::size_t ordinary = vocab - kNumSpecials;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t t = 0; t < x[i].size(); ++t) {
      if (is_special(x[i][t])) continue;
      if (!(rng.uniform() < config.mask_prob)) continue;
      b.mask_positions[i].push_back(t);
      TokenId& slot = b.x_masked[i][t];
      if (config.policy == MaskPolicy::ElectraGen) {
        slot = kMask;
        continue;
      }
      const double u = rng.uniform();
      if (u < config.mask_token_frac) {
        slot = kMask;
      } else if (u < config.mask_token_frac + config.random_token_frac) {
        slot = static_cast<TokenId>(kNumSpecials + rng.below(ordinary));
      }
    }
  }
  return b;
}

MaskedRows masked_rows(const MaskedBatch& batch) {
  MaskedRows r;
  const std::size_t n = batch.seq_len();
  for (std::size_t i = 0; i < batch.mask_positions.size(); ++i) {
    for (auto t : batch.mask_positions[i]) {
      r.rows.push_back(i * n + t);
      r.targets.push_back(batch.x[i][t]);
    }
  }
  return r;
}

Tensor generator_loss(const Tensor& logits_at_masked, std::span<const std::size_t> targets) {
  if (targets.empty()) return Tensor::scalar(0.0);
  return cross_entropy_from_logits(logits_at_masked, targets);
}

void sample_replacements(const Tensor& logits_at_masked, MaskedBatch& batch, Rng& rng,
                         bool argmax) {
  const MaskedRows masked = masked_rows(batch);
  if (masked.rows.empty()) return;
  if (logits_at_masked.rank() != 2 || logits_at_masked.rows() != masked.rows.size()) {
    throw DimensionError("sample_replacements: expected logits " +
                         std::to_string(masked.rows.size()) + "xV, got " +
                         shape_string(logits_at_masked.shape()));
  }
  const std::size_t v = logits_at_masked.cols();
  const auto data = logits_at_masked.data();
  std::vector<double> probs(v);
  std::size_t r = 0;
  for (std::size_t i = 0; i < batch.mask_positions.size(); ++i) {
    batch.mispredictions[i].clear();
    for (auto t : batch.mask_positions[i]) {
      const double* row = data.data() + r * v;
      std::size_t pick = 0;
      if (argmax) {
        pick = static_cast<std::size_t>(std::max_element(row, row + v) - row);
      } else {
        const double hi = *std::max_element(row, row + v);
        double total = 0.0;
        for (std::size_t j = 0; j < v; ++j) total += probs[j] = std::exp(row[j] - hi);
        double u = rng.uniform() * total;
        pick = v - 1;
        for (std::size_t j = 0; j < v; ++j) {
          u -= probs[j];
          if (u < 0.0) {
            pick = j;
            break;
          }
        }
      }
      batch.x_replaced[i][t] = static_cast<TokenId>(pick);
      if (batch.x_replaced[i][t] != batch.x[i][t]) batch.mispredictions[i].push_back(t);
      ++r;
    }
  }
}

DiscriminatorRows discriminator_rows(const Batch& input, const Batch& original) {
  DiscriminatorRows d;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const std::size_t n = input[i].size();
    for (std::size_t t = 0; t < n; ++t) {
      const TokenId id = input[i][t];
      if (id == kCls || id == kPad) continue;
      d.rows.push_back(i * n + t);
      d.labels.push_back(id == original[i][t] ? 1.0 : 0.0);
    }
  }
  return d;
}

Tensor discriminator_loss(const Tensor& realness_logits, std::span<const double> labels) {
  if (labels.empty()) return Tensor::scalar(0.0);
  return bce_with_logits(realness_logits, labels);
}

std::vector<double> guidance_target(std::span<const double> logit_row,
                                    std::span<const double> context,
                                    std::span<const TokenId> keys) {
  if (logit_row.size() != context.size() || logit_row.size() != keys.size()) {
    throw DimensionError("guidance_target: logits, context and keys differ in length");
  }
  std::vector<double> g(logit_row.size());
  for (std::size_t j = 0; j < g.size(); ++j)
    g[j] = keys[j] == kPad ? logit_row[j] : logit_row[j] * (1.0 - context[j]);
  return g;
}

std::vector<GuidanceRow> collect_guidance(const MaskedBatch& batch, const Batch& keys,
                                          const ContextMatrix& context,
                                          const GuidanceConfig& config) {
  std::vector<GuidanceRow> out;
  for (std::size_t i = 0; i < batch.mispredictions.size(); ++i) {
    for (auto t : batch.mispredictions[i]) {
      const TokenId query = config.source == GuidanceSource::GroundTruth ? batch.x[i][t]
                                                                         : batch.x_replaced[i][t];
      auto vec = fetch_context_vector(context, query, keys[i]);
      if (!vec) continue;
      if (config.source == GuidanceSource::Constant) {
        for (std::size_t j = 0; j < vec->size(); ++j)
          (*vec)[j] = context.contains(keys[i][j]) ? config.constant : 0.0;
      }
      out.push_back({i, t, std::move(*vec)});
    }
  }
  return out;
}

namespace {

std::size_t live_keys(std::span<const TokenId> keys) {
  std::size_t n = 0;
  for (auto id : keys) n += id != kPad;
  return n;
}

}  // namespace

GuidanceTargets guidance_targets(const ForwardOutput& out, std::span<const GuidanceRow> rows,
                                 const Batch& keys) {
  GuidanceTargets g;
  g.slots = out.guided.size();
  g.rows = rows.size();
  g.keys = out.seq_len;
  g.values.reserve(g.slots * g.rows * g.keys);
  for (const auto& slot : out.guided) {
    for (const auto& r : rows) {
      const auto logits = slot.logits.at(r.item).data().subspan(r.position * g.keys, g.keys);
      const auto row = guidance_target(logits, r.context, keys[r.item]);
      g.values.insert(g.values.end(), row.begin(), row.end());
    }
  }
  return g;
}

Tensor mpa_loss_with_targets(const ForwardOutput& out, std::span<const GuidanceRow> rows,
                             const GuidanceTargets& targets, const Batch& keys) {
  if (rows.empty() || out.guided.empty()) return Tensor::scalar(0.0);
  const std::size_t n = out.seq_len;
  if (targets.slots != out.guided.size() || targets.rows != rows.size() || targets.keys != n) {
    throw DimensionError("mpa_loss: targets do not match the guided rows");
  }
  // Group rows by batch item so each (slot, item) is one gather.
  std::vector<std::vector<std::size_t>> by_item(out.batch);
  for (std::size_t r = 0; r < rows.size(); ++r) by_item.at(rows[r].item).push_back(r);

  Tensor acc;
  for (std::size_t s = 0; s < out.guided.size(); ++s) {
    for (std::size_t item = 0; item < out.batch; ++item) {
      const auto& members = by_item[item];
      if (members.empty()) continue;
      std::vector<std::size_t> positions;
      std::vector<double> g;
      for (auto r : members) {
        positions.push_back(rows[r].position);
        const auto* src = targets.values.data() + (s * targets.rows + r) * n;
        g.insert(g.end(), src, src + n);
      }
      const Tensor picked = gather_rows(out.guided[s].logits[item], positions);
      const Tensor diff = sub(picked, Tensor::from_data({members.size(), n}, std::move(g)));
      const double keys_live = static_cast<double>(std::max<std::size_t>(1, live_keys(keys[item])));
      const Tensor term = scale(sum(mul(diff, diff)), 1.0 / keys_live);
      acc = acc.defined() ? add(acc, term) : term;
    }
  }
  return scale(acc, 1.0 / static_cast<double>(out.guided.size() * rows.size()));
}

Tensor mpa_loss(const ForwardOutput& out, std::span<const GuidanceRow> rows, const Batch& keys) {
  return mpa_loss_with_targets(out, rows, guidance_targets(out, rows, keys), keys);
}

Tensor total_loss(const Tensor& l_g, const Tensor& l_d, const Tensor& l_a, double lambda,
                  double gamma) {
  if (lambda < 0.0 || gamma < 0.0) {
    throw ConfigError("loss weights must be non-negative (lambda " + std::to_string(lambda) +
                      ", gamma " + std::to_string(gamma) + ")");
  }
  Tensor total = l_g.defined() ? l_g : Tensor::scalar(0.0);
  if (l_d.defined()) total = add(total, scale(l_d, lambda));
  if (l_a.defined()) total = add(total, scale(l_a, gamma));
  return total;
}

}  // namespace mpa
