// SPDX-License-Identifier: Apache-2.0
#include "mpa/eval.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "mpa/error.hpp"
#include "mpa/rng.hpp"

namespace mpa {

using json = nlohmann::json;

namespace {

constexpr double kFrequentThreshold = 0.5;

std::size_t argmax_row(const Tensor& t, std::size_t r) {
  const auto row = t.data().subspan(r * t.cols(), t.cols());
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

const Model& mlm_model(const TrainConfig& config, const Model* generator, const Model& main) {
  if (config.uses_generator()) {
    if (generator == nullptr) throw ContractError("eval: electra paths need the generator");
    return *generator;
  }
  return main;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

double balanced(std::size_t hit_a, std::size_t n_a, std::size_t hit_b, std::size_t n_b) {
  if (n_a == 0) return static_cast<double>(hit_b) / static_cast<double>(n_b);
  if (n_b == 0) return static_cast<double>(hit_a) / static_cast<double>(n_a);
  return 0.5 * (static_cast<double>(hit_a) / static_cast<double>(n_a) +
                static_cast<double>(hit_b) / static_cast<double>(n_b));
}

}  // namespace

std::vector<TrapExample> encode_traps(const std::vector<SynthDocument>& docs,
                                      const TrapCorpusSpec& spec, const Vocabulary& vocab) {
  std::vector<TrapExample> out;
  out.reserve(docs.size());
  for (const auto& doc : docs) {
    if (doc.kind != DocumentKind::Trap) throw ContractError("encode_traps: document is not a trap");
    const PlantedPattern& p = spec.patterns.at(doc.pattern);
    TrapExample ex;
    ex.ids.push_back(kCls);
    for (const auto& w : doc.words) ex.ids.push_back(vocab.id(w));
    ex.slot = doc.slot + 1;
    ex.partner_position = doc.partner_position + 1;
    ex.cue_position = doc.cue_position + 1;
    ex.answer = vocab.id(p.answer);
    ex.distractor = vocab.id(p.distractor);
    ex.partner = vocab.id(p.partner);
    ex.cue = vocab.id(p.cue);
    out.push_back(std::move(ex));
  }
  return out;
}

AttentionMass partition_attention(std::span<const double> probs, std::span<const TokenId> keys,
                                  TokenId query, const ContextMatrix& context) {
  AttentionMass m;
  const auto row = context.sub_vocab().index_of(query);
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const auto col = context.sub_vocab().index_of(keys[j]);
    if (!row || !col) {
      m.other += probs[j];
    } else if (context.at(*row, *col) >= kFrequentThreshold) {
      m.frequent += probs[j];
    } else {
      m.rare += probs[j];
    }
  }
  return m;
}

std::string EvalReport::to_json() const {
  json j{{"masked_positions", masked_positions},
         {"masked_accuracy", optional_json(masked_accuracy)},
         {"perplexity", optional_json(perplexity)},
         {"rtd_accuracy", optional_json(rtd_accuracy)}};
  if (trap) {
    j["trap"] = {{"examples", trap->examples},
                 {"cloze_accuracy", optional_json(trap->cloze_accuracy)},
                 {"rtd_accuracy", optional_json(trap->rtd_accuracy)},
                 {"cue_mass", trap->cue_mass},
                 {"partner_mass", trap->partner_mass},
                 {"frequent_mass", trap->partition.frequent},
                 {"rare_mass", trap->partition.rare},
                 {"other_mass", trap->partition.other}};
  }
  return j.dump();
}

EvalReport eval_probe(const TrainConfig& config, const Model* generator, const Model& main,
                      const std::vector<PackedSequence>& heldout, const ContextMatrix* context,
                      const std::vector<TrapExample>* traps, const EvalOptions& options) {
  NoGradGuard no_grad;
  const Model& mlm = mlm_model(config, generator, main);
  Rng mask_rng(options.seed);
  Rng sample_rng(Rng::derive(options.seed, 1));
  MaskingConfig masking;
  masking.mask_prob = config.mask_prob;
  masking.policy = config.uses_generator() ? MaskPolicy::ElectraGen : MaskPolicy::Bert;

  EvalReport report;
  std::size_t correct = 0, hit_replaced = 0, n_replaced = 0, hit_original = 0, n_original = 0;
  double ce_sum = 0.0;
  const std::size_t total = std::min(heldout.size(), options.max_sequences);
  const std::size_t step = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t start = 0; start < total; start += step) {
    std::vector<std::vector<TokenId>> seqs;
    for (std::size_t i = start; i < std::min(total, start + step); ++i) seqs.push_back(heldout[i].ids);
    MaskedBatch batch = apply_mlm_mask(pad_batch(seqs), masking, mlm.config.vocab, mask_rng);
    const MaskedRows masked = masked_rows(batch);
    if (!masked.rows.empty()) {
      const auto out = forward(mlm, batch.x_masked);
      const Tensor logits = token_logits(mlm, out, masked.rows);
      ce_sum += cross_entropy_from_logits(logits, masked.targets).item() *
                static_cast<double>(masked.rows.size());
      for (std::size_t r = 0; r < masked.rows.size(); ++r)
        correct += argmax_row(logits, r) == masked.targets[r];
      report.masked_positions += masked.rows.size();
      if (config.uses_generator()) sample_replacements(logits, batch, sample_rng);
    }
    if (config.uses_generator()) {
      const auto out = forward(main, batch.x_replaced);
      const auto scored = discriminator_rows(batch.x_replaced, batch.x);
      if (scored.rows.empty()) continue;
      const Tensor z = realness_logits(main, out, scored.rows);
      for (std::size_t r = 0; r < scored.rows.size(); ++r) {
        const bool says_original = z.data()[r] > 0.0;
        if (scored.labels[r] == 1.0) {
          ++n_original;
          hit_original += says_original;
        } else {
          ++n_replaced;
          hit_replaced += !says_original;
        }
      }
    }
  }
  if (report.masked_positions > 0) {
    const double n = static_cast<double>(report.masked_positions);
    report.masked_accuracy = static_cast<double>(correct) / n;
    report.perplexity = std::exp(ce_sum / n);
  }
  if (n_original + n_replaced > 0)
    report.rtd_accuracy = balanced(hit_replaced, n_replaced, hit_original, n_original);
  if (traps != nullptr && !traps->empty())
    report.trap = probe_traps(config, generator, main, *traps, context);
  return report;
}

TrapReport probe_traps(const TrainConfig& config, const Model* generator, const Model& main,
                       const std::vector<TrapExample>& traps, const ContextMatrix* context) {
  NoGradGuard no_grad;
  TrapReport report;
  report.examples = traps.size();
  if (traps.empty()) return report;
  const Model& mlm = mlm_model(config, generator, main);

  std::vector<std::vector<TokenId>> masked_inputs, original_inputs, substituted_inputs;
  for (const auto& ex : traps) {
    auto m = ex.ids;
    m[ex.slot] = kMask;
    masked_inputs.push_back(std::move(m));
    original_inputs.push_back(ex.ids);
    auto s = ex.ids;
    s[ex.slot] = ex.distractor;
    substituted_inputs.push_back(std::move(s));
  }
  const Batch masked = pad_batch(masked_inputs);
  const Batch original = pad_batch(original_inputs);
  const Batch substituted = pad_batch(substituted_inputs);
  const std::size_t n = masked.front().size();
  std::vector<std::size_t> slot_rows;
  for (std::size_t i = 0; i < traps.size(); ++i) slot_rows.push_back(i * n + traps[i].slot);

  {
    const auto out = forward(mlm, masked);
    const Tensor logits = token_logits(mlm, out, slot_rows);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < traps.size(); ++i) hits += argmax_row(logits, i) == traps[i].answer;
    report.cloze_accuracy = static_cast<double>(hits) / static_cast<double>(traps.size());
  }

  if (config.uses_generator()) {
    const Tensor z_orig = realness_logits(main, forward(main, original), slot_rows);
    const Tensor z_sub = realness_logits(main, forward(main, substituted), slot_rows);
    std::size_t hit_orig = 0, hit_sub = 0;
    for (std::size_t i = 0; i < traps.size(); ++i) {
      hit_orig += z_orig.data()[i] > 0.0;
      hit_sub += z_sub.data()[i] <= 0.0;
    }
    report.rtd_accuracy = balanced(hit_sub, traps.size(), hit_orig, traps.size());
  }

  // The main model reads x^r on electra paths and x^m on bert paths.
  const Batch& keys = config.uses_generator() ? substituted : masked;
  ForwardOptions opts;
  opts.keep_attention = true;
  const auto out = forward(main, keys, opts);
  std::size_t records = 0;
  for (const auto& rec : out.attention) {
    if (rec.layer >= main.config.guided_layers || rec.head >= main.config.guided_heads) continue;
    const TrapExample& ex = traps[rec.item];
    const auto row = rec.probs.data().subspan(ex.slot * n, n);
    report.cue_mass += row[ex.cue_position];
    report.partner_mass += row[ex.partner_position];
    if (context != nullptr) {
      const auto m = partition_attention(row, keys[rec.item], ex.distractor, *context);
      report.partition.frequent += m.frequent;
      report.partition.rare += m.rare;
      report.partition.other += m.other;
    }
    ++records;
  }
  if (records > 0) {
    const double r = static_cast<double>(records);
    report.cue_mass /= r;
    report.partner_mass /= r;
    report.partition.frequent /= r;
    report.partition.rare /= r;
    report.partition.other /= r;
  }
  return report;
}

}  // namespace mpa
