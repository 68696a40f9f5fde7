// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mpa/cooccurrence.hpp"
#include "mpa/model.hpp"
#include "mpa/objectives.hpp"
#include "mpa/rng.hpp"

namespace mpa {

enum class TrainMode { Bert, Electra, BertMpa, ElectraMpa, MpaGround, MpaConstant };
enum class Backbone { Bert, Electra };

std::string to_string(TrainMode mode);
TrainMode parse_mode(const std::string& name);  // ConfigError on unknown names

struct TrainConfig {
  TrainMode mode = TrainMode::Electra;
  Backbone ablation_backbone = Backbone::Electra;  // mpa-ground / mpa-constant only
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t max_len = 128;
  double lr_peak = 1e-4;
  std::size_t warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double dropout = 0.1;
  double lambda = 50.0;
  double gamma = 1.0;
  std::optional<double> constant_c;  // default 0.9 (electra) / 0.8 (bert)
  double mask_prob = 0.15;
  bool argmax_replacements = false;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;
  std::size_t eval_every = 0;
  std::size_t log_every = 1;
  ModelConfig main;       // discriminator (electra paths) or the MLM model (bert paths)
  ModelConfig generator;  // electra paths only

  Backbone backbone() const;
  bool uses_mpa() const { return mode != TrainMode::Bert && mode != TrainMode::Electra; }
  bool uses_generator() const { return backbone() == Backbone::Electra; }
  double constant() const;
  // Fills derived model fields (vocab, max_len, head kinds) and checks
  // invariants. Throws ConfigError.
  void finalize(std::size_t vocab_size);
  void validate() const;
};

// Desk-scale defaults for a vocabulary of the given size.
TrainConfig default_train_config(std::size_t vocab_size);

// JSON round-trip; unknown keys are rejected.
std::string config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const std::string& text, const TrainConfig& base);

// Linear 0 -> peak over warmup, then linear peak -> 0 at config.steps.
double lr_schedule(std::size_t step, const TrainConfig& config);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
};

// Bias-corrected Adam with decoupled weight decay (rate * wd * param).
// Throws NumericError naming the first tensor with a non-finite gradient.
void adam_step(std::span<const NamedTensor> params, AdamState& state, double rate,
               const TrainConfig& config);

struct LossTerms {
  Tensor l_g, l_d, l_a, total;
  std::size_t guided_rows = 0;
  GuidanceTargets targets;
};

struct LossRngs {
  Rng* sample = nullptr;        // null keeps batch.x_replaced as is
  Rng* gen_dropout = nullptr;
  Rng* main_dropout = nullptr;
};

// One full objective evaluation on a masked batch. `frozen` substitutes fixed
// numeric guidance targets for the recomputed ones.
LossTerms compute_losses(const TrainConfig& config, const Model* generator, const Model& main,
                         MaskedBatch& batch, const ContextMatrix* context, const LossRngs& rngs,
                         const GuidanceTargets* frozen = nullptr);

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double l_g = 0.0;
  double l_d = 0.0;
  double l_a = 0.0;
  double total = 0.0;
  double misprediction_rate = 0.0;
  std::string to_json() const;
};

// Right-pads each sequence with PAD to the longest one.
Batch pad_batch(const std::vector<std::vector<TokenId>>& seqs);

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<PackedSequence> data,
          std::optional<ContextMatrix> context = std::nullopt);

  StepMetrics step();
  // Runs to config.steps; the callback returns false to stop early.
  void run(const std::function<bool(const StepMetrics&)>& on_step = {});

  std::size_t step_count() const { return step_; }
  const TrainConfig& config() const { return config_; }
  const Model& main() const { return main_; }
  const Model* generator() const { return config_.uses_generator() ? &generator_ : nullptr; }
  const ContextMatrix* context() const { return context_ ? &*context_ : nullptr; }
  std::vector<NamedTensor> all_parameters() const;

  // Magic "MPAT": config JSON, step, models, Adam moments, rng states, data
  // cursor. Loading requires the same config and data size.
  void save_state(std::ostream& out) const;
  void load_state(std::istream& in);
  void save_state(const std::string& path) const;
  void load_state(const std::string& path);

 private:
  Batch next_batch();

  TrainConfig config_;
  std::vector<PackedSequence> data_;
  std::optional<ContextMatrix> context_;
  Model main_;
  Model generator_;
  AdamState adam_;
  std::size_t step_ = 0;
  Rng data_rng_, mask_rng_, sample_rng_, gen_dropout_rng_, main_dropout_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace mpa
