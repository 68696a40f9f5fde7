// SPDX-License-Identifier: Apache-2.0
//
// Post-norm transformer encoder with learned positions. The same body serves
// as MLM generator (output projection tied to the token embeddings) and as
// replaced-token discriminator (per-position linear-to-scalar).
#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mpa/corpus.hpp"
#include "mpa/tensor.hpp"

namespace mpa {

class Rng;

enum class Activation : std::uint32_t { Gelu = 0, Relu = 1 };
enum class HeadKind : std::uint32_t { Generator = 0, Discriminator = 1 };

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t hidden = 128;
  std::size_t ffn_dim = 512;
  std::size_t vocab = 2000;
  std::size_t max_len = 128;
  // Guided slots: heads [0, guided_heads) of layers [0, guided_layers).
  std::size_t guided_layers = 0;
  std::size_t guided_heads = 0;
  Activation activation = Activation::Gelu;
  HeadKind head = HeadKind::Generator;

  std::size_t head_dim() const { return hidden / heads; }
  std::size_t guided_slots() const { return guided_layers * guided_heads; }
  // Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::size_t count_params(const ModelConfig& config);

struct LayerParams {
  Tensor wq, wk, wv, wo;        // d x d; head k owns columns [k*dk, (k+1)*dk)
  Tensor ffn_w1, ffn_b1;        // d x f, f
  Tensor ffn_w2, ffn_b2;        // f x d, d
  Tensor ln1_gain, ln1_bias;    // after attention
  Tensor ln2_gain, ln2_bias;    // after the feed-forward block
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Model {
  ModelConfig config;
  Tensor token_embedding;      // V x d
  Tensor position_embedding;   // max_len x d
  std::vector<LayerParams> layers;
  Tensor disc_weight;          // d x 1, discriminator only
  Tensor disc_bias;            // 1, discriminator only

  // Fixed order: embeddings, then per layer wq wk wv wo ffn_w1 ffn_b1 ffn_w2
  // ffn_b2 ln1_gain ln1_bias ln2_gain ln2_bias, then the discriminator head.
  std::vector<NamedTensor> parameters() const;
  Model clone() const;
};

// Weights ~ N(0, 0.02^2) truncated at 2 sigma, layernorm gain 1 / bias 0,
// other biases 0. Deterministic in (config, seed).
Model init_model(const ModelConfig& config, std::uint64_t seed);

struct ForwardOptions {
  double dropout = 0.0;  // attention probabilities and FFN activations
  Rng* rng = nullptr;    // required when dropout > 0
  bool keep_attention = false;
};

struct GuidedSlot {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<Tensor> logits;  // per batch item: pre-softmax a(q, K), N x N
};

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t item = 0;
  Tensor logits;  // pre-softmax, before the padding mask
  Tensor probs;
};

struct ForwardOutput {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  Tensor hidden;                  // (batch * seq_len) x d
  std::vector<GuidedSlot> guided; // exactly guided_layers * guided_heads slots
  std::vector<AttentionRecord> attention;  // filled when keep_attention
};

// batch: equal-length sequences padded with kPad; PAD keys are masked to -inf.
ForwardOutput forward(const Model& model, std::span<const std::vector<TokenId>> batch,
                      const ForwardOptions& options = {});

// Scaled query-key products q K^T / sqrt(d_K).
Tensor attention_logits(const Tensor& queries, const Tensor& keys);

// Rows index the flattened (item * seq_len + position) hidden states.
Tensor token_logits(const Model& model, const ForwardOutput& out,
                    std::span<const std::size_t> rows);
Tensor realness_logits(const Model& model, const ForwardOutput& out,
                       std::span<const std::size_t> rows);

// Single-sequence convenience: full head output for every position.
struct SequenceOutput {
  Tensor token_logits;   // N x V (generator)
  Tensor realness;       // N x 1 (discriminator)
  ForwardOutput encoder;
};
SequenceOutput forward_sequence(const Model& model, std::span<const TokenId> ids,
                                const ForwardOptions& options = {});

// Magic "MPAC", u32 version, ModelConfig as u32 fields, u32 tensor count,
// then per tensor: name, u32 rank, u32 dims, f64 values.
void save_model(const Model& model, std::ostream& out);
Model load_model(std::istream& in);

}  // namespace mpa
