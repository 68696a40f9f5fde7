// SPDX-License-Identifier: Apache-2.0
#include "mpa/model.hpp"

#include <cmath>
#include <limits>

#include "mpa/binary_io.hpp"
#include "mpa/error.hpp"
#include "mpa/rng.hpp"

namespace mpa {

namespace {

constexpr std::string_view kMagic = "MPAC";
constexpr std::uint32_t kVersion = 1;
constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

std::string layer_name(std::size_t layer, const char* field) {
  return "layer" + std::to_string(layer) + "." + field;
}

Model allocate(const ModelConfig& c) {
  Model m;
  m.config = c;
  const std::size_t d = c.hidden, f = c.ffn_dim;
  m.token_embedding = Tensor::zeros({c.vocab, d}, true);
  m.position_embedding = Tensor::zeros({c.max_len, d}, true);
  for (std::size_t l = 0; l < c.layers; ++l) {
    LayerParams p;
    p.wq = Tensor::zeros({d, d}, true);
    p.wk = Tensor::zeros({d, d}, true);
    p.wv = Tensor::zeros({d, d}, true);
    p.wo = Tensor::zeros({d, d}, true);
    p.ffn_w1 = Tensor::zeros({d, f}, true);
    p.ffn_b1 = Tensor::zeros({f}, true);
    p.ffn_w2 = Tensor::zeros({f, d}, true);
    p.ffn_b2 = Tensor::zeros({d}, true);
    p.ln1_gain = Tensor::full({d}, 1.0, true);
    p.ln1_bias = Tensor::zeros({d}, true);
    p.ln2_gain = Tensor::full({d}, 1.0, true);
    p.ln2_bias = Tensor::zeros({d}, true);
    m.layers.push_back(std::move(p));
  }
  if (c.head == HeadKind::Discriminator) {
    m.disc_weight = Tensor::zeros({d, 1}, true);
    m.disc_bias = Tensor::zeros({1}, true);
  }
  return m;
}

bool is_random_init(const std::string& name) {
  // Matrices get random values; gains, biases stay at their constants.
  return name.find("bias") == std::string::npos && name.find("gain") == std::string::npos &&
         name.find("_b") == std::string::npos;
}

Tensor key_padding_mask(std::span<const TokenId> ids) {
  const std::size_t n = ids.size();
  bool any = false;
  for (auto id : ids) any = any || id == kPad;
  if (!any) return {};
  Tensor mask = Tensor::zeros({n, n});
  auto m = mask.data();
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (ids[j] != kPad) continue;
    for (std::size_t i = 0; i < n; ++i) m[i * n + j] = ninf;
  }
  return mask;
}

}  // namespace

void ModelConfig::validate() const {
  if (heads == 0 || hidden == 0) throw ConfigError("model: heads and hidden must be positive");
  if (hidden % heads != 0) {
    throw ConfigError("model: hidden " + std::to_string(hidden) +
                      " is not divisible by heads " + std::to_string(heads));
  }
  if (vocab <= kNumSpecials) throw ConfigError("model: vocabulary too small");
  if (max_len < 2) throw ConfigError("model: max_len must be at least 2");
  if (ffn_dim == 0) throw ConfigError("model: ffn_dim must be positive");
  if (guided_layers > layers) {
    throw ConfigError("model: guided_layers " + std::to_string(guided_layers) +
                      " exceeds layers " + std::to_string(layers));
  }
  if (guided_heads > heads) {
    throw ConfigError("model: guided_heads " + std::to_string(guided_heads) +
                      " exceeds heads " + std::to_string(heads));
  }
}

std::size_t count_params(const ModelConfig& c) {
  const std::size_t d = c.hidden, f = c.ffn_dim;
  const std::size_t per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
  std::size_t total = c.vocab * d + c.max_len * d + c.layers * per_layer;
  if (c.head == HeadKind::Discriminator) total += d + 1;
  return total;
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"token_embedding", token_embedding});
  out.push_back({"position_embedding", position_embedding});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    out.push_back({layer_name(l, "wq"), p.wq});
    out.push_back({layer_name(l, "wk"), p.wk});
    out.push_back({layer_name(l, "wv"), p.wv});
    out.push_back({layer_name(l, "wo"), p.wo});
    out.push_back({layer_name(l, "ffn_w1"), p.ffn_w1});
    out.push_back({layer_name(l, "ffn_b1"), p.ffn_b1});
    out.push_back({layer_name(l, "ffn_w2"), p.ffn_w2});
    out.push_back({layer_name(l, "ffn_b2"), p.ffn_b2});
    out.push_back({layer_name(l, "ln1_gain"), p.ln1_gain});
    out.push_back({layer_name(l, "ln1_bias"), p.ln1_bias});
    out.push_back({layer_name(l, "ln2_gain"), p.ln2_gain});
    out.push_back({layer_name(l, "ln2_bias"), p.ln2_bias});
  }
  if (config.head == HeadKind::Discriminator) {
    out.push_back({"disc_weight", disc_weight});
    out.push_back({"disc_bias", disc_bias});
  }
  return out;
}

Model Model::clone() const {
  Model copy = allocate(config);
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].tensor.data();
    auto to = dst[i].tensor;
    std::copy(from.begin(), from.end(), to.data().begin());
  }
  return copy;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m = allocate(config);
  Rng rng(seed);
  for (auto& [name, tensor] : m.parameters()) {
    if (!is_random_init(name)) continue;
    auto t = tensor;
    for (auto& v : t.data()) v = rng.truncated_normal(kInitStd, 2.0);
  }
  return m;
}

Tensor attention_logits(const Tensor& queries, const Tensor& keys) {
  const double dk = static_cast<double>(queries.cols());
  return scale(matmul_transposed(queries, keys), 1.0 / std::sqrt(dk));
}

ForwardOutput forward(const Model& model, std::span<const std::vector<TokenId>> batch,
                      const ForwardOptions& options) {
  const ModelConfig& c = model.config;
  if (batch.empty()) throw ContractError("forward: empty batch");
  const std::size_t n = batch.front().size();
  if (n == 0) throw ContractError("forward: empty sequence");
  if (n > c.max_len) {
    throw ContractError("forward: sequence length " + std::to_string(n) +
                        " exceeds max_len " + std::to_string(c.max_len));
  }
  if (options.dropout > 0.0 && options.rng == nullptr) {
    throw ContractError("forward: dropout requires an rng");
  }
  const std::size_t b_count = batch.size();
  const std::size_t dk = c.head_dim();

  std::vector<std::size_t> token_rows, position_rows;
  token_rows.reserve(b_count * n);
  position_rows.reserve(b_count * n);
  std::vector<Tensor> masks;
  for (const auto& seq : batch) {
    if (seq.size() != n) throw ContractError("forward: batch sequences differ in length");
    for (std::size_t i = 0; i < n; ++i) {
      if (seq[i] >= c.vocab) {
        throw IndexError("forward: token id " + std::to_string(seq[i]) +
                         " outside vocabulary of " + std::to_string(c.vocab));
      }
      token_rows.push_back(seq[i]);
      position_rows.push_back(i);
    }
    masks.push_back(key_padding_mask(seq));
  }

  ForwardOutput out;
  out.batch = b_count;
  out.seq_len = n;
  for (std::size_t l = 0; l < c.guided_layers; ++l)
    for (std::size_t h = 0; h < c.guided_heads; ++h) out.guided.push_back({l, h, {}});

  Rng* rng = options.rng;
  const double p_drop = options.dropout;
  Tensor x = add(gather_rows(model.token_embedding, token_rows),
                 gather_rows(model.position_embedding, position_rows));

  for (std::size_t l = 0; l < c.layers; ++l) {
    const LayerParams& p = model.layers[l];
    const Tensor q = matmul(x, p.wq);
    const Tensor k = matmul(x, p.wk);
    const Tensor v = matmul(x, p.wv);
    std::vector<Tensor> items;
    items.reserve(b_count);
    for (std::size_t b = 0; b < b_count; ++b) {
      std::vector<Tensor> heads;
      heads.reserve(c.heads);
      for (std::size_t h = 0; h < c.heads; ++h) {
        const Tensor qh = block(q, b * n, n, h * dk, dk);
        const Tensor kh = block(k, b * n, n, h * dk, dk);
        const Tensor vh = block(v, b * n, n, h * dk, dk);
        const Tensor logits = attention_logits(qh, kh);
        if (l < c.guided_layers && h < c.guided_heads) {
          out.guided[l * c.guided_heads + h].logits.push_back(logits);
        }
        const Tensor probs = softmax_rows(masks[b].defined() ? add(logits, masks[b]) : logits);
        if (options.keep_attention) out.attention.push_back({l, h, b, logits, probs});
        heads.push_back(matmul(p_drop > 0.0 ? dropout(probs, p_drop, *rng) : probs, vh));
      }
      items.push_back(c.heads == 1 ? heads.front() : concat_cols(heads));
    }
    const Tensor attended = matmul(b_count == 1 ? items.front() : concat_rows(items), p.wo);
    x = layernorm(add(x, attended), p.ln1_gain, p.ln1_bias, kLayerNormEps);

    Tensor inner = add_row_vector(matmul(x, p.ffn_w1), p.ffn_b1);
    inner = c.activation == Activation::Gelu ? gelu(inner) : relu(inner);
    if (p_drop > 0.0) inner = dropout(inner, p_drop, *rng);
    const Tensor ffn = add_row_vector(matmul(inner, p.ffn_w2), p.ffn_b2);
    x = layernorm(add(x, ffn), p.ln2_gain, p.ln2_bias, kLayerNormEps);
  }
  out.hidden = x;
  return out;
}

Tensor token_logits(const Model& model, const ForwardOutput& out,
                    std::span<const std::size_t> rows) {
  if (model.config.head != HeadKind::Generator) {
    throw ContractError("token_logits: model has no generator head");
  }
  return matmul_transposed(gather_rows(out.hidden, rows), model.token_embedding);
}

Tensor realness_logits(const Model& model, const ForwardOutput& out,
                       std::span<const std::size_t> rows) {
  if (model.config.head != HeadKind::Discriminator) {
    throw ContractError("realness_logits: model has no discriminator head");
  }
  return add_row_vector(matmul(gather_rows(out.hidden, rows), model.disc_weight),
                        model.disc_bias);
}

SequenceOutput forward_sequence(const Model& model, std::span<const TokenId> ids,
                                const ForwardOptions& options) {
  const std::vector<std::vector<TokenId>> batch{std::vector<TokenId>(ids.begin(), ids.end())};
  SequenceOutput result;
  result.encoder = forward(model, batch, options);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  if (model.config.head == HeadKind::Generator) {
    result.token_logits = token_logits(model, result.encoder, rows);
  } else {
    result.realness = realness_logits(model, result.encoder, rows);
  }
  return result;
}

// ---- checkpoint -----------------------------------------------------------

void save_model(const Model& model, std::ostream& out) {
  const ModelConfig& c = model.config;
  bin::write_magic(out, kMagic);
  bin::write_le<std::uint32_t>(out, kVersion);
  for (std::size_t v : {c.layers, c.heads, c.hidden, c.ffn_dim, c.vocab, c.max_len,
                        c.guided_layers, c.guided_heads}) {
    bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.activation));
  bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.head));
  const auto params = model.parameters();
  bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    bin::write_string(out, name);
    bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto dim : tensor.shape()) bin::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
    for (double v : tensor.data()) bin::write_le<double>(out, v);
  }
}

Model load_model(std::istream& in) {
  bin::expect_magic(in, kMagic);
  bin::expect_version(in, kVersion, "model checkpoint");
  ModelConfig c;
  for (std::size_t* field : {&c.layers, &c.heads, &c.hidden, &c.ffn_dim, &c.vocab, &c.max_len,
                             &c.guided_layers, &c.guided_heads}) {
    *field = bin::read_le<std::uint32_t>(in, "model config");
  }
  const auto activation = bin::read_le<std::uint32_t>(in, "model config");
  const auto head = bin::read_le<std::uint32_t>(in, "model config");
  if (activation > 1 || head > 1) throw FormatError("model checkpoint: bad enum in config");
  c.activation = static_cast<Activation>(activation);
  c.head = static_cast<HeadKind>(head);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model checkpoint: ") + e.what());
  }
  if (count_params(c) > (std::size_t{1} << 31)) throw FormatError("model checkpoint: implausible size");

  Model m = allocate(c);
  auto params = m.parameters();
  const auto stored = bin::read_le<std::uint32_t>(in, "tensor count");
  if (stored != params.size()) {
    throw FormatError("model checkpoint: " + std::to_string(stored) + " tensors, config needs " +
                      std::to_string(params.size()));
  }
  for (auto& [name, tensor] : params) {
    const std::string got = bin::read_string(in, "tensor name");
    if (got != name) throw FormatError("model checkpoint: expected tensor " + name + ", found " + got);
    const auto rank = bin::read_le<std::uint32_t>(in, "tensor rank");
    Shape shape(rank);
    for (auto& dim : shape) dim = bin::read_le<std::uint32_t>(in, "tensor shape");
    if (shape != tensor.shape()) {
      throw FormatError("model checkpoint: tensor " + name + " has shape " + shape_string(shape) +
                        ", config needs " + shape_string(tensor.shape()));
    }
    for (auto& v : tensor.data()) v = bin::read_le<double>(in, "tensor values");
  }
  return m;
}

}  // namespace mpa
