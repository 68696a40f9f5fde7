// SPDX-License-Identifier: Apache-2.0
#include "mpa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mpa/binary_io.hpp"
#include "mpa/error.hpp"

namespace mpa {

using json = nlohmann::json;

namespace {

constexpr std::string_view kStateMagic = "MPAT";
constexpr std::uint32_t kStateVersion = 1;

enum Stream : std::uint64_t {
  kStreamInitMain = 1,
  kStreamInitGen,
  kStreamData,
  kStreamMask,
  kStreamSample,
  kStreamGenDrop,
  kStreamMainDrop
};

const std::vector<std::pair<TrainMode, std::string>>& mode_names() {
  static const std::vector<std::pair<TrainMode, std::string>> names{
      {TrainMode::Bert, "bert"},           {TrainMode::Electra, "electra"},
      {TrainMode::BertMpa, "bert-mpa"},    {TrainMode::ElectraMpa, "electra-mpa"},
      {TrainMode::MpaGround, "mpa-ground"}, {TrainMode::MpaConstant, "mpa-constant"}};
  return names;
}

json model_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"hidden", c.hidden},
          {"ffn_dim", c.ffn_dim},
          {"guided_layers", c.guided_layers},
          {"guided_heads", c.guided_heads},
          {"activation", c.activation == Activation::Gelu ? "gelu" : "relu"}};
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) ==
        known.end()) {
      throw ConfigError("unknown config key '" + key + "' in " + where);
    }
  }
}

ModelConfig model_from_json(const json& j, ModelConfig c, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  reject_unknown(j, {"layers", "heads", "hidden", "ffn_dim", "guided_layers", "guided_heads", "activation"},
                 where);
  if (j.contains("layers")) c.layers = j["layers"].get<std::size_t>();
  if (j.contains("heads")) c.heads = j["heads"].get<std::size_t>();
  if (j.contains("hidden")) c.hidden = j["hidden"].get<std::size_t>();
  if (j.contains("ffn_dim")) c.ffn_dim = j["ffn_dim"].get<std::size_t>();
  if (j.contains("guided_layers")) c.guided_layers = j["guided_layers"].get<std::size_t>();
  if (j.contains("guided_heads")) c.guided_heads = j["guided_heads"].get<std::size_t>();
  if (j.contains("activation")) {
    const auto a = j["activation"].get<std::string>();
    if (a == "gelu") {
      c.activation = Activation::Gelu;
    } else if (a == "relu") {
      c.activation = Activation::Relu;
    } else {
      throw ConfigError("activation must be gelu or relu, got '" + a + "'");
    }
  }
  return c;
}

}  // namespace

std::string to_string(TrainMode mode) {
  for (const auto& [m, name] : mode_names())
    if (m == mode) return name;
  return "unknown";
}

TrainMode parse_mode(const std::string& name) {
  for (const auto& [m, n] : mode_names())
    if (n == name) return m;
  throw ConfigError("unknown mode '" + name +
                    "' (bert, electra, bert-mpa, electra-mpa, mpa-ground, mpa-constant)");
}

Backbone TrainConfig::backbone() const {
  switch (mode) {
    case TrainMode::Bert:
    case TrainMode::BertMpa:
      return Backbone::Bert;
    case TrainMode::Electra:
    case TrainMode::ElectraMpa:
      return Backbone::Electra;
    default:
      return ablation_backbone;
  }
}

double TrainConfig::constant() const {
  if (constant_c) return *constant_c;
  return backbone() == Backbone::Electra ? 0.9 : 0.8;
}

void TrainConfig::finalize(std::size_t vocab_size) {
  for (ModelConfig* m : {&main, &generator}) {
    m->vocab = vocab_size;
    m->max_len = max_len;
  }
  main.head = uses_generator() ? HeadKind::Discriminator : HeadKind::Generator;
  generator.head = HeadKind::Generator;
  generator.guided_layers = 0;
  generator.guided_heads = 0;
  validate();
}

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("steps must be positive");
  if (warmup_steps > steps) {
    throw ConfigError("warmup_steps " + std::to_string(warmup_steps) + " exceeds steps " +
                      std::to_string(steps));
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  for (auto [name, v] : {std::pair{"lr_peak", lr_peak}, std::pair{"weight_decay", weight_decay},
                         std::pair{"lambda", lambda}, std::pair{"gamma", gamma},
                         std::pair{"eps", eps}}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError(std::string(name) + " must be non-negative, got " + std::to_string(v));
    }
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("mask_prob must lie in [0, 1]");
  if (constant_c && !(*constant_c >= 0.0 && *constant_c <= 1.0))
    throw ConfigError("constant_c must lie in [0, 1]");
  main.validate();
  if (uses_generator()) generator.validate();
  if (uses_mpa() && main.guided_slots() == 0)
    throw ConfigError("mode " + to_string(mode) + " needs guided_layers and guided_heads > 0");
}

TrainConfig default_train_config(std::size_t vocab_size) {
  TrainConfig c;
  c.main.layers = 4;
  c.main.heads = 4;
  c.main.hidden = 128;
  c.main.ffn_dim = 512;
  c.main.guided_layers = 2;
  c.main.guided_heads = 2;
  c.generator.layers = 4;
  c.generator.heads = 4;
  c.generator.hidden = 48;
  c.generator.ffn_dim = 192;
  c.finalize(vocab_size);
  return c;
}

std::string config_to_json(const TrainConfig& c) {
  json j{{"mode", to_string(c.mode)},
         {"ablation_backbone", c.ablation_backbone == Backbone::Electra ? "electra" : "bert"},
         {"steps", c.steps},
         {"batch_size", c.batch_size},
         {"max_len", c.max_len},
         {"lr_peak", c.lr_peak},
         {"warmup_steps", c.warmup_steps},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"eps", c.eps},
         {"weight_decay", c.weight_decay},
         {"dropout", c.dropout},
         {"lambda", c.lambda},
         {"gamma", c.gamma},
         {"constant_c", c.constant_c ? json(*c.constant_c) : json(nullptr)},
         {"mask_prob", c.mask_prob},
         {"argmax_replacements", c.argmax_replacements},
         {"seed", c.seed},
         {"checkpoint_every", c.checkpoint_every},
         {"eval_every", c.eval_every},
         {"log_every", c.log_every},
         {"main", model_json(c.main)},
         {"generator", model_json(c.generator)}};
  return j.dump(2);
}

TrainConfig config_from_json(const std::string& text, const TrainConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j,
                 {"mode", "ablation_backbone", "steps", "batch_size", "max_len", "lr_peak",
                  "warmup_steps", "beta1", "beta2", "eps", "weight_decay", "dropout", "lambda",
                  "gamma", "constant_c", "mask_prob", "argmax_replacements", "seed",
                  "checkpoint_every", "eval_every", "log_every", "main", "generator"},
                 "config");
  TrainConfig c = base;
  try {
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
    if (j.contains("ablation_backbone")) {
      const auto b = j["ablation_backbone"].get<std::string>();
      if (b != "bert" && b != "electra") throw ConfigError("ablation_backbone must be bert or electra");
      c.ablation_backbone = b == "bert" ? Backbone::Bert : Backbone::Electra;
    }
    take("steps", c.steps);
    take("batch_size", c.batch_size);
    take("max_len", c.max_len);
    take("lr_peak", c.lr_peak);
    take("warmup_steps", c.warmup_steps);
    take("beta1", c.beta1);
    take("beta2", c.beta2);
    take("eps", c.eps);
    take("weight_decay", c.weight_decay);
    take("dropout", c.dropout);
    take("lambda", c.lambda);
    take("gamma", c.gamma);
    if (j.contains("constant_c")) {
      c.constant_c = j["constant_c"].is_null() ? std::nullopt
                                               : std::optional<double>(j["constant_c"].get<double>());
    }
    take("mask_prob", c.mask_prob);
    take("argmax_replacements", c.argmax_replacements);
    take("seed", c.seed);
    take("checkpoint_every", c.checkpoint_every);
    take("eval_every", c.eval_every);
    take("log_every", c.log_every);
    if (j.contains("main")) c.main = model_from_json(j["main"], c.main, "main");
    if (j.contains("generator")) c.generator = model_from_json(j["generator"], c.generator, "generator");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

double lr_schedule(std::size_t step, const TrainConfig& c) {
  if (step >= c.steps) return 0.0;
  if (step < c.warmup_steps) {
    return c.lr_peak * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  return c.lr_peak * static_cast<double>(c.steps - step) /
         static_cast<double>(c.steps - c.warmup_steps);
}

void adam_step(std::span<const NamedTensor> params, AdamState& state, double rate,
               const TrainConfig& c) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.numel(), 0.0);
      state.v[i].assign(params[i].tensor.numel(), 0.0);
    }
  }
  for (const auto& [name, tensor] : params) {
    if (!tensor.has_grad()) continue;
    for (double g : tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in " + name + " (shape " +
                           shape_string(tensor.shape()) + ")");
      }
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    auto data = p.data();
    const bool has = p.has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = has ? p.grad()[k] : 0.0;
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      const double mhat = m[k] / correct1;
      const double vhat = v[k] / correct2;
      data[k] = data[k] - rate * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * data[k]);
    }
  }
}

LossTerms compute_losses(const TrainConfig& config, const Model* generator, const Model& main,
                         MaskedBatch& batch, const ContextMatrix* context, const LossRngs& rngs,
                         const GuidanceTargets* frozen) {
  const bool electra = config.uses_generator();
  if (electra && generator == nullptr) throw ContractError("compute_losses: generator missing");
  if (config.uses_mpa() && context == nullptr) {
    throw ConfigError("mode " + to_string(config.mode) + " requires a context matrix");
  }
  auto options = [&](Rng* rng) {
    ForwardOptions o;
    o.dropout = rng != nullptr ? config.dropout : 0.0;
    o.rng = rng;
    return o;
  };
  LossTerms out;
  const MaskedRows masked = masked_rows(batch);
  ForwardOutput main_out;
  const Batch* keys = nullptr;

  if (electra) {
    const auto gen_out = forward(*generator, batch.x_masked, options(rngs.gen_dropout));
    if (!masked.rows.empty()) {
      const Tensor logits = token_logits(*generator, gen_out, masked.rows);
      out.l_g = generator_loss(logits, masked.targets);
      if (rngs.sample != nullptr)
        sample_replacements(logits, batch, *rngs.sample, config.argmax_replacements);
    } else {
      out.l_g = Tensor::scalar(0.0);
    }
    main_out = forward(main, batch.x_replaced, options(rngs.main_dropout));
    const auto scored = discriminator_rows(batch.x_replaced, batch.x);
    out.l_d = scored.rows.empty()
                  ? Tensor::scalar(0.0)
                  : discriminator_loss(realness_logits(main, main_out, scored.rows), scored.labels);
    keys = &batch.x_replaced;
  } else {
    main_out = forward(main, batch.x_masked, options(rngs.main_dropout));
    if (!masked.rows.empty()) {
      const Tensor logits = token_logits(main, main_out, masked.rows);
      out.l_g = generator_loss(logits, masked.targets);
      if (rngs.sample != nullptr)
        sample_replacements(logits, batch, *rngs.sample, config.argmax_replacements);
    } else {
      out.l_g = Tensor::scalar(0.0);
    }
    keys = &batch.x_masked;
  }

  if (config.uses_mpa()) {
    GuidanceConfig guidance;
    if (config.mode == TrainMode::MpaGround) guidance.source = GuidanceSource::GroundTruth;
    if (config.mode == TrainMode::MpaConstant) {
      guidance.source = GuidanceSource::Constant;
      guidance.constant = config.constant();
    }
    const auto rows = collect_guidance(batch, *keys, *context, guidance);
    out.guided_rows = rows.size();
    out.targets = frozen != nullptr ? *frozen : guidance_targets(main_out, rows, *keys);
    out.l_a = mpa_loss_with_targets(main_out, rows, out.targets, *keys);
  }
  out.total = total_loss(out.l_g, out.l_d, out.l_a, config.lambda, config.gamma);
  return out;
}

std::string StepMetrics::to_json() const {
  return json{{"step", step},
              {"lr", lr},
              {"L_G", l_g},
              {"L_D", l_d},
              {"L_A", l_a},
              {"total", total},
              {"misprediction_rate", misprediction_rate}}
      .dump();
}

Batch pad_batch(const std::vector<std::vector<TokenId>>& seqs) {
  std::size_t n = 0;
  for (const auto& s : seqs) n = std::max(n, s.size());
  Batch out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    auto padded = s;
    padded.resize(n, kPad);
    out.push_back(std::move(padded));
  }
  return out;
}

// ---- Trainer -----------------------------------------------------------------

Trainer::Trainer(TrainConfig config, std::vector<PackedSequence> data,
                 std::optional<ContextMatrix> context)
    : config_(std::move(config)),
      data_(std::move(data)),
      context_(std::move(context)),
      data_rng_(Rng::derive(config_.seed, kStreamData)),
      mask_rng_(Rng::derive(config_.seed, kStreamMask)),
      sample_rng_(Rng::derive(config_.seed, kStreamSample)),
      gen_dropout_rng_(Rng::derive(config_.seed, kStreamGenDrop)),
      main_dropout_rng_(Rng::derive(config_.seed, kStreamMainDrop)) {
  config_.validate();
  if (config_.uses_mpa() && !context_) {
    throw ConfigError("mode " + to_string(config_.mode) + " requires a context matrix");
  }
  if (data_.empty()) throw ConfigError("training data is empty");
  for (const auto& s : data_) {
    if (s.ids.empty() || s.ids.size() > config_.max_len) {
      throw ConfigError("training sequence of length " + std::to_string(s.ids.size()) +
                        " does not fit max_len " + std::to_string(config_.max_len));
    }
    for (auto id : s.ids) {
      if (id >= config_.main.vocab) {
        throw ConfigError("training data holds token id " + std::to_string(id) +
                          " outside the model vocabulary of " + std::to_string(config_.main.vocab));
      }
    }
  }
  main_ = init_model(config_.main, Rng::derive(config_.seed, kStreamInitMain));
  if (config_.uses_generator()) generator_ = init_model(config_.generator, Rng::derive(config_.seed, kStreamInitGen));
}

std::vector<NamedTensor> Trainer::all_parameters() const {
  auto params = main_.parameters();
  if (config_.uses_generator()) {
    for (auto& [name, t] : generator_.parameters()) params.push_back({"generator." + name, t});
  }
  return params;
}

Batch Trainer::next_batch() {
  std::vector<std::vector<TokenId>> seqs;
  while (seqs.size() < config_.batch_size) {
    if (cursor_ >= order_.size()) {
      order_.resize(data_.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[data_rng_.below(i)]);
      cursor_ = 0;
    }
    seqs.push_back(data_[order_[cursor_++]].ids);
  }
  return pad_batch(seqs);
}

StepMetrics Trainer::step() {
  if (step_ >= config_.steps) throw ContractError("trainer: all configured steps are done");
  const double rate = lr_schedule(step_ + 1, config_);
  MaskingConfig masking;
  masking.mask_prob = config_.mask_prob;
  masking.policy = config_.uses_generator() ? MaskPolicy::ElectraGen : MaskPolicy::Bert;
  MaskedBatch batch = apply_mlm_mask(next_batch(), masking, config_.main.vocab, mask_rng_);

  const auto params = all_parameters();
  for (const auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
  Tape::current().clear();
  const LossRngs rngs{&sample_rng_, &gen_dropout_rng_, &main_dropout_rng_};
  const LossTerms terms = compute_losses(config_, config_.uses_generator() ? &generator_ : nullptr,
                                         main_, batch, context(), rngs);
  if (terms.total.requires_grad()) backward(terms.total);
  Tape::current().clear();
  if (!std::isfinite(terms.total.item())) {
    throw NumericError("non-finite loss at step " + std::to_string(step_ + 1));
  }
  adam_step(params, adam_, rate, config_);
  ++step_;

  StepMetrics m;
  m.step = step_;
  m.lr = rate;
  m.l_g = terms.l_g.item();
  m.l_d = terms.l_d.defined() ? terms.l_d.item() : 0.0;
  m.l_a = terms.l_a.defined() ? terms.l_a.item() : 0.0;
  m.total = terms.total.item();
  const std::size_t masked = batch.mask_count();
  m.misprediction_rate =
      masked == 0 ? 0.0 : static_cast<double>(batch.misprediction_count()) / static_cast<double>(masked);
  return m;
}

void Trainer::run(const std::function<bool(const StepMetrics&)>& on_step) {
  while (step_ < config_.steps) {
    const StepMetrics m = step();
    if (on_step && !on_step(m)) break;
  }
}

void Trainer::save_state(std::ostream& out) const {
  bin::write_magic(out, kStateMagic);
  bin::write_le<std::uint32_t>(out, kStateVersion);
  bin::write_string(out, config_to_json(config_));
  bin::write_le<std::uint64_t>(out, step_);
  bin::write_le<std::uint64_t>(out, data_.size());
  save_model(main_, out);
  if (config_.uses_generator()) save_model(generator_, out);
  bin::write_le<std::uint64_t>(out, adam_.t);
  bin::write_le<std::uint64_t>(out, adam_.m.size());
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    bin::write_le<std::uint64_t>(out, adam_.m[i].size());
    for (double v : adam_.m[i]) bin::write_le<double>(out, v);
    for (double v : adam_.v[i]) bin::write_le<double>(out, v);
  }
  for (const Rng* r : {&data_rng_, &mask_rng_, &sample_rng_, &gen_dropout_rng_, &main_dropout_rng_})
    bin::write_string(out, r->state());
  bin::write_le<std::uint64_t>(out, order_.size());
  for (auto i : order_) bin::write_le<std::uint64_t>(out, i);
  bin::write_le<std::uint64_t>(out, cursor_);
}

void Trainer::load_state(std::istream& in) {
  bin::expect_magic(in, kStateMagic);
  bin::expect_version(in, kStateVersion, "trainer state");
  const std::string stored = bin::read_string(in, "config");
  if (stored != config_to_json(config_)) {
    throw ConfigError("trainer state was written with a different configuration");
  }
  const auto step = bin::read_le<std::uint64_t>(in, "step");
  const auto data_size = bin::read_le<std::uint64_t>(in, "data size");
  if (data_size != data_.size()) {
    throw ConfigError("trainer state expects " + std::to_string(data_size) +
                      " training sequences, found " + std::to_string(data_.size()));
  }
  Model main = load_model(in);
  Model gen;
  if (config_.uses_generator()) gen = load_model(in);
  if (!(main.config == config_.main) || (config_.uses_generator() && !(gen.config == config_.generator))) {
    throw FormatError("trainer state: model configuration does not match");
  }
  AdamState adam;
  adam.t = bin::read_le<std::uint64_t>(in, "adam step");
  const auto count = bin::read_le<std::uint64_t>(in, "adam tensors");
  if (count > 100000) throw FormatError("trainer state: implausible moment count");
  adam.m.resize(count);
  adam.v.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto n = bin::read_le<std::uint64_t>(in, "moment size");
    if (n > (std::uint64_t{1} << 31)) throw FormatError("trainer state: implausible moment size");
    adam.m[i].resize(n);
    adam.v[i].resize(n);
    for (auto& v : adam.m[i]) v = bin::read_le<double>(in, "adam moments");
    for (auto& v : adam.v[i]) v = bin::read_le<double>(in, "adam moments");
  }
  std::vector<std::string> rng_states(5);
  for (auto& s : rng_states) s = bin::read_string(in, "rng state");
  const auto order_size = bin::read_le<std::uint64_t>(in, "data order");
  if (order_size != 0 && order_size != data_.size()) throw FormatError("trainer state: bad data order");
  std::vector<std::size_t> order(order_size);
  for (auto& i : order) {
    i = bin::read_le<std::uint64_t>(in, "data order");
    if (i >= data_.size()) throw FormatError("trainer state: data order out of range");
  }
  const auto cursor = bin::read_le<std::uint64_t>(in, "data cursor");

  main_ = std::move(main);
  if (config_.uses_generator()) generator_ = std::move(gen);
  adam_ = std::move(adam);
  step_ = step;
  Rng* rngs[] = {&data_rng_, &mask_rng_, &sample_rng_, &gen_dropout_rng_, &main_dropout_rng_};
  for (std::size_t i = 0; i < 5; ++i) rngs[i]->set_state(rng_states[i]);
  order_ = std::move(order);
  cursor_ = cursor;
}

void Trainer::save_state(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write trainer state: " + path);
  save_state(out);
  if (!out) throw FormatError("write failed: " + path);
}

void Trainer::load_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read trainer state: " + path);
  load_state(in);
}

}  // namespace mpa
