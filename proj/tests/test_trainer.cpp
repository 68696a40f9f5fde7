// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <sstream>

#include "fixtures.hpp"
#include "mpa/error.hpp"
#include "mpa/trainer.hpp"
#include "oracles.hpp"

using namespace mpa;
using mpa::testing::tiny_config;
using mpa::testing::tiny_corpus;

namespace {

bool same_parameters(const Trainer& a, const Trainer& b) {
  const auto pa = a.all_parameters(), pb = b.all_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto x = pa[i].tensor.data(), y = pb[i].tensor.data();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

double window_mean(const std::vector<double>& v, std::size_t from, std::size_t count) {
  double s = 0;
  for (std::size_t i = from; i < from + count; ++i) s += v[i];
  return s / static_cast<double>(count);
}

}  // namespace

TEST_CASE("lr schedule examples", "[trainer]") {
  TrainConfig c;
  c.steps = 100;
  c.warmup_steps = 10;
  c.lr_peak = 1e-3;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(5, c) == Catch::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_schedule(10, c) == 1e-3);
  CHECK(lr_schedule(55, c) == Catch::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_schedule(100, c) == 0.0);
  c.warmup_steps = 0;
  CHECK(lr_schedule(0, c) == 1e-3);
}

TEST_CASE("adam trivial cases", "[trainer][adam]") {
  TrainConfig c;
  c.weight_decay = 0.0;
  Tensor p = Tensor::from_data({3}, {0.5, -1.0, 2.0}, true);
  p.zero_grad();
  const std::vector<NamedTensor> params{{"p", p}};
  AdamState state;
  adam_step(params, state, 0.1, c);
  CHECK(p.data()[0] == 0.5);
  CHECK(p.data()[2] == 2.0);

  AdamState fresh;
  p.grad()[0] = 3.0;
  p.grad()[1] = -0.2;
  p.grad()[2] = 0.0;
  adam_step(params, fresh, 0.01, c);
  // First bias-corrected step moves by about rate against the gradient sign.
  CHECK(p.data()[0] == Catch::Approx(0.5 - 0.01).epsilon(1e-6));
  CHECK(p.data()[1] == Catch::Approx(-1.0 + 0.01).epsilon(1e-4));
  CHECK(p.data()[2] == 2.0);
}

TEST_CASE("adam matches the scalar reference on a quadratic", "[trainer][adam][oracle]") {
  TrainConfig c;
  c.weight_decay = 0.01;
  Tensor p = Tensor::from_data({4}, {1.0, -2.0, 0.3, 4.0}, true);
  const std::vector<NamedTensor> params{{"p", p}};
  std::vector<oracle::ScalarAdam> ref(4, {c.beta1, c.beta2, c.eps, c.weight_decay});
  std::vector<double> expect(p.data().begin(), p.data().end());
  AdamState state;
  const std::vector<double> curvature{1.0, 3.0, 0.5, 2.0};
  for (int step = 0; step < 10; ++step) {
    p.zero_grad();
    for (std::size_t i = 0; i < 4; ++i) p.grad()[i] = curvature[i] * p.data()[i];
    const double rate = 0.05 * (step + 1);
    adam_step(params, state, rate, c);
    for (std::size_t i = 0; i < 4; ++i) expect[i] = ref[i].step(expect[i], curvature[i] * expect[i], rate);
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(p.data()[i] - expect[i]) < 1e-12);
}

TEST_CASE("adam refuses non-finite gradients and names the tensor", "[trainer][adam]") {
  TrainConfig c;
  Tensor a = Tensor::zeros({2}, true), b = Tensor::zeros({2}, true);
  a.zero_grad();
  b.zero_grad();
  b.grad()[1] = std::nan("");
  const std::vector<NamedTensor> params{{"alpha", a}, {"layer3.wq", b}};
  AdamState state;
  try {
    adam_step(params, state, 0.1, c);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer3.wq") != std::string::npos);
    CHECK(e.exit_code() == 4);
  }
  CHECK(a.data()[0] == 0.0);
}

TEST_CASE("config json round-trip and validation", "[trainer][config]") {
  auto c = tiny_config(TrainMode::MpaConstant, 60);
  c.constant_c = 0.7;
  c.ablation_backbone = Backbone::Bert;
  c.main.activation = Activation::Relu;
  const auto back = config_from_json(config_to_json(c), TrainConfig{});
  CHECK(config_to_json(back) == config_to_json(c));
  CHECK(back.constant() == 0.7);
  CHECK(back.backbone() == Backbone::Bert);

  CHECK_THROWS_AS(config_from_json("{\"stepz\": 3}", c), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"steps\": \"many\"}", c), ConfigError);
  CHECK_THROWS_AS(config_from_json("{\"mode\": \"gpt\"}", c), ConfigError);
  CHECK_THROWS_AS(config_from_json("not json", c), ConfigError);

  auto bad = c;
  bad.warmup_steps = bad.steps + 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.gamma = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  TrainConfig defaults;
  CHECK(defaults.lambda == 50.0);
  CHECK(defaults.gamma == 1.0);
  CHECK(defaults.eps == 1e-6);
  CHECK(defaults.beta2 == 0.98);
  CHECK(defaults.dropout == 0.1);
  CHECK(defaults.weight_decay == 0.01);
  CHECK(defaults.lr_peak == 1e-4);
  auto electra_c = c;
  electra_c.constant_c.reset();
  electra_c.ablation_backbone = Backbone::Electra;
  CHECK(electra_c.constant() == 0.9);
  electra_c.ablation_backbone = Backbone::Bert;
  CHECK(electra_c.constant() == 0.8);
}

TEST_CASE("mpa modes require a context matrix", "[trainer][config]") {
  const auto corpus = tiny_corpus();
  const auto c = tiny_config(TrainMode::ElectraMpa, corpus.vocab.size());
  CHECK_THROWS_AS(Trainer(c, corpus.packed), ConfigError);
}

TEST_CASE("bert training lowers the MLM loss", "[trainer][smoke]") {
  const auto corpus = tiny_corpus();
  Trainer t(tiny_config(TrainMode::Bert, corpus.vocab.size(), 60), corpus.packed);
  std::vector<double> lg;
  t.run([&](const StepMetrics& m) {
    lg.push_back(m.l_g);
    return true;
  });
  REQUIRE(lg.size() == 60);
  CHECK(window_mean(lg, 50, 10) < window_mean(lg, 0, 10));
}

TEST_CASE("logged totals decompose into weighted components", "[trainer]") {
  const auto corpus = tiny_corpus();
  for (auto mode : {TrainMode::ElectraMpa, TrainMode::BertMpa, TrainMode::MpaGround}) {
    Trainer t(tiny_config(mode, corpus.vocab.size(), 10), corpus.packed, corpus.context);
    const double lambda = t.config().uses_generator() ? t.config().lambda : 0.0;
    t.run([&](const StepMetrics& m) {
      CHECK(std::abs(m.total - (m.l_g + lambda * m.l_d + t.config().gamma * m.l_a)) < 1e-12);
      return true;
    });
  }
}

TEST_CASE("gamma 0 reduces MPA modes to their backbones bitwise", "[trainer][reduction]") {
  const auto corpus = tiny_corpus();
  const std::pair<TrainMode, TrainMode> pairs[] = {{TrainMode::Electra, TrainMode::ElectraMpa},
                                                   {TrainMode::Bert, TrainMode::BertMpa}};
  for (auto [base_mode, mpa_mode] : pairs) {
    auto base_cfg = tiny_config(base_mode, corpus.vocab.size(), 20);
    auto mpa_cfg = tiny_config(mpa_mode, corpus.vocab.size(), 20);
    mpa_cfg.gamma = 0.0;
    Trainer base(base_cfg, corpus.packed);
    Trainer mpa(mpa_cfg, corpus.packed, corpus.context);
    double l_a_seen = 0.0;
    for (int s = 0; s < 20; ++s) {
      base.step();
      l_a_seen += mpa.step().l_a;
      REQUIRE(same_parameters(base, mpa));
    }
    CHECK(l_a_seen > 0.0);
  }
}

TEST_CASE("all-OOV guidance leaves the trajectory untouched", "[trainer][reduction]") {
  const auto corpus = tiny_corpus();
  // Sub-vocabulary made of ids that never occur in the data.
  const TokenId v = static_cast<TokenId>(corpus.vocab.size());
  ContextMatrix unused(SubVocabulary({v - 2, v - 1}), 3, {0.0, 1.0, 1.0, 0.0});
  std::vector<PackedSequence> data = corpus.packed;
  for (auto& s : data)
    for (auto& id : s.ids)
      if (id >= v - 2) id = kUnk;
  Trainer base(tiny_config(TrainMode::Electra, v, 10), data);
  Trainer mpa(tiny_config(TrainMode::ElectraMpa, v, 10), data, unused);
  for (int s = 0; s < 10; ++s) {
    base.step();
    CHECK(mpa.step().l_a == 0.0);
  }
  CHECK(same_parameters(base, mpa));
}

TEST_CASE("resume reproduces the uninterrupted trajectory", "[trainer][checkpoint]") {
  const auto corpus = tiny_corpus();
  for (auto mode : {TrainMode::ElectraMpa, TrainMode::BertMpa}) {
    const auto cfg = tiny_config(mode, corpus.vocab.size(), 24);
    Trainer straight(cfg, corpus.packed, corpus.context);
    std::vector<std::string> expected;
    straight.run([&](const StepMetrics& m) {
      expected.push_back(m.to_json());
      return true;
    });

    Trainer first(cfg, corpus.packed, corpus.context);
    std::vector<std::string> got;
    for (int s = 0; s < 11; ++s) got.push_back(first.step().to_json());
    std::stringstream state;
    first.save_state(state);

    Trainer resumed(cfg, corpus.packed, corpus.context);
    resumed.load_state(state);
    CHECK(resumed.step_count() == 11);
    resumed.run([&](const StepMetrics& m) {
      got.push_back(m.to_json());
      return true;
    });
    CHECK(got == expected);
    CHECK(same_parameters(straight, resumed));
  }
}

TEST_CASE("resume rejects a different configuration", "[trainer][checkpoint]") {
  const auto corpus = tiny_corpus();
  auto cfg = tiny_config(TrainMode::Electra, corpus.vocab.size(), 10);
  Trainer t(cfg, corpus.packed);
  t.step();
  std::stringstream state;
  t.save_state(state);
  cfg.seed = 99;
  Trainer other(cfg, corpus.packed);
  CHECK_THROWS_AS(other.load_state(state), ConfigError);

  std::string bytes;
  {
    std::stringstream s;
    t.save_state(s);
    bytes = s.str();
  }
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  Trainer same(tiny_config(TrainMode::Electra, corpus.vocab.size(), 10), corpus.packed);
  CHECK_THROWS_AS(same.load_state(truncated), FormatError);
}

TEST_CASE("same seed gives the same metric stream", "[trainer]") {
  const auto corpus = tiny_corpus();
  const auto cfg = tiny_config(TrainMode::MpaConstant, corpus.vocab.size(), 8);
  std::vector<std::string> a, b;
  Trainer(cfg, corpus.packed, corpus.context).run([&](const StepMetrics& m) {
    a.push_back(m.to_json());
    return true;
  });
  Trainer(cfg, corpus.packed, corpus.context).run([&](const StepMetrics& m) {
    b.push_back(m.to_json());
    return true;
  });
  CHECK(a == b);
}

TEST_CASE("generator misprediction rate trends down on a learnable corpus", "[trainer][slow]") {
  const auto corpus = tiny_corpus(400);
  auto cfg = tiny_config(TrainMode::Electra, corpus.vocab.size(), 300);
  cfg.dropout = 0.0;
  cfg.generator.hidden = 16;
  cfg.generator.ffn_dim = 32;
  cfg.generator.heads = 2;
  cfg.finalize(corpus.vocab.size());
  Trainer t(cfg, corpus.packed);
  std::vector<double> rate;
  t.run([&](const StepMetrics& m) {
    rate.push_back(m.misprediction_rate);
    return true;
  });
  const double early = window_mean(rate, 0, 50);
  const double mid = window_mean(rate, 125, 50);
  const double late = window_mean(rate, 250, 50);
  INFO("windowed misprediction rate " << early << " " << mid << " " << late);
  CHECK(mid <= early);
  CHECK(late <= mid);
  CHECK(late < early);
}
