// SPDX-License-Identifier: Apache-2.0
#include "mpa/experiment.hpp"

#include <chrono>
#include <sstream>

#include <json.hpp>

#include "mpa/error.hpp"

namespace mpa {

using json = nlohmann::json;

TrapExperimentConfig default_trap_experiment() {
  TrapExperimentConfig c;
  c.corpus.documents = 6000;
  c.corpus.filler_types = 20;
  c.corpus.sentence_length = 6;
  c.corpus.answer_rate = 0.20;
  c.corpus.trap_rate = 0.15;
  TrainConfig& t = c.train;
  t.steps = 10000;
  t.batch_size = 16;
  t.max_len = 32;
  t.lr_peak = 2e-3;
  t.warmup_steps = 500;
  t.main.layers = 2;
  t.main.heads = 4;
  t.main.hidden = 48;
  t.main.ffn_dim = 96;
  t.main.guided_layers = 2;
  t.main.guided_heads = 2;
  t.generator.layers = 2;
  t.generator.heads = 2;
  t.generator.hidden = 32;
  t.generator.ffn_dim = 64;
  return c;
}

TrapSetup build_trap_setup(const TrapExperimentConfig& config, std::uint64_t seed) {
  config.corpus.validate();
  TrapSetup s;
  const std::string text = synth_corpus(config.corpus, seed);
  {
    std::istringstream in(text);
    s.vocab = Vocabulary::build(in, config.vocab_max - kNumSpecials, 1);
  }
  std::istringstream in(text);
  auto packed = encode_pack(in, s.vocab, config.train.max_len);
  const std::size_t held = std::max<std::size_t>(1, packed.size() * config.heldout_fraction_pct / 100);
  if (held >= packed.size()) throw ConfigError("trap corpus too small to hold out a split");
  s.heldout.assign(packed.end() - static_cast<std::ptrdiff_t>(held), packed.end());
  packed.resize(packed.size() - held);
  s.train = std::move(packed);
  s.context = build_context_matrix(s.train, select_sub_vocab(s.vocab, config.sub_vocab), config.window);
  s.traps = encode_traps(synth_traps(config.corpus, Rng::derive(seed, 77), config.probe_traps),
                         config.corpus, s.vocab);
  return s;
}

std::string TrapRun::to_json() const {
  json j{{"mode", to_string(mode)},
         {"seed", seed},
         {"steps", steps},
         {"seconds", seconds},
         {"last", json::parse(last.to_json())},
         {"eval", json::parse(eval.to_json())}};
  return j.dump();
}

TrapRun run_trap_training(const TrapExperimentConfig& config, const TrapSetup& setup,
                          TrainMode mode, std::uint64_t seed,
                          const std::function<void(const StepMetrics&)>& on_step) {
  TrainConfig tc = config.train;
  tc.mode = mode;
  tc.seed = seed;
  tc.finalize(setup.vocab.size());
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<ContextMatrix> context;
  if (tc.uses_mpa()) context = setup.context;
  Trainer trainer(tc, setup.train, context);
  TrapRun run;
  run.mode = mode;
  run.seed = seed;
  trainer.run([&](const StepMetrics& m) {
    run.last = m;
    if (on_step) on_step(m);
    return true;
  });
  run.steps = trainer.step_count();
  run.eval = eval_probe(tc, trainer.generator(), trainer.main(), setup.heldout, &setup.context,
                        &setup.traps);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

std::string TrapComparison::to_json() const {
  json runs_json = json::array();
  for (const auto& r : runs) runs_json.push_back(json::parse(r.to_json()));
  return json{{"seeds", seeds}, {"rtd_wins", rtd_wins}, {"mass_wins", mass_wins}, {"runs", runs_json}}
      .dump(2);
}

TrapComparison run_trap_experiment(const TrapExperimentConfig& config,
                                   const std::function<void(const TrapRun&)>& on_run) {
  TrapComparison result;
  result.seeds = config.seeds.size();
  for (auto seed : config.seeds) {
    const TrapSetup setup = build_trap_setup(config, seed);
    std::vector<TrainMode> modes{config.baseline, config.treatment};
    if (config.ablations) {
      modes.push_back(TrainMode::MpaGround);
      modes.push_back(TrainMode::MpaConstant);
    }
    std::vector<TrapRun> runs;
    for (auto mode : modes) {
      runs.push_back(run_trap_training(config, setup, mode, seed));
      if (on_run) on_run(runs.back());
    }
    const TrapReport& base = *runs[0].eval.trap;
    const TrapReport& treat = *runs[1].eval.trap;
    if (base.rtd_accuracy && treat.rtd_accuracy) {
      result.rtd_wins += *treat.rtd_accuracy >= *base.rtd_accuracy;
    } else if (base.cloze_accuracy && treat.cloze_accuracy) {
      result.rtd_wins += *treat.cloze_accuracy >= *base.cloze_accuracy;
    }
    result.mass_wins += treat.cue_mass > base.cue_mass;
    for (auto& r : runs) result.runs.push_back(std::move(r));
  }
  return result;
}

}  // namespace mpa
