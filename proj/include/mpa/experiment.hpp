// SPDX-License-Identifier: Apache-2.0
//
// Matched-seed comparison on the planted-pattern corpus: baseline vs MPA,
// plus optional ablation runs.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mpa/cooccurrence.hpp"
#include "mpa/corpus.hpp"
#include "mpa/eval.hpp"
#include "mpa/synth.hpp"
#include "mpa/trainer.hpp"

namespace mpa {

struct TrapExperimentConfig {
  TrapCorpusSpec corpus;
  std::size_t vocab_max = 500;
  std::size_t sub_vocab = 200;
  std::size_t window = 4;
  std::size_t probe_traps = 256;
  std::size_t heldout_fraction_pct = 5;
  TrainConfig train;  // mode is overridden per run; vocab is filled in per seed
  TrainMode baseline = TrainMode::Electra;
  TrainMode treatment = TrainMode::ElectraMpa;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  bool ablations = false;
};

TrapExperimentConfig default_trap_experiment();

// Everything derived from the corpus for one seed.
struct TrapSetup {
  Vocabulary vocab;
  std::vector<PackedSequence> train;
  std::vector<PackedSequence> heldout;
  ContextMatrix context;
  std::vector<TrapExample> traps;
};

TrapSetup build_trap_setup(const TrapExperimentConfig& config, std::uint64_t seed);

struct TrapRun {
  TrainMode mode = TrainMode::Electra;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double seconds = 0.0;
  StepMetrics last;
  EvalReport eval;
  std::string to_json() const;
};

TrapRun run_trap_training(const TrapExperimentConfig& config, const TrapSetup& setup,
                          TrainMode mode, std::uint64_t seed,
                          const std::function<void(const StepMetrics&)>& on_step = {});

struct TrapComparison {
  std::vector<TrapRun> runs;
  std::size_t rtd_wins = 0;   // seeds where treatment trap RTD >= baseline
  std::size_t mass_wins = 0;  // seeds where treatment cue mass > baseline
  std::size_t seeds = 0;
  std::string to_json() const;
};

TrapComparison run_trap_experiment(const TrapExperimentConfig& config,
                                   const std::function<void(const TrapRun&)>& on_run = {});

}  // namespace mpa
