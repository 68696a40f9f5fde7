// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. Exit codes: 0 ok, 2 config, 3 io/format, 4 numeric.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mpa/corpus.hpp"
#include "mpa/model.hpp"
#include "mpa/trainer.hpp"

namespace mpa {

inline constexpr const char* kToolVersion = "0.1.0";

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string sha256_file(const std::filesystem::path& path);

// A checkpoint directory holds config.json, vocab.txt, main.mpac and, on
// electra paths, generator.mpac.
struct Checkpoint {
  TrainConfig config;
  Vocabulary vocab;
  Model main;
  std::optional<Model> generator;
};

void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& config,
                     const Vocabulary& vocab, const Model& main, const Model* generator);
// FormatError when a model file disagrees with config.json.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace mpa
