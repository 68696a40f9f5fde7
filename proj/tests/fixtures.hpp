// SPDX-License-Identifier: Apache-2.0
//
// Small corpora and configs shared by the trainer, eval and acceptance tests.
#pragma once

#include <sstream>

#include "mpa/cooccurrence.hpp"
#include "mpa/corpus.hpp"
#include "mpa/synth.hpp"
#include "mpa/trainer.hpp"

namespace mpa::testing {

struct TinyCorpus {
  TrapCorpusSpec spec;
  Vocabulary vocab;
  std::vector<PackedSequence> packed;
  ContextMatrix context;
};

inline TinyCorpus tiny_corpus(std::size_t documents = 300, std::size_t max_len = 16,
                              std::uint64_t seed = 3) {
  TinyCorpus c;
  c.spec.documents = documents;
  c.spec.filler_types = 40;
  c.spec.sentence_length = 8;
  const std::string text = synth_corpus(c.spec, seed);
  std::istringstream counts(text);
  c.vocab = Vocabulary::build(counts, 200, 1);
  std::istringstream body(text);
  c.packed = encode_pack(body, c.vocab, max_len);
  c.context = build_context_matrix(c.packed, select_sub_vocab(c.vocab, 30), 3);
  return c;
}

inline TrainConfig tiny_config(TrainMode mode, std::size_t vocab, std::size_t steps = 40) {
  TrainConfig c;
  c.mode = mode;
  c.steps = steps;
  c.batch_size = 8;
  c.max_len = 16;
  c.lr_peak = 1e-3;
  c.warmup_steps = 5;
  c.main.layers = 2;
  c.main.heads = 2;
  c.main.hidden = 16;
  c.main.ffn_dim = 32;
  c.main.guided_layers = 1;
  c.main.guided_heads = 1;
  c.generator.layers = 1;
  c.generator.heads = 1;
  c.generator.hidden = 8;
  c.generator.ffn_dim = 16;
  c.finalize(vocab);
  return c;
}

}  // namespace mpa::testing
