// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mpa/cli.hpp"
#include "mpa/cooccurrence.hpp"
#include "mpa/synth.hpp"
#include "oracles.hpp"

using namespace mpa;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mpa_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string small_text() {
  TrapCorpusSpec spec;
  spec.documents = 200;
  spec.filler_types = 30;
  spec.sentence_length = 8;
  return synth_corpus(spec, 11);
}

const char* kTinyConfig =
    R"({"steps":6,"warmup_steps":2,"batch_size":4,"max_len":16,"log_every":1,"checkpoint_every":3,)"
    R"("main":{"layers":1,"heads":2,"hidden":8,"ffn_dim":16,"guided_layers":1,"guided_heads":1},)"
    R"("generator":{"layers":1,"heads":1,"hidden":8,"ffn_dim":16}})";

// Corpus, vocab, S and config in one directory.
fs::path prepared(const std::string& name) {
  const auto dir = scratch(name);
  spit(dir / "c.txt", small_text());
  spit(dir / "cfg.json", kTinyConfig);
  REQUIRE(cli({"build-vocab", "--corpus", (dir / "c.txt").string(), "--out", (dir / "v.txt").string()}).code == 0);
  REQUIRE(cli({"build-cooccur", "--corpus", (dir / "c.txt").string(), "--vocab", (dir / "v.txt").string(),
               "--out", (dir / "s.mpas").string(), "--topk", "20", "--window", "3"})
              .code == 0);
  return dir;
}

std::vector<std::string> pretrain_args(const fs::path& dir, const std::string& mode,
                                       const fs::path& out) {
  return {"pretrain", "--mode",  mode, "--config", (dir / "cfg.json").string(),
          "--corpus", (dir / "c.txt").string(), "--vocab", (dir / "v.txt").string(),
          "--cooccur", (dir / "s.mpas").string(), "--out-dir", out.string()};
}

}  // namespace

TEST_CASE("sha256 of a known string", "[cli]") {
  const auto dir = scratch("sha");
  spit(dir / "abc", "abc");
  CHECK(sha256_file(dir / "abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("build-vocab is idempotent and honours max-size", "[cli]") {
  const auto dir = scratch("vocab");
  spit(dir / "c.txt", small_text());
  const std::vector<std::string> args{"build-vocab", "--corpus", (dir / "c.txt").string(), "--out",
                                      (dir / "v.txt").string(), "--max-size", "10"};
  REQUIRE(cli(args).code == 0);
  const auto first = slurp(dir / "v.txt");
  const auto first_manifest = slurp(dir / "v.txt.manifest.json");
  REQUIRE(cli(args).code == 0);
  CHECK(slurp(dir / "v.txt") == first);
  CHECK(slurp(dir / "v.txt.manifest.json") == first_manifest);
  const auto vocab = Vocabulary::load(dir / "v.txt");
  CHECK(vocab.size() == 10 + kNumSpecials);
  CHECK(first.rfind("mpa-vocab v1 " + std::to_string(vocab.size()) + "\n", 0) == 0);

  const auto manifest = json::parse(first_manifest);
  CHECK(manifest["inputs"][0]["sha256"] == sha256_file(dir / "c.txt"));
  CHECK(manifest["config"]["max_size"] == 10);

  CHECK(cli({"build-vocab", "--corpus", (dir / "missing.txt").string(), "--out", "x"}).code == 3);
  CHECK(cli({"build-vocab", "--corpus", (dir / "missing.txt").string()}).code == 2);
}

TEST_CASE("build-cooccur matches the nested-loop oracle and clamps K", "[cli][oracle]") {
  const auto dir = scratch("cooccur");
  spit(dir / "c.txt", small_text());
  REQUIRE(cli({"build-vocab", "--corpus", (dir / "c.txt").string(), "--out", (dir / "v.txt").string()}).code == 0);
  const auto run = cli({"build-cooccur", "--corpus", (dir / "c.txt").string(), "--vocab",
                        (dir / "v.txt").string(), "--out", (dir / "s.mpas").string(), "--topk",
                        "100000", "--window", "4", "--max-len", "16"});
  REQUIRE(run.code == 0);
  CHECK(run.err.find("clamped") != std::string::npos);

  const auto vocab = Vocabulary::load(dir / "v.txt");
  const auto loaded = ContextMatrix::load(dir / "s.mpas");
  REQUIRE(loaded.k() == vocab.size() - kNumSpecials);
  CHECK(loaded.window() == 4);

  std::istringstream text(slurp(dir / "c.txt"));
  std::vector<std::vector<TokenId>> raw;
  for (auto& p : encode_pack(text, vocab, 16)) raw.push_back(p.ids);
  const auto& ids = loaded.sub_vocab().ids();
  const std::set<TokenId> sub(ids.begin(), ids.end());
  const auto expected = oracle::naive_context_s(oracle::cooccurrence_counts(raw, sub, 4),
                                                std::vector<TokenId>(ids.begin(), ids.end()));
  for (std::size_t i = 0; i < expected.size(); ++i)
    REQUIRE(loaded.s()[i] == static_cast<double>(static_cast<float>(expected[i])));

  spit(dir / "bad_vocab.txt", "not a vocabulary\n");
  CHECK(cli({"build-cooccur", "--corpus", (dir / "c.txt").string(), "--vocab",
             (dir / "bad_vocab.txt").string(), "--out", (dir / "t.mpas").string()})
            .code == 3);
}

TEST_CASE("pretrain checks config before compute and supports dry-run", "[cli]") {
  const auto dir = prepared("pretrain_cfg");
  auto args = pretrain_args(dir, "electra-mpa", dir / "run");
  args.erase(args.begin() + 9, args.begin() + 11);  // drop --cooccur
  CHECK(cli(args).code == 2);
  CHECK_FALSE(fs::exists(dir / "run"));

  auto dry = pretrain_args(dir, "electra", dir / "dry");
  dry.insert(dry.end(), {"--gamma", "3", "--dry-run"});
  const auto r = cli(dry);
  CHECK(r.code == 0);
  CHECK_FALSE(fs::exists(dir / "dry"));
  CHECK(r.err.find("gamma is ignored") != std::string::npos);
  const auto cfg = json::parse(r.out);
  CHECK(cfg["mode"] == "electra");
  CHECK(cfg["steps"] == 6);
  CHECK(cfg["lambda"] == 50.0);
  CHECK(cfg.contains("main"));

  spit(dir / "typo.json", R"({"stepz": 3})");
  auto typo = pretrain_args(dir, "electra", dir / "typo");
  typo[4] = (dir / "typo.json").string();
  CHECK(cli(typo).code == 2);
}

TEST_CASE("pretrain writes metrics, checkpoints and resumes bitwise", "[cli]") {
  const auto dir = prepared("pretrain_run");
  const auto r = cli(pretrain_args(dir, "electra-mpa", dir / "full"));
  REQUIRE(r.code == 0);
  const auto last = json::parse(r.out);
  CHECK(last["step"] == 6);
  for (auto key : {"lr", "L_G", "L_D", "L_A", "total", "misprediction_rate"}) CHECK(last.contains(key));

  std::istringstream lines(slurp(dir / "full" / "metrics.jsonl"));
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) ++count;
  CHECK(count == 6);
  CHECK(fs::exists(dir / "full" / "checkpoints" / "step-3" / "state.mpat"));
  CHECK(fs::exists(dir / "full" / "final" / "generator.mpac"));
  CHECK(fs::exists(dir / "full" / "manifest.json"));

  // Interrupt after step 3 by copying the partial run, then resume.
  fs::copy(dir / "full", dir / "resumed", fs::copy_options::recursive);
  auto args = pretrain_args(dir, "electra-mpa", dir / "resumed");
  args.insert(args.end(), {"--resume", (dir / "full" / "checkpoints" / "step-3" / "state.mpat").string()});
  REQUIRE(cli(args).code == 0);
  CHECK(slurp(dir / "resumed" / "metrics.jsonl") == slurp(dir / "full" / "metrics.jsonl"));
  for (auto f : {"main.mpac", "generator.mpac", "state.mpat"})
    CHECK(slurp(dir / "resumed" / "final" / f) == slurp(dir / "full" / "final" / f));

  // Re-running from scratch is byte-identical.
  REQUIRE(cli(pretrain_args(dir, "electra-mpa", dir / "again")).code == 0);
  CHECK(slurp(dir / "again" / "final" / "state.mpat") == slurp(dir / "full" / "final" / "state.mpat"));
}

TEST_CASE("eval and dump-attention read checkpoints", "[cli]") {
  const auto dir = prepared("eval");
  REQUIRE(cli(pretrain_args(dir, "electra-mpa", dir / "run")).code == 0);
  const auto ck_dir = dir / "run" / "final";

  const auto r = cli({"eval", "--checkpoint", ck_dir.string(), "--heldout", (dir / "c.txt").string(),
                      "--report", (dir / "report.json").string()});
  REQUIRE(r.code == 0);
  const auto report = json::parse(slurp(dir / "report.json"));
  for (auto key : {"masked_positions", "masked_accuracy", "perplexity", "rtd_accuracy"}) {
    REQUIRE(report.contains(key));
    CHECK_FALSE(report[key].is_null());
  }
  CHECK(fs::exists(dir / "report.json.manifest.json"));

  const auto ck = load_checkpoint(ck_dir);
  const std::string sentence = "w1 bed w2 qqqunknown w3";
  REQUIRE(cli({"dump-attention", "--checkpoint", ck_dir.string(), "--sentence", sentence, "--out",
               (dir / "att.jsonl").string()})
              .code == 0);
  std::vector<TokenId> ids{kCls};
  for (auto id : ck.vocab.encode(sentence)) ids.push_back(id);
  ForwardOptions opts;
  opts.keep_attention = true;
  const std::vector<std::vector<TokenId>> batch{ids};
  const auto fwd = forward(ck.main, batch, opts);

  std::istringstream lines(slurp(dir / "att.jsonl"));
  std::string line;
  std::size_t records = 0;
  bool saw_unk = false;
  while (std::getline(lines, line)) {
    const auto j = json::parse(line);
    const std::size_t layer = j["layer"], head = j["head"], pos = j["position"];
    const bool guided = layer < ck.main.config.guided_layers && head < ck.main.config.guided_heads;
    CHECK(j["guided"].get<bool>() == guided);
    saw_unk = saw_unk || j["unk"].get<bool>();
    const auto probs = j["probs"].get<std::vector<double>>();
    const auto logits = j["logits"].get<std::vector<double>>();
    double sum = 0;
    for (double p : probs) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    const auto& rec = fwd.attention.at(layer * ck.main.config.heads + head);
    REQUIRE(rec.layer == layer);
    REQUIRE(rec.head == head);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      REQUIRE(std::abs(logits[k] - rec.logits.data()[pos * ids.size() + k]) <= 1e-12);
      REQUIRE(std::abs(probs[k] - rec.probs.data()[pos * ids.size() + k]) <= 1e-12);
    }
    ++records;
  }
  CHECK(records == ck.main.config.layers * ck.main.config.heads * ids.size());
  CHECK(saw_unk);

  CHECK(cli({"dump-attention", "--checkpoint", ck_dir.string(), "--sentence", "zzz yyy", "--out",
             (dir / "oov.jsonl").string()})
            .code == 0);

  // A model file that disagrees with config.json is a format error.
  std::string cfg = slurp(ck_dir / "config.json");
  const auto pos = cfg.find("\"hidden\": 8");
  REQUIRE(pos != std::string::npos);
  cfg.replace(pos, 11, "\"hidden\": 4");
  spit(ck_dir / "config.json", cfg);
  CHECK(cli({"eval", "--checkpoint", ck_dir.string(), "--heldout", (dir / "c.txt").string(),
             "--report", (dir / "r2.json").string()})
            .code == 3);
}

TEST_CASE("experiment-trap writes one row per mode and seed, reproducibly", "[cli][trap]") {
  const auto dir = scratch("trap");
  const std::vector<std::string> args{"experiment-trap", "--seed", "7", "--seeds", "2", "--steps", "3",
                                      "--ablations", "--out-dir", (dir / "a").string()};
  const auto r = cli(args);
  REQUIRE(r.code == 0);
  const auto table = slurp(dir / "a" / "table.tsv");
  std::istringstream lines(table);
  std::string line;
  std::getline(lines, line);
  CHECK(line.rfind("mode\tseed", 0) == 0);
  std::set<std::pair<std::string, std::string>> rows;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    std::string mode, seed;
    std::getline(cells, mode, '\t');
    std::getline(cells, seed, '\t');
    rows.insert({mode, seed});
  }
  CHECK(rows.size() == 8);
  CHECK(rows.count({"electra-mpa", "8"}) == 1);
  CHECK(rows.count({"mpa-ground", "7"}) == 1);

  auto again = args;
  again.back() = (dir / "b").string();
  REQUIRE(cli(again).code == 0);
  CHECK(slurp(dir / "b" / "table.tsv") == table);
  CHECK(slurp(dir / "b" / "comparison.json") == slurp(dir / "a" / "comparison.json"));
  CHECK(fs::exists(dir / "a" / "manifest.json"));

  const auto dry = cli({"experiment-trap", "--out-dir", (dir / "c").string(), "--dry-run"});
  CHECK(dry.code == 0);
  CHECK_FALSE(fs::exists(dir / "c"));
  CHECK(json::parse(dry.out)["seeds"].size() == 5);
}
