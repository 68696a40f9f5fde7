// SPDX-License-Identifier: Apache-2.0
#include "mpa/cli.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mpa/cooccurrence.hpp"
#include "mpa/error.hpp"
#include "mpa/eval.hpp"
#include "mpa/experiment.hpp"

namespace mpa {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::out | mode);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

struct Manifest {
  std::string command;
  json config;
  std::vector<fs::path> inputs;
  std::vector<fs::path> artifacts;

  void write(const fs::path& path) const {
    json in = json::array();
    for (const auto& p : inputs) in.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    json art = json::array();
    for (const auto& p : artifacts) art.push_back(p.string());
    json j{{"tool", "mpa"},
           {"version", kToolVersion},
           {"command", command},
           {"config", config},
           {"inputs", in},
           {"artifacts", art}};
    write_text(path, j.dump(2) + "\n");
  }
};

fs::path sidecar(const fs::path& artifact) { return fs::path(artifact.string() + ".manifest.json"); }

std::vector<PackedSequence> encode_file(const fs::path& path, const Vocabulary& vocab,
                                        std::size_t max_len) {
  auto in = open_in(path);
  return encode_pack(in, vocab, max_len);
}

Model load_model_file(const fs::path& path) {
  auto in = open_in(path);
  return load_model(in);
}

void save_model_file(const fs::path& path, const Model& model) {
  auto out = open_out(path);
  save_model(model, out);
  if (!out) throw FormatError("write failed: " + path.string());
}

// ---- commands ---------------------------------------------------------------

struct VocabArgs {
  std::string corpus, out;
  std::size_t max_size = 30000;
  std::uint64_t min_count = 1;
};

int cmd_build_vocab(const VocabArgs& a, bool dry_run, std::ostream& out) {
  json cfg{{"corpus", a.corpus}, {"out", a.out}, {"max_size", a.max_size}, {"min_count", a.min_count}};
  if (dry_run) {
    out << cfg.dump(2) << "\n";
    return 0;
  }
  auto in = open_in(a.corpus);
  const Vocabulary vocab = Vocabulary::build(in, a.max_size, a.min_count);
  vocab.save(fs::path(a.out));
  Manifest{"build-vocab", cfg, {a.corpus}, {a.out}}.write(sidecar(a.out));
  out << "vocab " << vocab.size() << " entries -> " << a.out << "\n";
  return 0;
}

struct CooccurArgs {
  std::string corpus, vocab, out;
  std::size_t topk = 5000;
  std::size_t window = 10;
  std::size_t max_len = 128;
};

int cmd_build_cooccur(CooccurArgs a, bool dry_run, std::ostream& out, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::load(fs::path(a.vocab));
  const std::size_t available = vocab.size() - kNumSpecials;
  if (a.topk > available) {
    err << "warning: --topk " << a.topk << " exceeds the " << available
        << " non-special vocabulary entries; clamped\n";
    a.topk = available;
  }
  if (a.window < 1) throw ConfigError("--window must be at least 1");
  json cfg{{"corpus", a.corpus}, {"vocab", a.vocab}, {"out", a.out},
           {"topk", a.topk},     {"window", a.window}, {"max_len", a.max_len}};
  if (dry_run) {
    out << cfg.dump(2) << "\n";
    return 0;
  }
  const auto packed = encode_file(a.corpus, vocab, a.max_len);
  const auto context = build_context_matrix(packed, select_sub_vocab(vocab, a.topk), a.window);
  context.save(fs::path(a.out));
  Manifest{"build-cooccur", cfg, {a.corpus, a.vocab}, {a.out}}.write(sidecar(a.out));
  out << "context matrix K=" << context.k() << " window=" << context.window() << " -> " << a.out
      << "\n";
  return 0;
}

struct PretrainArgs {
  std::string mode, config, corpus, vocab, cooccur, heldout, out_dir, resume;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma, lambda;
};

// Drop metric lines past the resumed step so a resumed run rewrites them.
void trim_jsonl(const fs::path& path, std::size_t last_step) {
  if (!fs::exists(path)) return;
  std::istringstream in(read_text(path));
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (json::parse(line).at("step").get<std::size_t>() <= last_step) kept += line + "\n";
  }
  write_text(path, kept);
}

int cmd_pretrain(const PretrainArgs& a, bool dry_run, std::ostream& out, std::ostream& err) {
  const Vocabulary vocab = Vocabulary::load(fs::path(a.vocab));
  TrainConfig cfg = default_train_config(vocab.size());
  bool gamma_set = a.gamma.has_value();
  if (!a.config.empty()) {
    const std::string text = read_text(a.config);
    cfg = config_from_json(text, cfg);
    const json j = json::parse(text, nullptr, false);
    gamma_set = gamma_set || (j.is_object() && j.contains("gamma"));
  }
  if (!a.mode.empty()) cfg.mode = parse_mode(a.mode);
  if (a.steps) cfg.steps = *a.steps;
  if (a.seed) cfg.seed = *a.seed;
  if (a.gamma) cfg.gamma = *a.gamma;
  if (a.lambda) cfg.lambda = *a.lambda;
  cfg.finalize(vocab.size());
  if (!cfg.uses_mpa() && gamma_set)
    err << "warning: gamma is ignored in mode " << to_string(cfg.mode) << "\n";
  if (cfg.uses_mpa() && a.cooccur.empty())
    throw ConfigError("mode " + to_string(cfg.mode) + " needs --cooccur");

  if (dry_run) {
    out << json::parse(config_to_json(cfg)).dump(2) << "\n";
    return 0;
  }

  std::optional<ContextMatrix> context;
  if (!a.cooccur.empty()) context = ContextMatrix::load(fs::path(a.cooccur));
  if (!cfg.uses_mpa()) context.reset();
  std::vector<PackedSequence> heldout;
  if (!a.heldout.empty()) heldout = encode_file(a.heldout, vocab, cfg.max_len);

  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  Trainer trainer(cfg, encode_file(a.corpus, vocab, cfg.max_len), context);
  if (!a.resume.empty()) trainer.load_state(a.resume);

  const fs::path metrics_path = dir / "metrics.jsonl";
  const fs::path eval_path = dir / "eval.jsonl";
  if (a.resume.empty()) {
    write_text(metrics_path, "");
    if (!heldout.empty()) write_text(eval_path, "");
  } else {
    trim_jsonl(metrics_path, trainer.step_count());
    trim_jsonl(eval_path, trainer.step_count());
  }
  auto metrics = open_out(metrics_path, std::ios::app);
  std::optional<std::ofstream> evals;
  if (!heldout.empty()) evals = open_out(eval_path, std::ios::app);

  Manifest manifest{"pretrain", json::parse(config_to_json(cfg)), {a.corpus, a.vocab}, {metrics_path}};
  for (const auto* p : {&a.config, &a.cooccur, &a.heldout, &a.resume})
    if (!p->empty()) manifest.inputs.emplace_back(*p);

  auto checkpoint = [&](const fs::path& where) {
    save_checkpoint(where, cfg, vocab, trainer.main(), trainer.generator());
    trainer.save_state((where / "state.mpat").string());
    manifest.artifacts.push_back(where);
  };

  std::string last_line;
  trainer.run([&](const StepMetrics& m) {
    last_line = m.to_json();
    if (m.step % cfg.log_every == 0 || m.step == cfg.steps) metrics << last_line << "\n" << std::flush;
    if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 && m.step < cfg.steps)
      checkpoint(dir / "checkpoints" / ("step-" + std::to_string(m.step)));
    if (evals && cfg.eval_every > 0 && m.step % cfg.eval_every == 0) {
      const auto report = eval_probe(cfg, trainer.generator(), trainer.main(), heldout,
                                     trainer.context(), nullptr);
      json j = json::parse(report.to_json());
      j["step"] = m.step;
      *evals << j.dump() << "\n" << std::flush;
    }
    return true;
  });
  if (!metrics) throw FormatError("write failed: " + metrics_path.string());
  checkpoint(dir / "final");
  if (evals) manifest.artifacts.push_back(eval_path);
  manifest.write(dir / "manifest.json");
  if (!last_line.empty()) out << last_line << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, heldout, report;
  std::size_t max_sequences = 256;
};

int cmd_eval(const EvalArgs& a, bool dry_run, std::ostream& out) {
  json cfg{{"checkpoint", a.checkpoint}, {"heldout", a.heldout}, {"report", a.report},
           {"max_sequences", a.max_sequences}};
  if (dry_run) {
    out << cfg.dump(2) << "\n";
    return 0;
  }
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto heldout = encode_file(a.heldout, ck.vocab, ck.config.max_len);
  EvalOptions opts;
  opts.max_sequences = a.max_sequences;
  const auto report = eval_probe(ck.config, ck.generator ? &*ck.generator : nullptr, ck.main,
                                 heldout, nullptr, nullptr, opts);
  write_text(a.report, json::parse(report.to_json()).dump(2) + "\n");
  const fs::path dir(a.checkpoint);
  Manifest{"eval", cfg,
           {dir / "config.json", dir / "main.mpac", a.heldout},
           {a.report}}
      .write(sidecar(a.report));
  out << report.to_json() << "\n";
  return 0;
}

struct DumpArgs {
  std::string checkpoint, sentence, out;
};

int cmd_dump_attention(const DumpArgs& a, bool dry_run, std::ostream& out) {
  json cfg{{"checkpoint", a.checkpoint}, {"sentence", a.sentence}, {"out", a.out}};
  if (dry_run) {
    out << cfg.dump(2) << "\n";
    return 0;
  }
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  std::vector<TokenId> ids{kCls};
  for (auto id : ck.vocab.encode(a.sentence)) {
    if (ids.size() >= ck.config.max_len) break;
    ids.push_back(id);
  }
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.keep_attention = true;
  const std::vector<std::vector<TokenId>> batch{ids};
  const auto fwd = forward(ck.main, batch, opts);
  const std::size_t n = ids.size();
  std::ostringstream lines;
  for (const auto& rec : fwd.attention) {
    const bool guided = rec.layer < ck.main.config.guided_layers && rec.head < ck.main.config.guided_heads;
    for (std::size_t p = 0; p < n; ++p) {
      const auto logits = rec.logits.data().subspan(p * n, n);
      const auto probs = rec.probs.data().subspan(p * n, n);
      json j{{"layer", rec.layer},
             {"head", rec.head},
             {"position", p},
             {"token", ck.vocab.token(ids[p])},
             {"unk", ids[p] == kUnk},
             {"guided", guided},
             {"logits", std::vector<double>(logits.begin(), logits.end())},
             {"probs", std::vector<double>(probs.begin(), probs.end())}};
      lines << j.dump() << "\n";
    }
  }
  write_text(a.out, lines.str());
  const fs::path dir(a.checkpoint);
  Manifest{"dump-attention", cfg, {dir / "config.json", dir / "main.mpac"}, {a.out}}.write(sidecar(a.out));
  out << fwd.attention.size() << " head(s) x " << n << " positions -> " << a.out << "\n";
  return 0;
}

struct TrapArgs {
  std::uint64_t seed = 1;
  std::size_t seeds = 5;
  std::optional<std::size_t> steps;
  std::string out_dir;
  bool ablations = false;
};

json trap_config_json(const TrapExperimentConfig& c) {
  return {{"documents", c.corpus.documents},
          {"filler_types", c.corpus.filler_types},
          {"sentence_length", c.corpus.sentence_length},
          {"pair_rate", c.corpus.pair_rate},
          {"answer_rate", c.corpus.answer_rate},
          {"trap_rate", c.corpus.trap_rate},
          {"max_gap", c.corpus.max_gap},
          {"vocab_max", c.vocab_max},
          {"sub_vocab", c.sub_vocab},
          {"window", c.window},
          {"probe_traps", c.probe_traps},
          {"heldout_fraction_pct", c.heldout_fraction_pct},
          {"baseline", to_string(c.baseline)},
          {"treatment", to_string(c.treatment)},
          {"seeds", c.seeds},
          {"ablations", c.ablations},
          {"train", json::parse(config_to_json(c.train))}};
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream s;
  s << std::setprecision(6) << *v;
  return s.str();
}

std::string fmt(double v) { return fmt(std::optional<double>(v)); }

int cmd_experiment_trap(const TrapArgs& a, bool dry_run, std::ostream& out, std::ostream& err) {
  TrapExperimentConfig c = default_trap_experiment();
  if (a.steps) {
    c.train.steps = *a.steps;
    if (c.train.warmup_steps > c.train.steps) {
      c.train.warmup_steps = c.train.steps / 10;
      err << "warning: warmup shortened to " << c.train.warmup_steps << " steps\n";
    }
  }
  if (a.seeds < 1) throw ConfigError("--seeds must be at least 1");
  c.seeds.clear();
  for (std::size_t i = 0; i < a.seeds; ++i) c.seeds.push_back(a.seed + i);
  c.ablations = a.ablations;
  const json cfg = trap_config_json(c);
  if (dry_run) {
    out << cfg.dump(2) << "\n";
    return 0;
  }
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  const auto result = run_trap_experiment(c, [&](const TrapRun& r) {
    err << to_string(r.mode) << " seed " << r.seed << " done\n";
  });
  std::ostringstream table;
  table << "mode\tseed\tsteps\tmasked_accuracy\trtd_accuracy\ttrap_cloze\ttrap_rtd\tcue_mass\t"
           "partner_mass\tfrequent_mass\trare_mass\tother_mass\tL_A\n";
  for (const auto& r : result.runs) {
    const TrapReport& t = *r.eval.trap;
    table << to_string(r.mode) << "\t" << r.seed << "\t" << r.steps << "\t"
          << fmt(r.eval.masked_accuracy) << "\t" << fmt(r.eval.rtd_accuracy) << "\t"
          << fmt(t.cloze_accuracy) << "\t" << fmt(t.rtd_accuracy) << "\t" << fmt(t.cue_mass)
          << "\t" << fmt(t.partner_mass) << "\t" << fmt(t.partition.frequent) << "\t"
          << fmt(t.partition.rare) << "\t" << fmt(t.partition.other) << "\t" << fmt(r.last.l_a)
          << "\n";
  }
  // Wall-clock seconds vary run to run; keep them out of the table.
  json summary = json::parse(result.to_json());
  for (auto& r : summary["runs"]) r.erase("seconds");
  write_text(dir / "table.tsv", table.str());
  write_text(dir / "comparison.json", summary.dump(2) + "\n");
  Manifest{"experiment-trap", cfg, {}, {dir / "table.tsv", dir / "comparison.json"}}.write(
      dir / "manifest.json");
  out << table.str() << "rtd_wins " << result.rtd_wins << "/" << result.seeds << " mass_wins "
      << result.mass_wins << "/" << result.seeds << "\n";
  return 0;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const TrainConfig& config, const Vocabulary& vocab,
                     const Model& main, const Model* generator) {
  fs::create_directories(dir);
  write_text(dir / "config.json", json::parse(config_to_json(config)).dump(2) + "\n");
  vocab.save(dir / "vocab.txt");
  save_model_file(dir / "main.mpac", main);
  if (generator != nullptr) save_model_file(dir / "generator.mpac", *generator);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  Checkpoint ck;
  ck.vocab = Vocabulary::load(dir / "vocab.txt");
  ck.config = config_from_json(read_text(dir / "config.json"), default_train_config(ck.vocab.size()));
  try {
    ck.config.finalize(ck.vocab.size());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  ck.main = load_model_file(dir / "main.mpac");
  if (!(ck.main.config == ck.config.main))
    throw FormatError("main.mpac does not match config.json in " + dir.string());
  if (ck.config.uses_generator()) {
    ck.generator = load_model_file(dir / "generator.mpac");
    if (!(ck.generator->config == ck.config.generator))
      throw FormatError("generator.mpac does not match config.json in " + dir.string());
  }
  return ck;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mpa: mis-prediction guided attention pre-training at desk scale", "mpa"};
  app.require_subcommand(1);
  bool dry_run = false;
  app.add_flag("--dry-run", dry_run, "print the resolved config and exit");

  VocabArgs va;
  auto* vocab_cmd = app.add_subcommand("build-vocab", "count tokens and write a vocabulary");
  vocab_cmd->add_option("--corpus", va.corpus)->required();
  vocab_cmd->add_option("--out", va.out)->required();
  vocab_cmd->add_option("--max-size", va.max_size);
  vocab_cmd->add_option("--min-count", va.min_count);
  vocab_cmd->add_flag("--dry-run", dry_run);

  CooccurArgs ca;
  auto* cooc_cmd = app.add_subcommand("build-cooccur", "build the context matrix S");
  cooc_cmd->add_option("--corpus", ca.corpus)->required();
  cooc_cmd->add_option("--vocab", ca.vocab)->required();
  cooc_cmd->add_option("--out", ca.out)->required();
  cooc_cmd->add_option("--topk", ca.topk);
  cooc_cmd->add_option("--window", ca.window);
  cooc_cmd->add_option("--max-len", ca.max_len);
  cooc_cmd->add_flag("--dry-run", dry_run);

  PretrainArgs pa;
  auto* pre_cmd = app.add_subcommand("pretrain", "train a model");
  pre_cmd->add_option("--mode", pa.mode);
  pre_cmd->add_option("--config", pa.config, "JSON config; flags override it");
  pre_cmd->add_option("--corpus", pa.corpus)->required();
  pre_cmd->add_option("--vocab", pa.vocab)->required();
  pre_cmd->add_option("--cooccur", pa.cooccur);
  pre_cmd->add_option("--heldout", pa.heldout);
  pre_cmd->add_option("--out-dir", pa.out_dir)->required();
  pre_cmd->add_option("--resume", pa.resume, "trainer state file (state.mpat)");
  pre_cmd->add_option("--steps", pa.steps);
  pre_cmd->add_option("--seed", pa.seed);
  pre_cmd->add_option("--gamma", pa.gamma);
  pre_cmd->add_option("--lambda", pa.lambda);
  pre_cmd->add_flag("--dry-run", dry_run);

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on held-out text");
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->required();
  eval_cmd->add_option("--heldout", ea.heldout)->required();
  eval_cmd->add_option("--report", ea.report)->required();
  eval_cmd->add_option("--max-sequences", ea.max_sequences);
  eval_cmd->add_flag("--dry-run", dry_run);

  DumpArgs da;
  auto* dump_cmd = app.add_subcommand("dump-attention", "write attention rows as JSON lines");
  dump_cmd->add_option("--checkpoint", da.checkpoint)->required();
  dump_cmd->add_option("--sentence", da.sentence)->required();
  dump_cmd->add_option("--out", da.out)->required();
  dump_cmd->add_flag("--dry-run", dry_run);

  TrapArgs ta;
  auto* trap_cmd = app.add_subcommand("experiment-trap", "baseline vs MPA on the planted corpus");
  trap_cmd->add_option("--seed", ta.seed, "first seed");
  trap_cmd->add_option("--seeds", ta.seeds, "number of consecutive seeds");
  trap_cmd->add_option("--steps", ta.steps);
  trap_cmd->add_option("--out-dir", ta.out_dir)->required();
  trap_cmd->add_flag("--ablations", ta.ablations, "also run mpa-ground and mpa-constant");
  trap_cmd->add_flag("--dry-run", dry_run);

  std::vector<std::string> argv_store{"mpa"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*vocab_cmd) return cmd_build_vocab(va, dry_run, out);
    if (*cooc_cmd) return cmd_build_cooccur(ca, dry_run, out, err);
    if (*pre_cmd) return cmd_pretrain(pa, dry_run, out, err);
    if (*eval_cmd) return cmd_eval(ea, dry_run, out);
    if (*dump_cmd) return cmd_dump_attention(da, dry_run, out);
    if (*trap_cmd) return cmd_experiment_trap(ta, dry_run, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

}  // namespace mpa
