#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "avrl/checks.hpp"
#include "avrl/config.hpp"
#include "avrl/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace avrl;

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "run configuration (JSON); desk defaults when omitted");
  cmd->add_option("--set", c.sets, "override a config value, e.g. --set data.n_utterances=30");
  cmd->add_option("--seed", c.seed, "global seed (overrides the config)");
}

// `path.to.key=value`; the value is parsed as JSON and falls back to a string.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got " + assignment);
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("--set " + key + ": " + parts[i] + " is not a section");
  }
  (*node)[parts.back()] = value;
}

RunConfig resolve(const Common& c) {
  json j = c.config.empty() ? json(to_json(desk_config())) : [&] {
    std::ifstream is(c.config);
    if (!is) throw ConfigError("cannot open config file: " + c.config);
    json parsed = json::parse(is, nullptr, false);
    if (parsed.is_discarded()) throw ConfigError("config file " + c.config + " is not valid JSON");
    return parsed;
  }();
  for (const auto& s : c.sets) apply_override(j, s);
  if (c.seed) j["seed"] = *c.seed;
  return parse_run_config(j);
}

Corpus load_corpus(const std::string& path, const RunConfig& cfg) {
  auto corpus = read_corpus(path);
  if (corpus.samples_per_frame != cfg.model.samples_per_frame) {
    throw ConfigError("corpus " + path + " has " + std::to_string(corpus.samples_per_frame) +
                      " samples per frame, model expects " + std::to_string(cfg.model.samples_per_frame));
  }
  return corpus;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text << '\n';
}

// The configuration stored in checkpoints leaves out where the run wrote, so
// identical runs produce identical files.
std::string checkpoint_meta(const RunConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("output_dir");
  return j.dump();
}

RunConfig checkpoint_config(const Checkpoint& ckpt) {
  json j = json::parse(ckpt.meta, nullptr, false);
  if (j.is_discarded()) throw DataError("checkpoint carries no readable configuration");
  return parse_run_config(j);
}

bool has_head(const Checkpoint& ckpt) {
  for (const auto& [path, t] : ckpt.params) {
    if (path.rfind("head.", 0) == 0) return true;
  }
  return false;
}

// Rebuilds the model (and task head, when present) a checkpoint was written from.
AvModel load_model(const Checkpoint& ckpt, const RunConfig& saved) {
  auto model = AvModel::create(saved.model, 0);
  if (has_head(ckpt)) {
    Rng rng(0);
    init_head(saved.finetune, model.config.dim(), model.params, rng);
  }
  const auto n = restore_params(model.params, ckpt.params);
  if (n != ckpt.params.size() || n != model.params.size()) {
    throw ConfigError("checkpoint parameters do not match the model they describe");
  }
  return model;
}

std::uint64_t stream_seed(std::uint64_t seed, const char* name) { return derive_seed(seed, {hash_string(name)}); }

// Keeps what an uninterrupted run had written when it reached `step`. Train
// records carry the step count before their update, so the one labelled
// `step` is redone. A stopped run also validates on exit, off schedule.
void truncate_metrics(const fs::path& path, std::size_t step, std::size_t validate_every) {
  std::ifstream is(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    const auto s = j.at("step").get<std::size_t>();
    const bool val = j.at("split") == "val";
    if (s < step || (s == step && val && validate_every != 0 && s % validate_every == 0)) keep.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : keep) os << l << '\n';
}

int cmd_synth(const Common& c, const std::string& out) {
  const auto cfg = resolve(c);
  const auto corpus = generate_corpus(cfg.data, cfg.seed);
  if (corpus.utterances.empty()) std::cerr << "warning: n_utterances is 0, writing an empty corpus\n";
  write_corpus(corpus, out);
  std::cout << "wrote " << corpus.utterances.size() << " utterances to " << out << '\n';
  return kOk;
}

struct PretrainArgs {
  std::string corpus, val_corpus, out, resume;
  std::size_t stop_after = 0;
};

int cmd_pretrain(const Common& c, const PretrainArgs& a) {
  auto cfg = resolve(c);
  if (!a.out.empty()) cfg.output_dir = a.out;
  const auto& pc = cfg.pretrain;
  validate_pretrain_mode(cfg.model.objective, pc.exclude);
  const auto train = load_corpus(a.corpus, cfg);
  const auto val = a.val_corpus.empty() ? train : load_corpus(a.val_corpus, cfg);

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  save_run_config(cfg, dir / "config.json");
  const auto hash = config_hash(cfg);
  const auto meta = checkpoint_meta(cfg);

  auto model = AvModel::create(cfg.model, stream_seed(cfg.seed, "model"));
  EpochBatcher batcher(train.utterances, pc.train, cfg.model.samples_per_frame, stream_seed(cfg.seed, "batches"));
  Trainer trainer(
      model.params, pc.train, std::move(batcher),
      [&](const auto& group, std::uint64_t s) { return pretrain_gradients(model, group, pc.exclude, s); }, cfg.seed);
  const auto val_seed = stream_seed(cfg.seed, "validation");
  trainer.set_validation([&] { return pretrain_evaluate(model, val.utterances, pc.exclude, val_seed); });

  const auto metrics_path = dir / "metrics.jsonl";
  if (!a.resume.empty()) {
    const auto ckpt = load_checkpoint(a.resume);
    if (ckpt.config_hash != hash) throw ConfigError("checkpoint " + a.resume + " was written with a different config");
    trainer.restore(ckpt);
    truncate_metrics(metrics_path, trainer.step_count(), pc.train.validate_every);
  }
  std::ofstream metrics(metrics_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  trainer.set_sink([&](const MetricsRecord& r) {
    metrics << metrics_json(r) << '\n';
    metrics.flush();
    if (r.split == "val") std::cout << metrics_json(r) << '\n';
  });

  auto save = [&](const fs::path& path) { save_checkpoint(trainer.checkpoint(hash, meta), path); };
  trainer.set_step_hook([&](std::size_t step) {
    if (pc.train.checkpoint_every != 0 && step % pc.train.checkpoint_every == 0) {
      save(dir / ("step-" + std::to_string(step) + ".ckpt"));
      save(dir / "last.ckpt");
    }
  });
  const auto total = pc.train.schedule.total_steps;
  const auto until = a.stop_after != 0 ? std::min(a.stop_after, total) : total;
  trainer.run(until);
  save(dir / "last.ckpt");
  if (trainer.step_count() >= total) save(dir / "pretrained.ckpt");
  std::cout << "stopped at step " << trainer.step_count() << " of " << total << "; checkpoints in " << dir << '\n';
  return kOk;
}

struct FinetuneArgs {
  std::string checkpoint, corpus, val_corpus, out;
};

int cmd_finetune(const Common& c, const FinetuneArgs& a) {
  auto cfg = resolve(c);
  if (!a.out.empty()) cfg.output_dir = a.out;
  const auto train = load_corpus(a.corpus, cfg);
  const auto val = load_corpus(a.val_corpus, cfg);

  AvModel model;
  if (a.checkpoint.empty()) {
    model = AvModel::create(cfg.model, stream_seed(cfg.seed, "model"));
  } else {
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto saved = checkpoint_config(ckpt);
    if (model_hash(saved.model) != model_hash(cfg.model)) {
      throw ConfigError("checkpoint " + a.checkpoint + " was trained with a different model config");
    }
    if (has_head(ckpt)) throw ConfigError("checkpoint " + a.checkpoint + " is already fine-tuned");
    check_task_init(cfg.finetune.task, saved.pretrain.exclude);
    model = load_model(ckpt, saved);
  }

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  save_run_config(cfg, dir / "config.json");
  const auto result = finetune(model, cfg.finetune, train.utterances, val.utterances, cfg.seed);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  for (const auto& r : result.metrics) metrics << metrics_json(r) << '\n';
  write_text(dir / "report.json", report_json(result.report));

  Checkpoint ckpt;
  ckpt.config_hash = config_hash(cfg);
  ckpt.seed = cfg.seed;
  ckpt.step = result.best_step;
  ckpt.meta = checkpoint_meta(cfg);
  ckpt.params = snapshot(model.params);
  save_checkpoint(ckpt, dir / "finetuned.ckpt");

  const auto& r = result.report;
  std::cout << task_name(cfg.finetune.task) << " best step " << result.best_step << " of " << result.steps;
  if (r.cer) std::cout << " cer " << *r.cer << " wer " << *r.wer;
  if (r.accuracy) std::cout << " accuracy " << *r.accuracy;
  std::cout << "; outputs in " << dir << '\n';
  return kOk;
}

// Table-style names: x_to_0 zeroes the input, v_to_0 / a_to_0 the embedding,
// v_to_m / a_to_m substitute the mask embedding.
ExclusionStrategy parse_strategy(const std::string& name, FinetuneTask task) {
  if (name == "input_zero") return ExclusionStrategy::input_zero;
  if (name == "embedding_zero") return ExclusionStrategy::embedding_zero;
  if (name == "embedding_mask") return ExclusionStrategy::embedding_mask;
  if (name.size() == 6 && name.substr(1, 4) == "_to_") {
    const auto excluded = task_exclusion(task);
    const char want = excluded == ExcludedModality::visual ? 'v' : excluded == ExcludedModality::audio ? 'a' : 0;
    if (name[0] != 'x' && name[0] != want) {
      throw ConfigError("strategy " + name + " does not match task " + task_name(task));
    }
    if (name[0] == 'x' && name[5] == '0') return ExclusionStrategy::input_zero;
    if (name[0] != 'x' && name[5] == '0') return ExclusionStrategy::embedding_zero;
    if (name[0] != 'x' && name[5] == 'm') return ExclusionStrategy::embedding_mask;
  }
  throw ConfigError("unknown strategy " + name);
}

struct EvalArgs {
  std::string checkpoint, corpus, strategy, out;
};

int cmd_eval(const EvalArgs& a) {
  const auto ckpt = load_checkpoint(a.checkpoint);
  if (!has_head(ckpt)) throw ConfigError("checkpoint " + a.checkpoint + " has no task head; fine-tune it first");
  const auto saved = checkpoint_config(ckpt);
  const auto model = load_model(ckpt, saved);
  auto ft = saved.finetune;
  if (!a.strategy.empty()) ft.strategy = parse_strategy(a.strategy, ft.task);
  const auto corpus = load_corpus(a.corpus, saved);
  const auto report = evaluate(model, ft, corpus.utterances);
  const auto text = report_json(report);
  if (!a.out.empty()) write_text(a.out, text);
  std::cout << text << '\n';
  return kOk;
}

struct ProbeArgs {
  std::string checkpoint, corpus, out;
};

int cmd_probe(const Common& c, const ProbeArgs& a) {
  auto cfg = resolve(c);
  AvModel model;
  if (a.checkpoint.empty()) {
    model = AvModel::create(cfg.model, stream_seed(cfg.seed, "model"));
  } else {
    const auto ckpt = load_checkpoint(a.checkpoint);
    cfg = checkpoint_config(ckpt);
    model = load_model(ckpt, cfg);
  }
  const auto corpus = load_corpus(a.corpus, cfg);
  const auto data = fused_probe_data(model, corpus.utterances);
  auto pcfg = cfg.probe;
  const auto r = linear_probe(data.features, data.labels, data.groups, pcfg);
  nlohmann::ordered_json j;
  j["checkpoint"] = a.checkpoint.empty() ? json(nullptr) : json(a.checkpoint);
  j["accuracy"] = r.accuracy;
  j["train_accuracy"] = r.train_accuracy;
  j["n_classes"] = r.n_classes;
  j["n_train"] = r.n_train;
  j["n_test"] = r.n_test;
  if (!a.out.empty()) write_text(a.out, j.dump(2));
  std::cout << j.dump(2) << '\n';
  return kOk;
}

int cmd_gradcheck(const Common& c, const std::string& size, std::size_t seeds) {
  const auto cfg = resolve(c);
  const auto r = grad_suite(cfg, size, seeds);
  nlohmann::ordered_json j;
  j["size"] = size;
  j["seeds"] = r.seeds;
  j["pretrain_failures"] = r.pretrain_failures;
  j["ctc_failures"] = r.ctc_failures;
  j["max_rel_error_pretrain"] = r.worst_pretrain;
  j["max_rel_error_ctc"] = r.worst_ctc;
  j["seconds"] = r.seconds;
  j["passed"] = r.passed();
  std::cout << j.dump(2) << '\n';
  return r.passed() ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"audio-visual masked contrastive pre-training at desk scale"};
  app.require_subcommand(1);
  Common common;

  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic paired corpus");
  add_common(synth, common);
  synth->add_option("-o,--out", synth_out, "corpus file")->required();

  PretrainArgs pre;
  auto* pretrain = app.add_subcommand("pretrain", "masked contrastive pre-training");
  add_common(pretrain, common);
  pretrain->add_option("--corpus", pre.corpus, "training corpus")->required();
  pretrain->add_option("--val-corpus", pre.val_corpus, "validation corpus (default: the training corpus)");
  pretrain->add_option("-o,--out", pre.out, "output directory (overrides output_dir)");
  pretrain->add_option("--resume", pre.resume, "continue from this checkpoint");
  pretrain->add_option("--stop-after", pre.stop_after, "stop after this many total steps");

  FinetuneArgs fa;
  auto* fine = app.add_subcommand("finetune", "fine-tune on a downstream task");
  add_common(fine, common);
  fine->add_option("--checkpoint", fa.checkpoint, "pre-trained checkpoint (default: random init)");
  fine->add_option("--corpus", fa.corpus, "labeled training corpus")->required();
  fine->add_option("--val-corpus", fa.val_corpus, "labeled validation corpus")->required();
  fine->add_option("-o,--out", fa.out, "output directory (overrides output_dir)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "fine-tuned checkpoint")->required();
  eval->add_option("--corpus", ea.corpus, "labeled corpus")->required();
  eval->add_option("--strategy", ea.strategy,
                   "exclusion strategy: input_zero|embedding_zero|embedding_mask or x_to_0|v_to_0|v_to_m|a_to_0|a_to_m");
  eval->add_option("-o,--out", ea.out, "report file");

  ProbeArgs pa;
  auto* probe = app.add_subcommand("probe", "linear probe of fused frame embeddings");
  add_common(probe, common);
  probe->add_option("--checkpoint", pa.checkpoint, "checkpoint (default: random init)");
  probe->add_option("--corpus", pa.corpus, "corpus with latent states")->required();
  probe->add_option("-o,--out", pa.out, "report file");

  std::string size = "tiny";
  std::size_t seeds = 20;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the pre-training and CTC gradients");
  add_common(grad, common);
  grad->add_option("--size", size, "tiny or desk")->check(CLI::IsMember({"tiny", "desk"}));
  grad->add_option("--seeds", seeds, "number of seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*synth) return cmd_synth(common, synth_out);
    if (*pretrain) return cmd_pretrain(common, pre);
    if (*fine) return cmd_finetune(common, fa);
    if (*eval) return cmd_eval(ea);
    if (*probe) return cmd_probe(common, pa);
    if (*grad) return cmd_gradcheck(common, size, seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
