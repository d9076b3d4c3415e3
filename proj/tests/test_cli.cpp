#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "avrl/checks.hpp"
#include "avrl/config.hpp"
#include "avrl/trainer.hpp"
#include "doctest.h"

using namespace avrl;
namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "avrl_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Result run(const std::string& args) {
  const auto out = work() / "stdout.txt", err = work() / "stderr.txt";
  const std::string cmd = std::string(AVRL_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// The tiny configuration as a file, so the commands stay fast.
std::string tiny_file() {
  static const std::string path = [] {
    const auto p = work() / "tiny.json";
    save_run_config(tiny_config(), p);
    return p.string();
  }();
  return path;
}

std::string tiny_corpus() {
  static const std::string path = [] {
    const auto p = (work() / "tiny.corpus").string();
    REQUIRE(run("synth -c " + tiny_file() + " --seed 1 -o " + p).code == 0);
    return p;
  }();
  return path;
}

}  // namespace

TEST_CASE("synth is reproducible") {
  const auto a = (work() / "a.corpus").string(), b = (work() / "b.corpus").string(), c = (work() / "c.corpus").string();
  REQUIRE(run("synth -c " + tiny_file() + " --seed 3 -o " + a).code == 0);
  REQUIRE(run("synth -c " + tiny_file() + " --seed 3 -o " + b).code == 0);
  REQUIRE(run("synth -c " + tiny_file() + " --seed 4 -o " + c).code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a) != slurp(c));
  CHECK(read_corpus(a).utterances.size() == tiny_config().data.n_utterances);
}

TEST_CASE("an empty corpus is valid but warned about") {
  const auto p = (work() / "empty.corpus").string();
  const auto r = run("synth -c " + tiny_file() + " --set data.n_utterances=0 -o " + p);
  CHECK(r.code == 0);
  CHECK(r.err.find("warning") != std::string::npos);
  CHECK(read_corpus(p).utterances.empty());
}

TEST_CASE("the desk corpus feeds pretrain") {
  const auto p = (work() / "desk.corpus").string();
  REQUIRE(run("synth --set data.n_utterances=4 -o " + p).code == 0);
  const auto out = (work() / "desk_run").string();
  const auto r = run("pretrain --corpus " + p + " --stop-after 1 -o " + out);
  CHECK(r.code == 0);
  CHECK(fs::exists(fs::path(out) / "last.ckpt"));
  CHECK(fs::exists(fs::path(out) / "metrics.jsonl"));
}

TEST_CASE("exit codes") {
  const auto bad_cfg = work() / "bad.json";
  std::ofstream(bad_cfg) << R"({"model": {"fusion": {"heads": 2}}})";
  CHECK(run("synth -c " + bad_cfg.string() + " -o " + (work() / "x.corpus").string()).code == 1);
  CHECK(run("synth --set model.fusion.n_heads=3 -o " + (work() / "x.corpus").string()).code == 1);
  CHECK(run("synth --set nonsense -o " + (work() / "x.corpus").string()).code == 1);
  CHECK(run("synth").code == 1);
  CHECK(run("pretrain --no-such-flag").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("").code == 1);

  CHECK(run("pretrain -c " + tiny_file() + " --corpus " + (work() / "missing.corpus").string()).code == 2);
  const auto junk = work() / "junk.corpus";
  std::ofstream(junk) << "not a corpus";
  CHECK(run("pretrain -c " + tiny_file() + " --corpus " + junk.string()).code == 2);
  CHECK(run("probe -c " + tiny_file() + " --corpus " + tiny_corpus() + " --checkpoint " + junk.string()).code == 2);
  CHECK(run("synth -c " + tiny_file() + " -o " + (work() / "no" / "such" / "dir" / "x.corpus").string()).code == 2);

  // a learning rate this large overflows the parameters within a step or two
  const auto r = run("pretrain -c " + tiny_file() + " --corpus " + tiny_corpus() +
                     " --set pretrain.train.schedule.kind=constant --set pretrain.train.schedule.max_lr=1e300 -o " +
                     (work() / "blowup").string());
  CHECK(r.code == 3);
}

TEST_CASE("pretrain writes its echo, metrics and checkpoints") {
  const auto out = work() / "pre";
  const auto r = run("pretrain -c " + tiny_file() + " --corpus " + tiny_corpus() + " -o " + out.string());
  REQUIRE(r.code == 0);
  const auto echo = load_run_config(out / "config.json");
  auto want = tiny_config();
  want.output_dir = out.string();
  CHECK(to_json(echo) == to_json(want));

  std::ifstream is(out / "metrics.jsonl");
  std::size_t train = 0, val = 0;
  for (std::string line; std::getline(is, line);) {
    const auto j = nlohmann::json::parse(line);
    for (const auto* key : {"step", "lr", "loss_c2a", "loss_c2v", "loss_total", "acc_c2a", "acc_c2v", "split"}) {
      CHECK(j.contains(key));
    }
    (j["split"] == "train" ? train : val) += 1;
  }
  CHECK(train == tiny_config().pretrain.train.schedule.total_steps);
  CHECK(val >= 2);
  const auto ck = load_checkpoint(out / "pretrained.ckpt");
  CHECK(ck.step == train);
  CHECK(slurp(out / "pretrained.ckpt") == slurp(out / "last.ckpt"));

  // same config and seed, same log
  const auto again = work() / "pre_again";
  REQUIRE(run("pretrain -c " + tiny_file() + " --corpus " + tiny_corpus() + " -o " + again.string()).code == 0);
  CHECK(slurp(again / "metrics.jsonl") == slurp(out / "metrics.jsonl"));
  CHECK(slurp(again / "pretrained.ckpt") == slurp(out / "pretrained.ckpt"));
}

TEST_CASE("an interrupted and resumed run matches the uninterrupted one") {
  const auto base = "pretrain -c " + tiny_file() + " --corpus " + tiny_corpus() +
                    " --set pretrain.train.validate_every=4 --set pretrain.train.checkpoint_every=7";
  const auto full = work() / "full", part = work() / "part";
  REQUIRE(run(base + " -o " + full.string()).code == 0);
  REQUIRE(run(base + " --stop-after 7 -o " + part.string()).code == 0);
  CHECK_FALSE(fs::exists(part / "pretrained.ckpt"));
  REQUIRE(run(base + " --resume " + (part / "step-7.ckpt").string() + " -o " + part.string()).code == 0);
  CHECK(slurp(part / "metrics.jsonl") == slurp(full / "metrics.jsonl"));
  CHECK(slurp(part / "pretrained.ckpt") == slurp(full / "pretrained.ckpt"));

  // a checkpoint from a different configuration is refused
  CHECK(run(base + " --set model.objective.temperature=0.2 --resume " + (part / "step-7.ckpt").string() + " -o " +
            (work() / "other").string())
            .code == 1);
}

TEST_CASE("fine-tune, evaluate and probe") {
  const auto pre = work() / "ft_pre";
  REQUIRE(run("pretrain -c " + tiny_file() + " --corpus " + tiny_corpus() + " -o " + pre.string()).code == 0);
  const auto val = (work() / "val.corpus").string();
  REQUIRE(run("synth -c " + tiny_file() + " --seed 2 -o " + val).code == 0);

  const auto ft = work() / "ft";
  const auto r = run("finetune -c " + tiny_file() + " --set finetune.task=asr --checkpoint " + (pre / "pretrained.ckpt").string() +
                     " --corpus " + tiny_corpus() + " --val-corpus " + val + " -o " + ft.string());
  REQUIRE(r.code == 0);
  CHECK(fs::exists(ft / "finetuned.ckpt"));
  CHECK(fs::exists(ft / "metrics.jsonl"));
  const auto report = nlohmann::json::parse(slurp(ft / "report.json"));
  CHECK(report["task"] == "asr");
  CHECK(report.contains("cer"));

  const auto ev = work() / "eval.json";
  const auto e = run("eval --checkpoint " + (ft / "finetuned.ckpt").string() + " --corpus " + val +
                     " --strategy v_to_m -o " + ev.string());
  REQUIRE(e.code == 0);
  const auto j = nlohmann::json::parse(slurp(ev));
  CHECK(j["strategy"] == "embedding_mask");
  CHECK(j["cer"] == report["cer"]);
  CHECK(run("eval --checkpoint " + (ft / "finetuned.ckpt").string() + " --corpus " + val + " --strategy v_to_0").code ==
        0);
  CHECK(run("eval --checkpoint " + (ft / "finetuned.ckpt").string() + " --corpus " + val + " --strategy a_to_m").code ==
        1);
  CHECK(run("eval --checkpoint " + (pre / "pretrained.ckpt").string() + " --corpus " + val).code == 1);
  CHECK(run("finetune -c " + tiny_file() + " --set finetune.task=asr --checkpoint " + (ft / "finetuned.ckpt").string() + " --corpus " +
            tiny_corpus() + " --val-corpus " + val + " -o " + (work() / "ft2").string())
            .code == 1);

  const auto p = run("probe -c " + tiny_file() + " --checkpoint " + (pre / "pretrained.ckpt").string() + " --corpus " +
                     val);
  REQUIRE(p.code == 0);
  const auto pj = nlohmann::json::parse(p.out);
  CHECK(pj["accuracy"].get<double>() >= 0.0);
  CHECK(pj["accuracy"].get<double>() <= 1.0);
}

TEST_CASE("audio-only pre-training cannot start a VSR fine-tune") {
  const auto pre = work() / "b2";
  const std::string mode =
      " --set pretrain.exclude=visual --set model.objective.loss_directions=a"
      " --set model.objective.cross_modal_negatives=false";
  REQUIRE(run("pretrain -c " + tiny_file() + mode + " --corpus " + tiny_corpus() + " -o " + pre.string()).code == 0);
  const auto r = run("finetune -c " + tiny_file() + mode + " --set finetune.task=vsr --checkpoint " +
                     (pre / "pretrained.ckpt").string() + " --corpus " + tiny_corpus() + " --val-corpus " +
                     tiny_corpus() + " -o " + (work() / "vsr").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("VSR") != std::string::npos);
}
