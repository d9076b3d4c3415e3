#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "avrl/checks.hpp"
#include "avrl/errors.hpp"
#include "avrl/trainer.hpp"
#include "doctest.h"

using namespace avrl;

namespace {

ScheduleConfig long_schedule() {
  ScheduleConfig s;
  s.total_steps = 25000;
  s.max_lr = 5e-4;
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("avrl_trainer_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<Utterance> tiny_corpus(const RunConfig& cfg, std::uint64_t seed) {
  return generate_corpus(cfg.data, seed).utterances;
}

GroupGradFn pretrain_fn(const AvModel& model) {
  return [&model](const std::vector<std::vector<Utterance>>& group, std::uint64_t seed) {
    return pretrain_gradients(model, group, ExcludedModality::none, seed);
  };
}

void set_grad(const Var& v, double g) { v.node()->grad_buffer() = Tensor::scalar(g); }

}  // namespace

TEST_CASE("lr_at examples") {
  const auto s = long_schedule();
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(2500, s) == doctest::Approx(2.5e-4).epsilon(1e-12));
  CHECK(lr_at(5000, s) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(10000, s) == 5e-4);
  CHECK(lr_at(12500, s) == 5e-4);
  CHECK(lr_at(25000, s) == doctest::Approx(5e-6).epsilon(1e-12));
  CHECK(lr_at(30000, s) == lr_at(25000, s));
  // halfway through the decay the rate is the geometric mean of its ends
  CHECK(lr_at(18750, s) == doctest::Approx(5e-4 * 0.1).epsilon(1e-12));

  ScheduleConfig c;
  c.kind = ScheduleKind::constant;
  for (std::size_t step : {0, 1, 777, 1000000}) CHECK(lr_at(step, c) == 5e-4);
}

TEST_CASE("lr_at is continuous at the phase boundaries") {
  const auto s = long_schedule();
  const double total = 25000.0;
  auto warm = [&](double x) { return 5e-4 * x / (0.2 * total); };
  auto decay = [&](double x) { return 5e-4 * std::pow(0.01, (x - 0.5 * total) / (0.5 * total)); };
  // each side of a boundary, extended to the boundary, meets the value there
  CHECK(std::abs(warm(5000) - lr_at(5000, s)) < 1e-12);
  CHECK(std::abs(decay(12500) - lr_at(12500, s)) < 1e-12);
  CHECK(std::abs(lr_at(4999, s) - lr_at(5000, s)) < 5e-4 / 5000 + 1e-12);
  CHECK(std::abs(lr_at(12501, s) - lr_at(12500, s)) < 1e-6);
  for (std::size_t step = 0; step <= 25000; step += 250) {
    const double x = static_cast<double>(step);
    const double want = x < 5000 ? warm(x) : x <= 12500 ? 5e-4 : decay(x);
    CHECK(std::abs(lr_at(step, s) - want) < 1e-12);
  }
}

TEST_CASE("schedule validation") {
  ScheduleConfig s;
  CHECK_NOTHROW(s.validate());
  s.hold = 0.4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.max_lr = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.final_lr_ratio = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  TrainConfig t;
  t.accumulation = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("adam_step examples") {
  SUBCASE("first step with unit gradient") {
    ParameterSet ps;
    set_grad(ps.add("x", Tensor::scalar(1.0)), 1.0);
    AdamState st;
    adam_step(ps, st, 0.1);
    CHECK(st.step == 1);
    CHECK(ps.get("x").value()[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-14));
  }
  SUBCASE("zero gradient leaves parameters alone") {
    ParameterSet ps;
    ps.add("w", Tensor({3}, 0.5));
    ps.add("frozen", Tensor({2}, 2.0), false);
    AdamState st;
    for (int i = 0; i < 3; ++i) adam_step(ps, st, 0.1);
    for (double v : ps.get("w").value().values()) CHECK(v == 0.5);
    for (double v : ps.get("frozen").value().values()) CHECK(v == 2.0);
  }
  SUBCASE("two steps differ from one doubled step") {
    ParameterSet a, b;
    a.add("x", Tensor::scalar(0.0));
    b.add("x", Tensor::scalar(0.0));
    AdamState sa, sb;
    for (int i = 0; i < 2; ++i) {
      set_grad(a.get("x"), 0.3);
      adam_step(a, sa, 0.1);
      a.zero_grad();
    }
    set_grad(b.get("x"), 0.6);
    adam_step(b, sb, 0.1);
    CHECK(a.get("x").value()[0] != b.get("x").value()[0]);
  }
  SUBCASE("non-finite gradient") {
    ParameterSet ps;
    set_grad(ps.add("ok", Tensor::scalar(1.0)), 1.0);
    set_grad(ps.add("bad.weight", Tensor::scalar(1.0)), std::numeric_limits<double>::infinity());
    AdamState st;
    try {
      adam_step(ps, st, 0.1);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("bad.weight") != std::string::npos);
    }
    CHECK(st.step == 0);
    CHECK(ps.get("ok").value()[0] == 1.0);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const auto dir = temp_dir("roundtrip");
  auto cfg = tiny_config();
  auto model = AvModel::create(cfg.model, 3);
  Checkpoint c;
  c.config_hash = 0x1234abcd5678ef00ULL;
  c.seed = 42;
  c.step = 17;
  c.meta = "{\"a\": 1}";
  c.params = snapshot(model.params);
  c.params["weird"] = Tensor({2}, std::vector<double>{std::nextafter(1.0, 2.0), -0.0});
  c.optimizer.step = 17;
  c.optimizer.m["x"] = {1e-300, -3.5};
  c.optimizer.v["x"] = {std::numeric_limits<double>::denorm_min(), 7.25};
  save_checkpoint(c, dir / "a.ckpt");
  const auto d = load_checkpoint(dir / "a.ckpt");
  CHECK(d.config_hash == c.config_hash);
  CHECK(d.seed == c.seed);
  CHECK(d.step == c.step);
  CHECK(d.meta == c.meta);
  REQUIRE(d.params.size() == c.params.size());
  for (const auto& [k, t] : c.params) {
    CAPTURE(k);
    CHECK(d.params.at(k).shape() == t.shape());
    CHECK(std::memcmp(d.params.at(k).storage().data(), t.storage().data(), t.size() * sizeof(double)) == 0);
  }
  CHECK(d.optimizer.step == c.optimizer.step);
  CHECK(d.optimizer.m == c.optimizer.m);
  CHECK(d.optimizer.v == c.optimizer.v);

  save_checkpoint(d, dir / "b.ckpt");
  std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {}));

  auto other = AvModel::create(cfg.model, 9);
  CHECK(restore_params(other.params, d.params) == other.params.size());
  for (const auto& [k, e] : other.params) CHECK(e.var.value().storage() == c.params.at(k).storage());
}

TEST_CASE("bad checkpoint files") {
  const auto dir = temp_dir("bad");
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), DataError);
  {
    std::ofstream(dir / "junk.ckpt") << "definitely not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), DataError);

  Checkpoint c;
  c.params["x"] = Tensor({100}, 1.0);
  save_checkpoint(c, dir / "full.ckpt");
  const auto size = std::filesystem::file_size(dir / "full.ckpt");
  std::filesystem::copy_file(dir / "full.ckpt", dir / "cut.ckpt");
  std::filesystem::resize_file(dir / "cut.ckpt", size / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), DataError);

  ParameterSet ps;
  ps.add("x", Tensor({3}, 0.0));
  CHECK_THROWS_AS(restore_params(ps, c.params), ConfigError);
}

TEST_CASE("accumulating two micro-batches equals one concatenated batch") {
  auto cfg = tiny_config();
  const auto corpus = tiny_corpus(cfg, 5);
  const std::vector<Utterance> first = {corpus[0], corpus[1]}, second = {corpus[2]};
  std::vector<Utterance> joined = first;
  joined.insert(joined.end(), second.begin(), second.end());

  auto run = [&](const std::vector<std::vector<Utterance>>& group) {
    auto model = AvModel::create(cfg.model, 1);
    model.params.zero_grad();
    const auto values = pretrain_gradients(model, group, ExcludedModality::none, 77);
    auto grads = model.params.clone();
    for (auto& [k, e] : grads) e.var.mutable_value() = model.params.get(k).grad();
    AdamState st;
    adam_step(model.params, st, 1e-3);
    return std::make_tuple(values, snapshot(grads), snapshot(model.params));
  };
  const auto [v1, g1, p1] = run({joined});
  const auto [v2, g2, p2] = run({first, second});

  CHECK(std::abs(v1.loss_total - v2.loss_total) < 1e-12);
  CHECK(*v1.acc_c2a == *v2.acc_c2a);
  double grad_gap = 0.0, param_gap = 0.0;
  for (const auto& [k, t] : g1) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      grad_gap = std::max(grad_gap, std::abs(t.storage()[i] - g2.at(k).storage()[i]));
      param_gap = std::max(param_gap, std::abs(p1.at(k).storage()[i] - p2.at(k).storage()[i]));
    }
  }
  CHECK(grad_gap < 1e-12);
  CHECK(param_gap < 1e-12);
}

TEST_CASE("epoch batcher is a pure function of the micro-batch index") {
  auto cfg = tiny_config();
  const auto corpus = tiny_corpus(cfg, 6);
  auto& t = cfg.pretrain.train;
  EpochBatcher a(corpus, t, cfg.model.samples_per_frame, 3), b(corpus, t, cfg.model.samples_per_frame, 3);
  const auto per = a.batches_per_epoch();
  REQUIRE(per > 0);
  // b visits indices out of order and across epochs
  for (std::size_t n : {3 * per + 1, 0ul, per, 1ul}) {
    const auto x = a.micro_batch(n), y = b.micro_batch(n);
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(x[i].id == y[i].id);
      CHECK(x[i].audio == y[i].audio);
      CHECK(x[i].frames <= t.max_frames);
    }
  }
  t.max_epochs = 1;
  EpochBatcher c(corpus, t, cfg.model.samples_per_frame, 3);
  CHECK_FALSE(c.micro_batch(per - 1).empty());
  CHECK(c.micro_batch(per).empty());
}

TEST_CASE("zero steps leave the model unchanged") {
  auto cfg = tiny_config();
  auto model = AvModel::create(cfg.model, 1);
  const auto before = snapshot(model.params);
  Trainer tr(model.params, cfg.pretrain.train, EpochBatcher(tiny_corpus(cfg, 7), cfg.pretrain.train, cfg.model.samples_per_frame, 1),
             pretrain_fn(model), 2);
  CHECK(tr.run(0) == 0);
  for (const auto& [k, t] : snapshot(model.params)) CHECK(t.storage() == before.at(k).storage());
}

TEST_CASE("a partial accumulation group at the end of the data still steps") {
  auto cfg = tiny_config();
  auto t = cfg.pretrain.train;
  t.accumulation = 2;
  t.max_epochs = 1;
  const auto corpus = tiny_corpus(cfg, 8);
  auto model = AvModel::create(cfg.model, 1);
  EpochBatcher batcher(corpus, t, cfg.model.samples_per_frame, 1);
  const auto per = batcher.batches_per_epoch();
  std::vector<std::size_t> group_sizes;
  auto grad = [&](const std::vector<std::vector<Utterance>>& group, std::uint64_t seed) {
    group_sizes.push_back(group.size());
    return pretrain_gradients(model, group, ExcludedModality::none, seed);
  };
  Trainer tr(model.params, t, batcher, grad, 2);
  const auto steps = tr.run(1000);
  CHECK(steps == (per + 1) / 2);
  REQUIRE(!group_sizes.empty());
  CHECK(group_sizes.back() == (per % 2 == 0 ? 2u : 1u));
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  const auto dir = temp_dir("resume");
  auto cfg = tiny_config();
  auto t = cfg.pretrain.train;
  t.validate_every = 2;
  const auto corpus = tiny_corpus(cfg, 9);
  const std::size_t total = 6, cut = 3;

  auto make = [&](AvModel& model, std::vector<std::string>& log) {
    Trainer tr(model.params, t, EpochBatcher(corpus, t, cfg.model.samples_per_frame, 4), pretrain_fn(model), 11);
    tr.set_validation([&model, &corpus] {
      return pretrain_evaluate(model, {corpus.begin(), corpus.begin() + 2}, ExcludedModality::none, 5);
    });
    tr.set_sink([&log](const MetricsRecord& r) { log.push_back(metrics_json(r)); });
    return tr;
  };

  std::vector<std::string> full_log;
  auto full = AvModel::create(cfg.model, 1);
  auto a = make(full, full_log);
  a.run(total);

  std::vector<std::string> part_log;
  {
    auto first = AvModel::create(cfg.model, 1);
    auto b = make(first, part_log);
    b.run(cut);
    save_checkpoint(b.checkpoint(1, "meta"), dir / "cut.ckpt");
  }
  // drop the closing validation of the interrupted run, as the CLI does
  part_log.pop_back();
  auto resumed = AvModel::create(cfg.model, 99);
  auto c = make(resumed, part_log);
  c.restore(load_checkpoint(dir / "cut.ckpt"));
  CHECK(c.step_count() == cut);
  c.run(total);

  CHECK(part_log == full_log);
  for (const auto& [k, e] : full.params) CHECK(e.var.value().storage() == resumed.params.get(k).value().storage());
  CHECK(c.optimizer().m == a.optimizer().m);
  CHECK(c.optimizer().v == a.optimizer().v);

  auto wrong_seed = AvModel::create(cfg.model, 1);
  Trainer w(wrong_seed.params, t, EpochBatcher(corpus, t, cfg.model.samples_per_frame, 4), pretrain_fn(wrong_seed), 12);
  CHECK_THROWS_AS(w.restore(load_checkpoint(dir / "cut.ckpt")), ConfigError);
}

TEST_CASE("training lowers the loss on the tiny corpus") {
  auto cfg = tiny_config();
  auto t = cfg.pretrain.train;
  t.schedule.kind = ScheduleKind::constant;
  t.schedule.max_lr = 3e-3;
  const auto corpus = tiny_corpus(cfg, 10);
  auto model = AvModel::create(cfg.model, 1);
  std::vector<double> val;
  Trainer tr(model.params, t, EpochBatcher(corpus, t, cfg.model.samples_per_frame, 4), pretrain_fn(model), 11);
  tr.set_validation([&] { return pretrain_evaluate(model, corpus, ExcludedModality::none, 5); });
  tr.set_sink([&](const MetricsRecord& r) {
    if (r.split == "val") val.push_back(r.values.loss_total);
    CHECK(std::isfinite(r.values.loss_total));
  });
  tr.run(40);
  REQUIRE(val.size() == 2);
  CHECK(val.back() < val.front());
}

TEST_CASE("metrics records are one JSON object per line") {
  MetricsRecord r;
  r.step = 3;
  r.lr = 0.5;
  r.values.loss_c2a = 1.5;
  r.values.loss_total = 1.5;
  r.split = "train";
  CHECK(metrics_json(r) ==
        R"({"step":3,"lr":0.5,"loss_c2a":1.5,"loss_c2v":null,"loss_total":1.5,"acc_c2a":null,"acc_c2v":null,"split":"train"})");
}
