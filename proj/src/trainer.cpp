#include "avrl/trainer.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"
#include "binio.hpp"

namespace avrl {

namespace {

constexpr char kCheckpointMagic[8] = {'A', 'V', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_tensor(std::ostream& os, const Tensor& t) {
  binio::put_vector(os, std::vector<std::uint64_t>(t.shape().begin(), t.shape().end()));
  binio::put_vector(os, t.storage());
}

Tensor get_tensor(std::istream& is) {
  const auto shape = binio::get_vector<std::uint64_t>(is);
  auto data = binio::get_vector<double>(is);
  std::vector<std::size_t> s(shape.begin(), shape.end());
  if (shape_product(s) != data.size()) throw DataError("checkpoint tensor shape does not match its data");
  return Tensor(std::move(s), std::move(data));
}

void put_moments(std::ostream& os, const std::map<std::string, std::vector<double>, std::less<>>& m) {
  binio::put<std::uint64_t>(os, m.size());
  for (const auto& [k, v] : m) {
    binio::put_string(os, k);
    binio::put_vector(os, v);
  }
}

std::map<std::string, std::vector<double>, std::less<>> get_moments(std::istream& is) {
  std::map<std::string, std::vector<double>, std::less<>> m;
  const auto n = binio::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto k = binio::get_string(is);
    m.emplace(std::move(k), binio::get_vector<double>(is));
  }
  return m;
}

}  // namespace

void ScheduleConfig::validate() const {
  if (!(max_lr > 0.0)) throw ConfigError("schedule: max_lr must be > 0");
  if (kind == ScheduleKind::constant) return;
  if (total_steps == 0) throw ConfigError("schedule: total_steps must be positive");
  if (warmup < 0 || hold < 0 || decay < 0 || std::abs(warmup + hold + decay - 1.0) > 1e-9) {
    throw ConfigError("schedule: phase ratios must be nonnegative and sum to 1");
  }
  if (!(final_lr_ratio > 0.0 && final_lr_ratio <= 1.0)) {
    throw ConfigError("schedule: final_lr_ratio must be in (0, 1]");
  }
}

double lr_at(std::size_t step, const ScheduleConfig& cfg) {
  if (cfg.kind == ScheduleKind::constant) return cfg.max_lr;
  const double total = static_cast<double>(cfg.total_steps);
  const double s = static_cast<double>(std::min(step, cfg.total_steps));
  const double warm_end = cfg.warmup * total;
  const double hold_end = (cfg.warmup + cfg.hold) * total;
  if (s < warm_end) return cfg.max_lr * s / warm_end;
  if (s <= hold_end) return cfg.max_lr;
  const double span = total - hold_end;
  return cfg.max_lr * std::pow(cfg.final_lr_ratio, (s - hold_end) / span);
}

void adam_step(ParameterSet& params, AdamState& state, double lr, const AdamConfig& cfg) {
  if (!(lr >= 0.0)) throw std::invalid_argument("adam_step: lr must be >= 0");
  for (const auto& [path, e] : params) {
    if (!e.trainable) continue;
    const auto& g = e.var.grad();
    if (!g.empty() && g.size() != e.var.value().size()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + path);
    }
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient in " + path);
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [path, e] : params) {
    if (!e.trainable) continue;
    auto& value = e.var.mutable_value();
    const auto n = value.size();
    auto& m = state.m[path];
    auto& v = state.v[path];
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    const auto& g = e.var.grad().storage();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  binio::put<std::uint32_t>(os, kCheckpointVersion);
  binio::put(os, ckpt.config_hash);
  binio::put(os, ckpt.seed);
  binio::put(os, ckpt.step);
  binio::put_string(os, ckpt.meta);
  binio::put<std::uint64_t>(os, ckpt.params.size());
  for (const auto& [k, t] : ckpt.params) {
    binio::put_string(os, k);
    put_tensor(os, t);
  }
  binio::put(os, ckpt.optimizer.step);
  put_moments(os, ckpt.optimizer.m);
  put_moments(os, ckpt.optimizer.v);
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  const auto version = binio::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_hash = binio::get<std::uint64_t>(is);
  c.seed = binio::get<std::uint64_t>(is);
  c.step = binio::get<std::uint64_t>(is);
  c.meta = binio::get_string(is);
  const auto n = binio::get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto k = binio::get_string(is);
    c.params.emplace(std::move(k), get_tensor(is));
  }
  c.optimizer.step = binio::get<std::uint64_t>(is);
  c.optimizer.m = get_moments(is);
  c.optimizer.v = get_moments(is);
  return c;
}

std::map<std::string, Tensor, std::less<>> snapshot(const ParameterSet& params) {
  std::map<std::string, Tensor, std::less<>> out;
  for (const auto& [k, e] : params) out.emplace(k, e.var.value());
  return out;
}

std::size_t restore_params(ParameterSet& params, const std::map<std::string, Tensor, std::less<>>& saved) {
  std::size_t n = 0;
  for (const auto& [k, t] : saved) {
    if (!params.contains(k)) continue;
    auto& dst = params.get(k).mutable_value();
    if (dst.shape() != t.shape()) {
      throw ConfigError("checkpoint tensor " + k + " has shape " + t.shape_string() + ", model expects " +
                        dst.shape_string());
    }
    dst = t;
    ++n;
  }
  return n;
}

void TrainConfig::validate() const {
  schedule.validate();
  if (accumulation == 0) throw ConfigError("train: accumulation must be >= 1");
  if (min_frames == 0 || min_frames > max_frames) throw ConfigError("train: need 1 <= min_frames <= max_frames");
  if (budget_frames == 0) throw ConfigError("train: budget_frames must be positive");
}

EpochBatcher::EpochBatcher(std::vector<Utterance> corpus, const TrainConfig& cfg, std::size_t samples_per_frame,
                           std::uint64_t seed)
    : source_(std::move(corpus)),
      min_frames_(cfg.min_frames),
      max_frames_(cfg.max_frames),
      budget_(cfg.budget_frames),
      spf_(samples_per_frame),
      max_epochs_(cfg.max_epochs),
      seed_(seed) {
  load_epoch(0);
  per_epoch_ = batches_.size();
  usable_ = cropped_.size();
  if (per_epoch_ == 0) throw DataError("training corpus has no utterance of at least " + std::to_string(min_frames_) + " frames");
}

void EpochBatcher::load_epoch(std::size_t epoch) {
  if (epoch_ == epoch) return;
  cropped_.clear();
  for (const auto& u : source_) {
    Rng rng(derive_seed(seed_, {hash_string("crop"), epoch, hash_string(u.id)}));
    if (auto c = filter_and_crop(u, min_frames_, max_frames_, spf_, rng)) cropped_.push_back(std::move(*c));
  }
  batches_ = make_batches(cropped_, budget_, derive_seed(seed_, {hash_string("epoch"), epoch}));
  epoch_ = epoch;
}

std::vector<Utterance> EpochBatcher::micro_batch(std::size_t n) {
  const auto epoch = n / per_epoch_;
  if (max_epochs_ != 0 && epoch >= max_epochs_) return {};
  load_epoch(epoch);
  std::vector<Utterance> out;
  for (auto i : batches_[n % per_epoch_].members) out.push_back(cropped_[i]);
  return out;
}

std::string metrics_json(const MetricsRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["loss_c2a"] = opt(r.values.loss_c2a);
  j["loss_c2v"] = opt(r.values.loss_c2v);
  j["loss_total"] = r.values.loss_total;
  j["acc_c2a"] = opt(r.values.acc_c2a);
  j["acc_c2v"] = opt(r.values.acc_c2v);
  j["split"] = r.split;
  return j.dump();
}

Trainer::Trainer(ParameterSet& params, TrainConfig cfg, EpochBatcher batcher, GroupGradFn grad, std::uint64_t seed)
    : params_(params), cfg_(std::move(cfg)), batcher_(std::move(batcher)), grad_(std::move(grad)), seed_(seed) {
  cfg_.validate();
}

std::optional<StepValues> Trainer::step() {
  std::vector<std::vector<Utterance>> group;
  for (std::size_t i = 0; i < cfg_.accumulation; ++i) {
    auto mb = batcher_.micro_batch(step_ * cfg_.accumulation + i);
    if (mb.empty()) break;
    group.push_back(std::move(mb));
  }
  // A partial group at the end of the data still makes an update.
  if (group.empty()) return std::nullopt;

  const double lr = lr_at(step_, cfg_.schedule);
  params_.zero_grad();
  auto values = grad_(group, derive_seed(seed_, {hash_string("step"), step_}));
  if (!std::isfinite(values.loss_total)) throw NumericError("non-finite training loss at step " + std::to_string(step_));
  adam_step(params_, adam_, lr, cfg_.adam);
  params_.zero_grad();
  if (sink_) sink_({step_, lr, values, "train"});
  ++step_;
  if (hook_) hook_(step_);
  return values;
}

std::optional<StepValues> Trainer::validate_now() {
  if (!validate_) return std::nullopt;
  auto v = validate_();
  if (sink_) sink_({step_, lr_at(step_, cfg_.schedule), v, "val"});
  return v;
}

std::size_t Trainer::run(std::size_t until) {
  const auto start = step_;
  if (step_ == 0) validate_now();
  while (step_ < until) {
    if (!step()) break;
    if (cfg_.validate_every != 0 && step_ % cfg_.validate_every == 0 && step_ != until) validate_now();
  }
  if (step_ != start) validate_now();
  return step_ - start;
}

Checkpoint Trainer::checkpoint(std::uint64_t config_hash, const std::string& meta) const {
  Checkpoint c;
  c.config_hash = config_hash;
  c.seed = seed_;
  c.step = step_;
  c.meta = meta;
  c.params = snapshot(params_);
  c.optimizer = adam_;
  return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (ckpt.seed != seed_) throw ConfigError("checkpoint was written by a run with a different seed");
  const auto n = restore_params(params_, ckpt.params);
  if (n != params_.size()) throw ConfigError("checkpoint does not cover every model parameter");
  adam_ = ckpt.optimizer;
  step_ = static_cast<std::size_t>(ckpt.step);
}

std::uint64_t utterance_seed(std::uint64_t step_seed, std::size_t position, const std::string& id) {
  return derive_seed(step_seed, {position, hash_string(id)});
}

StepValues pretrain_gradients(const AvModel& model, const std::vector<std::vector<Utterance>>& micro_batches,
                              ExcludedModality excluded, std::uint64_t step_seed) {
  validate_pretrain_mode(model.config.objective, excluded);
  // Plan everything first: normalization needs the whole group's anchor counts.
  std::vector<std::vector<PretrainPlan>> plans(micro_batches.size());
  std::size_t n_a = 0, n_v = 0, pos = 0;
  for (std::size_t b = 0; b < micro_batches.size(); ++b) {
    for (const auto& u : micro_batches[b]) {
      Rng rng(utterance_seed(step_seed, pos++, u.id));
      plans[b].push_back(plan_pretrain(model, u, excluded, rng));
      n_a += plans[b].back().negatives_a.size();
      n_v += plans[b].back().negatives_v.size();
    }
  }
  const double wa = n_a ? 1.0 / static_cast<double>(n_a) : 0.0;
  const double wv = n_v ? 1.0 / static_cast<double>(n_v) : 0.0;

  double sum_a = 0.0, sum_v = 0.0;
  std::size_t correct_a = 0, correct_v = 0;
  // One backward pass per utterance, in group order: the gradient sum then
  // has the same reduction order however the group is split.
  for (std::size_t b = 0; b < micro_batches.size(); ++b) {
    for (std::size_t i = 0; i < micro_batches[b].size(); ++i) {
      auto t = pretrain_forward(model, micro_batches[b][i], plans[b][i], excluded, true);
      sum_a += t.c2a.loss_sum.value()[0];
      sum_v += t.c2v.loss_sum.value()[0];
      correct_a += t.c2a.correct;
      correct_v += t.c2v.correct;
      Var root = ops::add(ops::scale(t.c2a.loss_sum, wa), ops::scale(t.c2v.loss_sum, wv));
      if (root.requires_grad()) backward(root);
    }
  }

  const auto& obj = model.config.objective;
  StepValues out;
  if (obj.uses_audio_targets()) {
    out.loss_c2a = sum_a * wa;
    if (n_a) out.acc_c2a = static_cast<double>(correct_a) / static_cast<double>(n_a);
  }
  if (obj.uses_visual_targets()) {
    out.loss_c2v = sum_v * wv;
    if (n_v) out.acc_c2v = static_cast<double>(correct_v) / static_cast<double>(n_v);
  }
  out.loss_total = combined_loss(out.loss_c2a.value_or(0.0), out.loss_c2v.value_or(0.0)).total;
  return out;
}

StepValues pretrain_evaluate(const AvModel& model, const std::vector<Utterance>& corpus, ExcludedModality excluded,
                             std::uint64_t seed) {
  double sum_a = 0.0, sum_v = 0.0;
  std::size_t n_a = 0, n_v = 0, correct_a = 0, correct_v = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Rng rng(utterance_seed(seed, i, corpus[i].id));
    const auto plan = plan_pretrain(model, corpus[i], excluded, rng);
    const auto t = pretrain_forward(model, corpus[i], plan, excluded, false);
    sum_a += t.c2a.loss_sum.value()[0];
    sum_v += t.c2v.loss_sum.value()[0];
    n_a += t.c2a.anchors;
    n_v += t.c2v.anchors;
    correct_a += t.c2a.correct;
    correct_v += t.c2v.correct;
  }
  const auto& obj = model.config.objective;
  StepValues out;
  if (obj.uses_audio_targets() && n_a) {
    out.loss_c2a = sum_a / static_cast<double>(n_a);
    out.acc_c2a = static_cast<double>(correct_a) / static_cast<double>(n_a);
  }
  if (obj.uses_visual_targets() && n_v) {
    out.loss_c2v = sum_v / static_cast<double>(n_v);
    out.acc_c2v = static_cast<double>(correct_v) / static_cast<double>(n_v);
  }
  out.loss_total = combined_loss(out.loss_c2a.value_or(0.0), out.loss_c2v.value_or(0.0)).total;
  return out;
}

}  // namespace avrl
