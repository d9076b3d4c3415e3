#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "avrl/model.hpp"

namespace avrl {

enum class ScheduleKind { constant, warmup_hold_decay };

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::warmup_hold_decay;
  double max_lr = 5e-4;
  std::size_t total_steps = 2000;
  double warmup = 0.2;
  double hold = 0.3;
  double decay = 0.5;
  double final_lr_ratio = 0.01;

  void validate() const;
};

/// Linear 0 -> max over the warmup phase, flat over hold, then exponential
/// decay reaching final_lr_ratio * max_lr at total_steps. Steps past the end
/// are clamped.
double lr_at(std::size_t step, const ScheduleConfig& cfg);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>, std::less<>> m;
  std::map<std::string, std::vector<double>, std::less<>> v;
};

/// Bias-corrected Adam on every trainable parameter, using the gradients
/// currently accumulated in `params` (a missing gradient counts as zero).
/// Nothing is modified when any gradient is non-finite; the NumericError
/// names the offending parameter.
void adam_step(ParameterSet& params, AdamState& state, double lr, const AdamConfig& cfg = {});

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::string meta;  // resolved run configuration, for rebuilding the model
  std::map<std::string, Tensor, std::less<>> params;
  AdamState optimizer;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::map<std::string, Tensor, std::less<>> snapshot(const ParameterSet& params);
/// Copies every checkpoint tensor whose path exists in `params`; shapes must
/// match. Returns the number of tensors copied.
std::size_t restore_params(ParameterSet& params, const std::map<std::string, Tensor, std::less<>>& saved);

struct TrainConfig {
  ScheduleConfig schedule;
  AdamConfig adam;
  std::size_t accumulation = 1;
  std::size_t budget_frames = 160;
  std::size_t min_frames = 25;
  std::size_t max_frames = 500;
  std::size_t validate_every = 0;    // 0: only before the first and after the last step
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::size_t max_epochs = 0;        // 0: unlimited

  void validate() const;
};

/// The micro-batch stream of a run: epoch e crops every utterance with its
/// own seeded window and re-buckets, so micro-batch n is a pure function of
/// (seed, n) and a resumed run sees exactly the data it would have seen.
class EpochBatcher {
 public:
  EpochBatcher(std::vector<Utterance> corpus, const TrainConfig& cfg, std::size_t samples_per_frame,
               std::uint64_t seed);

  /// Empty once max_epochs is exhausted.
  std::vector<Utterance> micro_batch(std::size_t n);
  std::size_t batches_per_epoch() const { return per_epoch_; }
  std::size_t usable_utterances() const { return usable_; }

 private:
  void load_epoch(std::size_t epoch);

  std::vector<Utterance> source_;
  std::size_t min_frames_, max_frames_, budget_, spf_, max_epochs_;
  std::uint64_t seed_;
  std::size_t per_epoch_ = 0;
  std::size_t usable_ = 0;
  std::optional<std::size_t> epoch_;
  std::vector<Utterance> cropped_;
  std::vector<Batch> batches_;
};

/// Values reported by one gradient pass or validation pass.
struct StepValues {
  std::optional<double> loss_c2a;
  std::optional<double> loss_c2v;
  double loss_total = 0.0;
  std::optional<double> acc_c2a;
  std::optional<double> acc_c2v;
};

struct MetricsRecord {
  std::size_t step = 0;
  double lr = 0.0;
  StepValues values;
  std::string split;
};

std::string metrics_json(const MetricsRecord& r);

/// Accumulates gradients of one optimizer step's micro-batches into the
/// parameters. Each micro-batch gets its own backward pass.
using GroupGradFn =
    std::function<StepValues(const std::vector<std::vector<Utterance>>& micro_batches, std::uint64_t step_seed)>;
using EvalFn = std::function<StepValues()>;

class Trainer {
 public:
  Trainer(ParameterSet& params, TrainConfig cfg, EpochBatcher batcher, GroupGradFn grad, std::uint64_t seed);

  void set_validation(EvalFn fn) { validate_ = std::move(fn); }
  void set_sink(std::function<void(const MetricsRecord&)> sink) { sink_ = std::move(sink); }
  /// Called after each optimizer step with the new step count.
  void set_step_hook(std::function<void(std::size_t)> hook) { hook_ = std::move(hook); }

  /// One optimizer step. Returns nullopt when the data stream is exhausted.
  std::optional<StepValues> step();
  /// Steps until `until` updates have been made or data runs out, with
  /// validation records per validate_every.
  std::size_t run(std::size_t until);
  std::optional<StepValues> validate_now();

  std::size_t step_count() const { return step_; }
  const AdamState& optimizer() const { return adam_; }

  Checkpoint checkpoint(std::uint64_t config_hash, const std::string& meta) const;
  void restore(const Checkpoint& ckpt);

 private:
  ParameterSet& params_;
  TrainConfig cfg_;
  EpochBatcher batcher_;
  GroupGradFn grad_;
  EvalFn validate_;
  std::function<void(const MetricsRecord&)> sink_;
  std::function<void(std::size_t)> hook_;
  std::uint64_t seed_;
  std::size_t step_ = 0;
  AdamState adam_;
};

/// Per-utterance seed of the pre-training plan inside one optimizer step.
std::uint64_t utterance_seed(std::uint64_t step_seed, std::size_t position, const std::string& id);

/// Pre-training gradient pass. Directional losses are normalized by the
/// group's total anchor count per direction, so splitting a group into
/// micro-batches leaves the accumulated gradient unchanged.
StepValues pretrain_gradients(const AvModel& model, const std::vector<std::vector<Utterance>>& micro_batches,
                              ExcludedModality excluded, std::uint64_t step_seed);

/// Objective on `corpus` with masks fixed by `seed` and dropout off.
StepValues pretrain_evaluate(const AvModel& model, const std::vector<Utterance>& corpus,
                             ExcludedModality excluded, std::uint64_t seed);

}  // namespace avrl
