#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avrl/trainer.hpp"

namespace avrl {

/// Output symbols of a CTC head; index 0 is the blank, symbol i is index i + 1.
class Vocabulary {
 public:
  explicit Vocabulary(std::string symbols);

  std::size_t size() const { return symbols_.size() + 1; }
  const std::string& symbols() const { return symbols_; }
  /// Throws DataError for a character outside the vocabulary.
  std::vector<int> encode(const std::string& text) const;
  /// Blank indices are skipped.
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::string symbols_;
};

/// -log of the total probability of all alignments that collapse to
/// `target` (labels in [1, V)). `log_probs` is T x V of per-frame log
/// distributions. Gradients come from the adjoint of the same log-space
/// forward recursion. An infeasible target throws NumericError.
Var ctc_loss(const Var& log_probs, const std::vector<int>& target);

/// Per-frame argmax (ties to the lowest index), repeats collapsed, blanks dropped.
std::vector<int> best_path_decode(const Tensor& log_probs);

struct ErrorRate {
  std::size_t distance = 0;
  std::size_t ref_length = 0;
  double rate = 0.0;
  bool empty_reference = false;  // rate is then the hypothesis length
};

std::size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);
ErrorRate error_rate(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);
std::vector<std::string> char_tokens(const std::string& s);
std::vector<std::string> word_tokens(const std::string& s);
ErrorRate cer(const std::string& ref, const std::string& hyp);
ErrorRate wer(const std::string& ref, const std::string& hyp);

/// A removed modality and how it is replaced before fusion.
struct Exclusion {
  ExcludedModality modality = ExcludedModality::none;
  ExclusionStrategy strategy = ExclusionStrategy::embedding_mask;
};

/// Span-mask augmentation applied to encoder outputs during fine-tuning.
struct FeatureAugment {
  double mask_prob = 0.0;
  std::size_t mask_span = 5;
  bool audio = true;
  bool visual = true;
  std::size_t visual_window = 0;  // >0: zero one window of this length in the visual stream
};

/// Fused frames of the audio-visual topology with an optional exclusion.
/// `rng` drives augmentation and dropout; null means evaluation.
EmbeddingSequence fused_frames(const AvModel& model, const Utterance& u, const Exclusion& exclusion,
                               const FeatureAugment& aug = {}, Rng* rng = nullptr);

/// Purpose-built single-modality topologies: the absent slot is the mask
/// embedding and its encoder is never run.
EmbeddingSequence asr_frames(const AvModel& model, const Utterance& u, const FeatureAugment& aug = {},
                             Rng* rng = nullptr);
EmbeddingSequence vsr_frames(const AvModel& model, const Utterance& u, const FeatureAugment& aug = {},
                             Rng* rng = nullptr);

/// One contiguous window of `length` frames set to zero. A window longer
/// than the sequence zeroes all of it (with a warning on stderr).
EmbeddingSequence temporal_mask_aug(const EmbeddingSequence& seq, std::size_t length, Rng& rng);

/// Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
double sample_beta(double a, double b, Rng& rng);

/// lambda * first + (1 - lambda) * second on the raw streams; both must have
/// the same shape.
Utterance mixup(const Utterance& first, const Utterance& second, double lambda);
std::vector<double> mix_targets(const std::vector<double>& first, const std::vector<double>& second,
                                double lambda);

struct ProbeConfig {
  double held_out = 0.3;
  std::size_t iterations = 300;
  double lr = 0.05;
  double l2 = 1e-4;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double accuracy = 0.0;  // held-out
  std::size_t n_classes = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

/// Softmax regression on standardized features. Rows are split into train
/// and held-out by `groups` (e.g. utterance index) so frames of one
/// utterance never straddle the split.
ProbeResult linear_probe(const Tensor& features, const std::vector<int>& labels,
                         const std::vector<std::size_t>& groups, const ProbeConfig& cfg = {});

/// Frame features and latent-state labels of the unmasked fused stream.
struct ProbeData {
  Tensor features;
  std::vector<int> labels;
  std::vector<std::size_t> groups;
};
ProbeData fused_probe_data(const AvModel& model, const std::vector<Utterance>& corpus);

enum class FinetuneTask { asr, vsr, avsr, wordclass };
enum class WordBackend { mean_pool, temporal_conv };

const char* task_name(FinetuneTask t);

struct FinetuneConfig {
  FinetuneTask task = FinetuneTask::avsr;
  ExclusionStrategy strategy = ExclusionStrategy::embedding_mask;
  TrainConfig train;
  // VSR runs this fraction of the configured step budget.
  double vsr_step_ratio = 0.4;
  FeatureAugment augment{0.25, 5, true, true, 0};
  std::string vocabulary = "abcdefghijklmnopqrstuvwxyz";
  // word classification
  WordBackend backend = WordBackend::mean_pool;
  std::size_t n_classes = 5;
  std::size_t clip_frames = 29;
  double mixup_alpha = 0.4;
  std::size_t temporal_mask = 9;

  std::size_t steps() const;
  void validate() const;
};

/// Which modality the task drops (none for AVSR and word classification).
ExcludedModality task_exclusion(FinetuneTask task);
/// Throws ConfigError when a pre-training mode cannot initialize the task.
void check_task_init(FinetuneTask task, ExcludedModality pretrained_without);

void init_head(const FinetuneConfig& cfg, std::size_t dim, ParameterSet& params, Rng& rng);

struct UtteranceResult {
  std::string id;
  std::string ref;
  std::string hyp;
  double cer = 0.0;
  double wer = 0.0;
};

struct EvalReport {
  std::string task;
  std::string strategy;
  std::vector<UtteranceResult> rows;
  std::optional<double> cer;
  std::optional<double> wer;
  std::optional<double> accuracy;
  std::optional<double> loss;
};

/// Word-class label of a clip: its most frequent latent state (lowest id on ties).
int majority_state(const std::vector<int>& states);
/// Deterministic clip of `frames` frames centred in the utterance.
std::optional<Utterance> center_clip(const Utterance& u, std::size_t frames, std::size_t samples_per_frame);

EvalReport evaluate(const AvModel& model, const FinetuneConfig& cfg, const std::vector<Utterance>& corpus);

struct FinetuneResult {
  EvalReport report;  // on the validation set, with the best parameters loaded
  std::size_t best_step = 0;
  std::size_t steps = 0;
  std::vector<MetricsRecord> metrics;
};

/// Jointly tunes all model parameters and the task head (which is created
/// if absent). The parameters with the best validation score are kept.
FinetuneResult finetune(AvModel& model, const FinetuneConfig& cfg, const std::vector<Utterance>& train,
                        const std::vector<Utterance>& val, std::uint64_t seed);

std::string report_json(const EvalReport& r);

}  // namespace avrl
