#pragma once

#include <cstdint>
#include <vector>

#include "avrl/data.hpp"
#include "avrl/fusion.hpp"
#include "avrl/objective.hpp"

namespace avrl {

/// Modality removed from a run (pre-training modes B1/B2, ASR, VSR).
enum class ExcludedModality { none, audio, visual };

/// How an excluded modality is replaced before fusion.
enum class ExclusionStrategy {
  input_zero,      // x -> 0 before the encoder
  embedding_zero,  // embedding -> 0
  embedding_mask,  // embedding -> learned mask embedding
};

struct ModelConfig {
  std::size_t samples_per_frame = kSamplesPerFrame;
  AudioEncoderConfig audio;
  VisualEncoderConfig visual;
  FusionConfig fusion;
  MaskingConfig masking;
  ObjectiveConfig objective;

  std::size_t dim() const { return audio.output_dim; }
  void validate() const;
};

/// Encoders, fusion module, mask embeddings and loss projections.
struct AvModel {
  ModelConfig config;
  ParameterSet params;

  static AvModel create(const ModelConfig& config, std::uint64_t seed);

  /// Copying an AvModel shares parameter storage; this one does not.
  AvModel clone() const { return {config, params.clone()}; }

  /// "mask.audio" / "mask.visual", or "mask.shared" when configured.
  const Var& mask_embedding(Modality m) const;
  /// T copies of the modality's mask embedding (gradient flows to it).
  Var mask_rows(Modality m, std::size_t length) const;
};

/// Masks and negatives for one pre-training utterance, sampled up front so a
/// whole accumulation group's anchor counts are known before any forward pass.
struct PretrainPlan {
  MaskPlan audio;
  MaskPlan visual;
  std::vector<NegativeSet> negatives_a;
  std::vector<NegativeSet> negatives_v;
  std::uint64_t dropout_seed = 0;
};

PretrainPlan plan_pretrain(const AvModel& model, const Utterance& u, ExcludedModality excluded, Rng& rng);

struct PretrainTerms {
  DirectionResult c2a;
  DirectionResult c2v;
};

/// Forward pass of the pre-training objective for one utterance. Dropout is
/// active only when `training` is set.
PretrainTerms pretrain_forward(const AvModel& model, const Utterance& u, const PretrainPlan& plan,
                               ExcludedModality excluded, bool training);

/// Checks the objective/exclusion combination of a pre-training mode.
void validate_pretrain_mode(const ObjectiveConfig& objective, ExcludedModality excluded);

}  // namespace avrl
