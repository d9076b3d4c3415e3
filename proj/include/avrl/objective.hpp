#pragma once

#include <optional>
#include <vector>

#include "avrl/masking.hpp"

namespace avrl {

/// Which directional losses are active: c->a only, c->v only, or both.
enum class LossDirections { audio, visual, both };

struct ObjectiveConfig {
  std::size_t loss_dim = 16;
  double temperature = 0.1;
  std::size_t n_negatives = 100;
  bool cross_modal_negatives = true;
  LossDirections directions = LossDirections::both;

  bool uses_audio_targets() const { return directions != LossDirections::visual; }
  bool uses_visual_targets() const { return directions != LossDirections::audio; }
  void validate() const;
};

/// Separate D -> loss_dim maps "proj.a", "proj.v", "proj.c".
void init_projections(const ObjectiveConfig& cfg, std::size_t dim, ParameterSet& params, Rng& rng);
Var project(const Var& x, const ParameterSet& params, Modality which);

struct Candidate {
  Modality modality = Modality::audio;
  std::size_t index = 0;

  bool operator==(const Candidate&) const = default;
};

/// Distractors for one anchor frame of the target modality.
struct NegativeSet {
  Modality target = Modality::audio;
  std::size_t anchor = 0;
  std::vector<Candidate> items;
  std::size_t n_same = 0;
  std::size_t n_other = 0;
};

/// Same-modality distractors come from the target's masked indices other
/// than the anchor. With cross-modal sampling half of n_total (rounded down)
/// come from the other modality's masked indices, where the anchor index is
/// allowed. A pool smaller than its request is sampled with replacement.
NegativeSet sample_negatives(const MaskPlan& target_plan, const MaskPlan& other_plan, Modality target,
                             std::size_t anchor, std::size_t n_total, bool cross_modal, Rng& rng);

struct DirectionResult {
  Var loss_sum;  // sum over anchors of -log p(positive)
  std::size_t anchors = 0;
  std::size_t correct = 0;

  double mean_loss() const;
  std::optional<double> accuracy() const;
};

/// InfoNCE over cosine similarities of projected embeddings:
/// logits = cos(c_t, e) / temperature over {positive} + negatives.
/// `other` may be empty when no negative references the other modality.
DirectionResult contrastive_direction(const Var& fused, const Var& target, const Var& other,
                                      const std::vector<NegativeSet>& negatives, double temperature);

struct LossBreakdown {
  double loss_c2a = 0.0;
  double loss_c2v = 0.0;
  double total = 0.0;
  std::optional<double> acc_c2a;
  std::optional<double> acc_c2v;
};

LossBreakdown combined_loss(double loss_c2a, double loss_c2v);

}  // namespace avrl
