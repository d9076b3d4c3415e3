#pragma once

#include <vector>

#include "avrl/encoders.hpp"
#include "avrl/numeric.hpp"

namespace avrl {

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;

  bool operator==(const Span&) const = default;
};

/// Masked frame indices of one sequence; indices are the union of the spans
/// clipped to [0, length).
struct MaskPlan {
  std::size_t length = 0;
  std::vector<Span> spans;
  std::vector<std::size_t> indices;  // sorted, unique

  static MaskPlan from_spans(std::size_t length, std::vector<Span> spans);
  static MaskPlan empty(std::size_t length) { return from_spans(length, {}); }
  static MaskPlan full(std::size_t length) { return from_spans(length, {{0, length}}); }

  std::vector<bool> flags() const;
  bool contains(std::size_t t) const;
  std::size_t count() const { return indices.size(); }
  double fraction() const;
};

struct MaskingConfig {
  double mask_prob = 0.65;
  std::size_t mask_span = 5;
  bool shared_mask_embedding = false;

  void validate() const;
};

/// Number of spans drawn for a sequence of `length`: ceil(p * length / span).
std::size_t span_count(std::size_t length, double p, std::size_t span);

/// Draws span_count() distinct start indices uniformly from the positions
/// where a full span fits ([0, length - span], or {0} when length < span).
MaskPlan sample_spans(std::size_t length, double p, std::size_t span, Rng& rng);

/// Widens every span by (rf - 1) / 2 frames on each side, clipped.
MaskPlan expand_visual_mask(const MaskPlan& plan, std::size_t rf);

/// Masked frames become `mask_embedding` (D elements); others pass through.
EmbeddingSequence apply_mask(const EmbeddingSequence& seq, const MaskPlan& plan,
                             const Var& mask_embedding);

}  // namespace avrl
