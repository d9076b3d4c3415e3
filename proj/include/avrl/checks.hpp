#pragma once

#include <cstdint>
#include <string>

#include "avrl/config.hpp"

namespace avrl {

/// A small model and corpus for fast tests. Its narrow layers are too
/// curved for h = 1e-4 central differences; gradient checks use the desk
/// architecture instead.
RunConfig tiny_config();

struct GradCheckSettings {
  std::size_t frames = 12;
  // 0 checks every element of every parameter.
  std::size_t max_elements_per_param = 0;
  double step = 1e-4;
};

/// End-to-end pre-training loss (both directions, dropout on with a fixed
/// mask) on one synthetic utterance generated from `seed`.
GradCheckReport pretrain_grad_check(const RunConfig& cfg, std::uint64_t seed, const GradCheckSettings& s = {});

/// CTC loss on log-softmax of random logits with a random feasible target.
GradCheckReport ctc_grad_check(std::uint64_t seed, std::size_t frames = 8, std::size_t vocab = 5);

struct GradSuiteResult {
  std::size_t seeds = 0;
  std::size_t pretrain_failures = 0;
  std::size_t ctc_failures = 0;
  double worst_pretrain = 0.0;
  double worst_ctc = 0.0;
  double seconds = 0.0;

  bool passed() const { return pretrain_failures == 0 && ctc_failures == 0; }
};

/// "tiny" (8-frame utterances, 3 elements per parameter) or "desk"
/// (12 frames, 5 elements per parameter), each over `seeds` seeds, on the
/// model of `cfg`.
GradSuiteResult grad_suite(const RunConfig& cfg, const std::string& size, std::size_t seeds);

}  // namespace avrl
