#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "avrl/autodiff.hpp"

namespace avrl {

using Rng = std::mt19937_64;

/// splitmix64-style mixing of a base seed with a list of stream tags.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts);
std::uint64_t hash_string(std::string_view s);

/// Max-subtracted softmax. Throws on empty or non-finite input.
std::vector<double> softmax_stable(std::span<const double> logits);

/// Norm floor applied to both vectors in cosine_similarity.
inline constexpr double kCosineEps = 1e-8;

/// u.v / (max(|u|, eps) * max(|v|, eps)), clamped to [-1, 1].
double cosine_similarity(std::span<const double> u, std::span<const double> v);

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, denom_floor). The floor sits
  // above central-difference roundoff (~1e-10 here) so gradients that are
  // exactly zero, like attention key biases, are not judged on noise.
  double denom_floor = 1e-5;
  // 0 checks every element; otherwise a seeded random subset per parameter.
  std::size_t max_elements_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string path;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  double tolerance = 0.0;
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const;
  bool passed() const { return max_rel_error() < tolerance; }
};

/// Central-difference check of analytic gradients for every trainable
/// parameter. `loss_fn` must rebuild its graph from the current parameter
/// values on each call and return a scalar. Throws NumericError when two
/// evaluations at the same point disagree.
GradCheckReport grad_check(const std::function<Var()>& loss_fn, ParameterSet& params,
                           const GradCheckOptions& options = {});

}  // namespace avrl
