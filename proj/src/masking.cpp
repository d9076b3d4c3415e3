#include "avrl/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"

namespace avrl {

MaskPlan MaskPlan::from_spans(std::size_t length, std::vector<Span> spans) {
  MaskPlan plan;
  plan.length = length;
  std::vector<bool> hit(length, false);
  for (auto& s : spans) {
    const auto end = std::min(length, s.start + s.length);
    s.start = std::min(s.start, length);
    s.length = end - s.start;
    for (auto t = s.start; t < end; ++t) hit[t] = true;
  }
  plan.spans = std::move(spans);
  for (std::size_t t = 0; t < length; ++t) {
    if (hit[t]) plan.indices.push_back(t);
  }
  return plan;
}

std::vector<bool> MaskPlan::flags() const {
  std::vector<bool> f(length, false);
  for (auto t : indices) f[t] = true;
  return f;
}

bool MaskPlan::contains(std::size_t t) const {
  return std::binary_search(indices.begin(), indices.end(), t);
}

double MaskPlan::fraction() const {
  return length == 0 ? 0.0 : static_cast<double>(indices.size()) / static_cast<double>(length);
}

void MaskingConfig::validate() const {
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("masking: mask_prob must be in [0, 1]");
  if (mask_span < 1) throw ConfigError("masking: mask_span must be >= 1");
}

std::size_t span_count(std::size_t length, double p, std::size_t span) {
  if (p <= 0.0 || length == 0) return 0;
  // The epsilon absorbs representation error in products like 0.65 * 100.
  const double raw = p * static_cast<double>(length) / static_cast<double>(span);
  return static_cast<std::size_t>(std::ceil(raw - 1e-9));
}

MaskPlan sample_spans(std::size_t length, double p, std::size_t span, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("sample_spans: p must be in [0, 1]");
  if (span < 1) throw std::invalid_argument("sample_spans: span must be >= 1");
  if (length < 1) throw std::invalid_argument("sample_spans: length must be >= 1");

  const std::size_t n_starts = length >= span ? length - span + 1 : 1;
  const std::size_t n = std::min(span_count(length, p, span), n_starts);
  std::vector<std::size_t> starts(n_starts);
  std::iota(starts.begin(), starts.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_starts - 1);
    std::swap(starts[i], starts[pick(rng)]);
  }
  starts.resize(n);
  std::sort(starts.begin(), starts.end());

  std::vector<Span> spans;
  spans.reserve(n);
  for (auto s : starts) spans.push_back({s, span});
  return MaskPlan::from_spans(length, std::move(spans));
}

MaskPlan expand_visual_mask(const MaskPlan& plan, std::size_t rf) {
  if (rf == 0 || rf % 2 == 0) throw std::invalid_argument("expand_visual_mask: rf must be odd");
  const auto half = (rf - 1) / 2;
  std::vector<Span> spans;
  spans.reserve(plan.spans.size());
  for (const auto& s : plan.spans) {
    if (s.length == 0) continue;
    const auto start = s.start >= half ? s.start - half : 0;
    spans.push_back({start, s.start + s.length + half - start});
  }
  return MaskPlan::from_spans(plan.length, std::move(spans));
}

EmbeddingSequence apply_mask(const EmbeddingSequence& seq, const MaskPlan& plan,
                             const Var& mask_embedding) {
  if (plan.length != seq.length()) {
    throw std::invalid_argument("apply_mask: plan length " + std::to_string(plan.length) +
                                " vs sequence length " + std::to_string(seq.length()));
  }
  if (mask_embedding.value().size() != seq.dim()) {
    throw std::invalid_argument("apply_mask: mask embedding dimension mismatch");
  }
  if (plan.indices.empty()) return seq;
  return {ops::replace_rows(seq.frames, plan.flags(), mask_embedding), seq.modality};
}

}  // namespace avrl
