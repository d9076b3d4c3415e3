#include "avrl/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"

namespace avrl {

namespace {

const char* projection_prefix(Modality m) {
  switch (m) {
    case Modality::audio: return "proj.a";
    case Modality::visual: return "proj.v";
    case Modality::fused: return "proj.c";
  }
  return "";
}

// Draws n items from pool: without replacement when the pool is large
// enough, otherwise uniformly with replacement.
void draw(const std::vector<std::size_t>& pool, std::size_t n, Modality m,
          std::vector<Candidate>& out, Rng& rng) {
  if (n == 0) return;
  if (pool.size() >= n) {
    std::vector<std::size_t> work = pool;
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, work.size() - 1);
      std::swap(work[i], work[d(rng)]);
      out.push_back({m, work[i]});
    }
    return;
  }
  std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
  for (std::size_t i = 0; i < n; ++i) out.push_back({m, pool[d(rng)]});
}

Modality other_of(Modality m) { return m == Modality::audio ? Modality::visual : Modality::audio; }

}  // namespace

void ObjectiveConfig::validate() const {
  if (loss_dim == 0) throw ConfigError("objective: loss_dim must be positive");
  if (!(temperature > 0.0)) throw ConfigError("objective: temperature must be > 0");
  if (n_negatives == 0) throw ConfigError("objective: n_negatives must be >= 1");
}

void init_projections(const ObjectiveConfig& cfg, std::size_t dim, ParameterSet& params, Rng& rng) {
  for (auto m : {Modality::audio, Modality::visual, Modality::fused}) {
    const std::string p = projection_prefix(m);
    params.add(p + ".weight", init_weight(dim, cfg.loss_dim, rng));
    params.add(p + ".bias", Tensor({cfg.loss_dim}, 0.0));
  }
}

Var project(const Var& x, const ParameterSet& params, Modality which) {
  const std::string p = projection_prefix(which);
  return ops::linear(x, params.get(p + ".weight"), params.get(p + ".bias"));
}

NegativeSet sample_negatives(const MaskPlan& target_plan, const MaskPlan& other_plan, Modality target,
                             std::size_t anchor, std::size_t n_total, bool cross_modal, Rng& rng) {
  if (target == Modality::fused) throw std::invalid_argument("sample_negatives: target must be audio or visual");
  if (!target_plan.contains(anchor)) {
    throw std::invalid_argument("sample_negatives: anchor " + std::to_string(anchor) + " is not masked");
  }
  std::vector<std::size_t> same;
  same.reserve(target_plan.indices.size());
  for (auto i : target_plan.indices) {
    if (i != anchor) same.push_back(i);
  }
  const auto& other = other_plan.indices;

  NegativeSet out;
  out.target = target;
  out.anchor = anchor;
  if (!cross_modal) {
    if (same.empty()) {
      throw DataError("sample_negatives: fewer than 2 masked frames, no valid distractor");
    }
    out.n_same = n_total;
  } else {
    out.n_other = n_total / 2;
    out.n_same = n_total - out.n_other;
    if (same.empty()) {
      out.n_other = n_total;
      out.n_same = 0;
    } else if (other.empty()) {
      out.n_same = n_total;
      out.n_other = 0;
    }
    if (same.empty() && other.empty()) throw DataError("sample_negatives: no masked frames to draw from");
  }
  out.items.reserve(n_total);
  draw(same, out.n_same, target, out.items, rng);
  draw(other, out.n_other, other_of(target), out.items, rng);
  return out;
}

double DirectionResult::mean_loss() const {
  return anchors == 0 ? 0.0 : loss_sum.value()[0] / static_cast<double>(anchors);
}

std::optional<double> DirectionResult::accuracy() const {
  if (anchors == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(anchors);
}

DirectionResult contrastive_direction(const Var& fused, const Var& target, const Var& other,
                                      const std::vector<NegativeSet>& negatives, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("contrastive_direction: temperature must be > 0");
  DirectionResult result;
  if (negatives.empty()) {
    result.loss_sum = Var::constant(Tensor::scalar(0.0));
    return result;
  }
  const auto T = fused.rows();
  if (target.rows() != T || (other && other.rows() != T)) {
    throw std::invalid_argument("contrastive_direction: sequence lengths differ");
  }
  const Modality target_mod = negatives.front().target;
  const auto k = negatives.front().items.size();
  const auto width = k + 1;

  Var c_hat = ops::row_normalize(fused, kCosineEps);
  Var pool = ops::row_normalize(target, kCosineEps);
  if (other) pool = ops::concat_rows({pool, ops::row_normalize(other, kCosineEps)});

  std::vector<std::int64_t> anchor_rows, cand_rows;
  anchor_rows.reserve(negatives.size() * width);
  cand_rows.reserve(negatives.size() * width);
  for (const auto& ns : negatives) {
    if (ns.items.size() != k || ns.target != target_mod) {
      throw std::invalid_argument("contrastive_direction: anchors must share target and negative count");
    }
    if (ns.anchor >= T) throw std::invalid_argument("contrastive_direction: anchor out of range");
    anchor_rows.push_back(static_cast<std::int64_t>(ns.anchor));
    cand_rows.push_back(static_cast<std::int64_t>(ns.anchor));
    for (const auto& c : ns.items) {
      anchor_rows.push_back(static_cast<std::int64_t>(ns.anchor));
      if (c.modality == target_mod) {
        cand_rows.push_back(static_cast<std::int64_t>(c.index));
      } else {
        if (!other) throw std::invalid_argument("contrastive_direction: cross-modal negative without other stream");
        cand_rows.push_back(static_cast<std::int64_t>(T + c.index));
      }
    }
  }

  Var sims = ops::row_dot(ops::gather_rows(c_hat, std::move(anchor_rows), 1), ops::gather_rows(pool, std::move(cand_rows), 1));
  sims = ops::clamp(sims, -1.0, 1.0);
  Var logits = ops::scale(ops::reshape(sims, negatives.size(), width), 1.0 / temperature);
  Var log_probs = ops::log_softmax_rows(logits);
  result.loss_sum = ops::scale(ops::sum(ops::pick(log_probs, std::vector<std::size_t>(negatives.size(), 0))), -1.0);
  result.anchors = negatives.size();

  const auto& lv = logits.value();
  for (std::size_t a = 0; a < negatives.size(); ++a) {
    const double pos = lv.at(a, 0);
    bool best = true;
    for (std::size_t j = 1; j < width; ++j) {
      if (lv.at(a, j) >= pos) {
        best = false;
        break;
      }
    }
    if (best) ++result.correct;
  }
  return result;
}

LossBreakdown combined_loss(double loss_c2a, double loss_c2v) {
  if (!std::isfinite(loss_c2a) || !std::isfinite(loss_c2v)) {
    throw NumericError("combined_loss: non-finite component");
  }
  LossBreakdown b;
  b.loss_c2a = loss_c2a;
  b.loss_c2v = loss_c2v;
  b.total = loss_c2a + loss_c2v;
  return b;
}

}  // namespace avrl
