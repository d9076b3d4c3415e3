#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "avrl/errors.hpp"
#include "avrl/objective.hpp"
#include "avrl/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace avrl;

using oracle::gaussian;
using oracle::make_toy;

namespace {

double vectorized(const oracle::Toy& toy, Modality m) { return oracle::toy_vectorized(toy, m); }
double explicit_loop(const oracle::Toy& toy, Modality m) { return oracle::toy_explicit(toy, m); }

}  // namespace

TEST_CASE("sample_negatives examples") {
  Rng rng(1);
  const auto plan = MaskPlan::from_spans(200, {{0, 200}});
  const auto ns = sample_negatives(plan, plan, Modality::audio, 5, 100, true, rng);
  CHECK(ns.n_same == 50);
  CHECK(ns.n_other == 50);
  CHECK(ns.items.size() == 100);
  std::size_t audio = 0;
  for (const auto& c : ns.items) audio += c.modality == Modality::audio;
  CHECK(audio == 50);

  const auto odd = sample_negatives(plan, plan, Modality::visual, 5, 7, true, rng);
  CHECK(odd.n_other == 3);
  CHECK(odd.n_same == 4);

  const auto pair = MaskPlan::from_spans(10, {{0, 2}});
  const auto rep = sample_negatives(pair, pair, Modality::audio, 0, 3, false, rng);
  REQUIRE(rep.items.size() == 3);
  for (const auto& c : rep.items) CHECK(c == Candidate{Modality::audio, 1});
}

TEST_CASE("the anchor is never its own same-modality distractor") {
  Rng rng(2);
  const auto plan = MaskPlan::from_spans(12, {{2, 6}});
  bool other_anchor = false;
  for (int i = 0; i < 10000; ++i) {
    const auto ns = sample_negatives(plan, plan, Modality::visual, 4, 6, true, rng);
    for (const auto& c : ns.items) {
      CHECK(plan.contains(c.index));
      if (c.modality == Modality::visual) {
        CHECK(c.index != 4);
      } else if (c.index == 4) {
        other_anchor = true;
      }
    }
  }
  // the other modality's frame at the anchor index is a legal distractor
  CHECK(other_anchor);
}

TEST_CASE("sampling without replacement when the pool is large enough") {
  Rng rng(3);
  const auto plan = MaskPlan::from_spans(40, {{0, 40}});
  for (int i = 0; i < 200; ++i) {
    const auto ns = sample_negatives(plan, plan, Modality::audio, 0, 20, false, rng);
    std::set<std::size_t> seen;
    for (const auto& c : ns.items) seen.insert(c.index);
    CHECK(seen.size() == 20);
  }
}

TEST_CASE("sample_negatives errors") {
  Rng rng(4);
  const auto one = MaskPlan::from_spans(10, {{3, 1}});
  const auto none = MaskPlan::empty(10);
  CHECK_THROWS_AS(sample_negatives(one, one, Modality::audio, 3, 4, false, rng), DataError);
  CHECK_THROWS(sample_negatives(one, one, Modality::audio, 2, 4, false, rng));
  CHECK_THROWS_AS(sample_negatives(one, none, Modality::audio, 3, 4, true, rng), DataError);
  // with cross-modal sampling the other modality fills in for a lone anchor
  const auto ns = sample_negatives(one, one, Modality::audio, 3, 4, true, rng);
  CHECK(ns.n_other == 4);
  for (const auto& c : ns.items) CHECK(c == Candidate{Modality::visual, 3});
}

TEST_CASE("contrastive_direction examples") {
  Rng rng(5);
  const auto c = Var::constant(gaussian(3, 4, rng));
  const auto e = Var::constant(gaussian(3, 4, rng));
  SUBCASE("zero negatives") {
    const auto r = contrastive_direction(c, e, {}, {{Modality::audio, 1, {}, 0, 0}}, 0.1);
    CHECK(r.mean_loss() == 0.0);
    CHECK(r.accuracy() == 1.0);
  }
  SUBCASE("one negative with an equal similarity") {
    auto t = c.value();
    auto same = Tensor::matrix(3, 4);
    for (std::size_t d = 0; d < 4; ++d) {
      same.at(0, d) = t.at(0, d);
      same.at(1, d) = 2.0 * t.at(0, d);
    }
    const auto r = contrastive_direction(c, Var::constant(same), {},
                                         {{Modality::audio, 0, {{Modality::audio, 1}}, 1, 0}}, 0.1);
    CHECK(r.mean_loss() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // a tie does not count as ranking the positive first
    CHECK(r.accuracy() == 0.0);
  }
  SUBCASE("no anchors") {
    const auto r = contrastive_direction(c, e, {}, {}, 0.1);
    CHECK(r.mean_loss() == 0.0);
    CHECK_FALSE(r.accuracy().has_value());
  }
  SUBCASE("bad temperature") {
    CHECK_THROWS(contrastive_direction(c, e, {}, {}, 0.0));
  }
}

TEST_CASE("vectorized loss matches the explicit loop") {
  for (bool cross : {true, false}) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      CAPTURE(cross);
      CAPTURE(seed);
      const auto toy = make_toy(seed, cross);
      for (auto m : {Modality::audio, Modality::visual}) {
        const double got = vectorized(toy, m);
        const double want = explicit_loop(toy, m);
        CHECK(std::abs(got - want) < 1e-10);
      }
    }
  }
}

TEST_CASE("turning cross-modal sampling off drops the other-modality terms") {
  // Same sampled plans; the cross-modal set keeps only its same-modality part.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto toy = make_toy(seed, true);
    auto same_only = toy;
    for (auto* negs : {&same_only.neg_a, &same_only.neg_v}) {
      for (auto& ns : *negs) {
        std::vector<Candidate> keep;
        for (const auto& c : ns.items) {
          if (c.modality == ns.target) keep.push_back(c);
        }
        ns.items = keep;
        ns.n_other = 0;
      }
    }
    std::size_t dropped = 0;
    for (const auto* negs : {&toy.neg_a, &toy.neg_v}) {
      for (const auto& ns : *negs) dropped += ns.n_other;
    }
    bool uniform = true;
    for (const auto* negs : {&same_only.neg_a, &same_only.neg_v}) {
      for (const auto& ns : *negs) uniform = uniform && ns.items.size() == negs->front().items.size();
    }
    if (!uniform) continue;
    for (auto m : {Modality::audio, Modality::visual}) {
      const double with = explicit_loop(toy, m), without = explicit_loop(same_only, m);
      CHECK(std::abs(vectorized(same_only, m) - without) < 1e-10);
      // extra distractors only ever enlarge the denominator
      if (dropped > 0) CHECK(with > without);
    }
  }
}

TEST_CASE("loss is invariant to positive scaling and negative order") {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const auto toy = make_toy(seed, true);
    const double base = vectorized(toy, Modality::audio);

    auto scaled = toy;
    scaled.proj = toy.proj.clone();
    for (const auto* p : {"proj.a.weight", "proj.a.bias", "proj.c.weight", "proj.c.bias"}) {
      for (auto& x : scaled.proj.get(p).mutable_value().values()) x *= 3.7;
    }
    CHECK(std::abs(vectorized(scaled, Modality::audio) - base) < 1e-9);

    auto shuffled = toy;
    Rng rng(seed);
    for (auto& ns : shuffled.neg_a) std::shuffle(ns.items.begin(), ns.items.end(), rng);
    CHECK(std::abs(vectorized(shuffled, Modality::audio) - base) < 1e-12);
  }
}

TEST_CASE("accuracy counts anchors whose positive ranks first") {
  auto c = Tensor::matrix(3, 2), e = Tensor::matrix(3, 2);
  c.at(0, 0) = 1;
  c.at(1, 1) = 1;
  c.at(2, 0) = 1;
  e.at(0, 0) = 1;  // matches anchor 0
  e.at(1, 1) = 1;  // matches anchor 1
  e.at(2, 1) = 1;  // wrong for anchor 2
  std::vector<NegativeSet> negs = {
      {Modality::audio, 0, {{Modality::audio, 2}}, 1, 0},
      {Modality::audio, 1, {{Modality::audio, 0}}, 1, 0},
      {Modality::audio, 2, {{Modality::audio, 0}}, 1, 0},
  };
  const auto r = contrastive_direction(Var::constant(c), Var::constant(e), {}, negs, 0.5);
  CHECK(r.anchors == 3);
  CHECK(r.correct == 2);
  CHECK(*r.accuracy() == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("combined_loss examples") {
  const auto b = combined_loss(0.3, 0.7);
  CHECK(b.total == 0.3 + 0.7);
  CHECK(b.loss_c2a == 0.3);
  CHECK(b.loss_c2v == 0.7);
  CHECK(combined_loss(0.0, 0.0).total == 0.0);
  CHECK(combined_loss(1.25, 0.0).total == 1.25);
  CHECK_THROWS_AS(combined_loss(std::nan(""), 0.0), NumericError);
}

TEST_CASE("objective config validation") {
  ObjectiveConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.n_negatives = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.loss_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(cfg.uses_audio_targets());
  cfg.directions = LossDirections::visual;
  CHECK_FALSE(cfg.uses_audio_targets());
  CHECK(cfg.uses_visual_targets());
}

TEST_CASE("objective passes grad_check with a frozen sample") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 300);
    const std::size_t T = 6, D = 8;
    ObjectiveConfig cfg;
    cfg.loss_dim = 6;
    ParameterSet ps;
    ps.add("c", gaussian(T, D, rng));
    ps.add("a", gaussian(T, D, rng));
    ps.add("v", gaussian(T, D, rng));
    init_projections(cfg, D, ps, rng);
    const auto pa = MaskPlan::from_spans(T, {{0, 3}, {4, 2}});
    const auto pv = MaskPlan::from_spans(T, {{1, 4}});
    std::vector<NegativeSet> na, nv;
    for (auto t : pa.indices) na.push_back(sample_negatives(pa, pv, Modality::audio, t, 6, true, rng));
    for (auto t : pv.indices) nv.push_back(sample_negatives(pv, pa, Modality::visual, t, 6, true, rng));
    const auto r = grad_check(
        [&] {
          const auto c = project(ps.get("c"), ps, Modality::fused);
          const auto a = project(ps.get("a"), ps, Modality::audio);
          const auto v = project(ps.get("v"), ps, Modality::visual);
          return ops::add(contrastive_direction(c, a, v, na, cfg.temperature).loss_sum,
                          contrastive_direction(c, v, a, nv, cfg.temperature).loss_sum);
        },
        ps);
    CHECK(r.max_rel_error() < 1e-4);
  }
}
