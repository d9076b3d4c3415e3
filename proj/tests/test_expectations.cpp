// Published expectations this implementation does not meet. They stay as
// ordinary tests so the gap is visible in every run.
#include <algorithm>
#include <cmath>

#include "avrl/checks.hpp"
#include "avrl/downstream.hpp"
#include "doctest.h"

using namespace avrl;

namespace {

// Pre-training model with four-wide features everywhere.
RunConfig narrow_config() {
  auto c = tiny_config();
  c.model.audio.layers = {{4, 4, 4}, {4, 2, 4}, {2, 2, 4}};
  c.model.audio.output_dim = c.model.visual.output_dim = 4;
  c.model.visual.stage_channels = {4};
  c.model.fusion.attention_dim = 4;
  c.model.fusion.n_heads = 1;
  c.model.fusion.ff_dim = 8;
  c.model.fusion.mlp_hidden = 8;
  c.model.objective.loss_dim = 4;
  return c;
}

}  // namespace

TEST_CASE("narrow pre-training loss passes the full gradient check at h = 1e-4") {
  const auto cfg = narrow_config();
  std::size_t failures = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = pretrain_grad_check(cfg, seed, {6, 0, 1e-4});
    failures += !r.passed();
    worst = std::max(worst, r.max_rel_error());
  }
  MESSAGE("failing seeds " << failures << " of 20, worst relative error " << worst);
  CHECK(failures == 0);
}

TEST_CASE("the tiny gradient suite on the default model passes within a minute") {
  const auto r = grad_suite(desk_config(), "tiny", 20);
  MESSAGE("pre-training failures " << r.pretrain_failures << ", worst " << r.worst_pretrain << ", CTC failures "
                                   << r.ctc_failures << ", " << r.seconds << " s");
  CHECK(r.passed());
  CHECK(r.seconds < 60.0);
}

TEST_CASE("a probe on the untrained desk model is near chance") {
  const auto cfg = desk_config();
  auto data = cfg.data;
  data.n_utterances = 60;
  const auto corpus = generate_corpus(data, 11);
  const auto model = AvModel::create(cfg.model, 1);
  const auto pd = fused_probe_data(model, corpus.utterances);
  const auto r = linear_probe(pd.features, pd.labels, pd.groups);
  MESSAGE("held-out accuracy " << r.accuracy);
  CHECK(std::abs(r.accuracy - 1.0 / data.n_states) <= 0.05);
}
