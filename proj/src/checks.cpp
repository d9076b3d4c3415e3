#include "avrl/checks.hpp"

#include <algorithm>
#include <chrono>

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"

namespace avrl {

RunConfig tiny_config() {
  RunConfig c;
  c.data.samples_per_frame = 16;
  c.data.height = 4;
  c.data.width = 4;
  c.data.n_utterances = 8;
  c.data.min_frames = 8;
  c.data.max_frames = 16;
  c.model.samples_per_frame = 16;
  c.model.audio.layers = {{4, 4, 8}, {4, 2, 8}, {2, 2, 16}};
  c.model.audio.output_dim = 16;
  c.model.visual.temporal = {{3, 1, 1, 4}};
  c.model.visual.stage_channels = {8};
  c.model.visual.output_dim = 16;
  c.model.fusion.n_blocks = 1;
  c.model.fusion.attention_dim = 16;
  c.model.fusion.n_heads = 2;
  c.model.fusion.ff_dim = 24;
  c.model.fusion.mlp_hidden = 24;
  c.model.fusion.pos_kernel = 3;
  c.model.objective.loss_dim = 8;
  c.model.objective.n_negatives = 6;
  c.pretrain.train.budget_frames = 32;
  c.pretrain.train.min_frames = 8;
  c.pretrain.train.schedule.total_steps = 20;
  c.finetune.train.budget_frames = 32;
  c.finetune.train.min_frames = 8;
  c.finetune.train.schedule.total_steps = 10;
  c.finetune.augment.mask_span = 2;
  c.finetune.clip_frames = 8;
  c.finetune.temporal_mask = 3;
  return c;
}

GradCheckReport pretrain_grad_check(const RunConfig& cfg, std::uint64_t seed, const GradCheckSettings& s) {
  auto data = cfg.data;
  data.n_utterances = 1;
  data.min_frames = data.max_frames = s.frames;
  const auto u = generate_corpus(data, derive_seed(seed, {hash_string("gradcheck-data")})).utterances.at(0);
  auto model = AvModel::create(cfg.model, derive_seed(seed, {hash_string("gradcheck-model")}));
  Rng rng(derive_seed(seed, {hash_string("gradcheck-plan")}));
  const auto plan = plan_pretrain(model, u, ExcludedModality::none, rng);
  auto loss = [&]() -> Var {
    const auto t = pretrain_forward(model, u, plan, ExcludedModality::none, true);
    std::vector<Var> parts;
    if (t.c2a.anchors) parts.push_back(t.c2a.loss_sum);
    if (t.c2v.anchors) parts.push_back(t.c2v.loss_sum);
    if (parts.empty()) throw DataError("gradcheck utterance has no masked frames");
    return parts.size() == 1 ? parts[0] : ops::add(parts[0], parts[1]);
  };
  GradCheckOptions opt;
  opt.max_elements_per_param = s.max_elements_per_param;
  opt.seed = seed;
  opt.step = s.step;
  return grad_check(loss, model.params, opt);
}

GradCheckReport ctc_grad_check(std::uint64_t seed, std::size_t frames, std::size_t vocab) {
  Rng rng(derive_seed(seed, {hash_string("gradcheck-ctc")}));
  std::normal_distribution<double> nd(0.0, 1.0);
  auto logits = Tensor::matrix(frames, vocab);
  for (auto& x : logits.storage()) x = nd(rng);
  // Repeats need a blank between them, so a target of frames / 2 always fits.
  std::uniform_int_distribution<std::size_t> len(1, std::max<std::size_t>(1, frames / 2));
  std::uniform_int_distribution<int> sym(1, static_cast<int>(vocab) - 1);
  std::vector<int> target(len(rng));
  for (auto& t : target) t = sym(rng);
  ParameterSet params;
  params.add("logits", logits);
  return grad_check([&]() -> Var { return ctc_loss(ops::log_softmax_rows(params.get("logits")), target); }, params,
                    {.seed = seed});
}

}  // namespace avrl

namespace avrl {

GradSuiteResult grad_suite(const RunConfig& cfg, const std::string& size, std::size_t seeds) {
  GradCheckSettings s;
  if (size == "tiny") {
    s = {8, 3};
  } else if (size == "desk") {
    s = {12, 5};
  } else {
    throw ConfigError("gradcheck size must be tiny or desk, got " + size);
  }
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteResult r;
  r.seeds = seeds;
  for (std::size_t seed = 0; seed < seeds; ++seed) {
    const auto p = pretrain_grad_check(cfg, seed, s);
    r.worst_pretrain = std::max(r.worst_pretrain, p.max_rel_error());
    if (!p.passed()) ++r.pretrain_failures;
    const auto c = ctc_grad_check(seed);
    r.worst_ctc = std::max(r.worst_ctc, c.max_rel_error());
    if (!c.passed()) ++r.ctc_failures;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace avrl
