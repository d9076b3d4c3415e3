#include "avrl/model.hpp"

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"

namespace avrl {

void ModelConfig::validate() const {
  audio.validate(samples_per_frame);
  visual.validate();
  fusion.validate();
  masking.validate();
  objective.validate();
  if (audio.output_dim != visual.output_dim) {
    throw ConfigError("model: audio and visual embedding dimensions must match");
  }
}

AvModel AvModel::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  AvModel m;
  m.config = config;
  const auto d = config.dim();
  // Each sub-module draws from its own stream so adding a module does not
  // perturb the others' initial weights.
  Rng ra(derive_seed(seed, {hash_string("init.audio")}));
  init_audio_encoder(config.audio, m.params, ra);
  Rng rv(derive_seed(seed, {hash_string("init.visual")}));
  init_visual_encoder(config.visual, m.params, rv);
  Rng rf(derive_seed(seed, {hash_string("init.fusion")}));
  init_fusion(config.fusion, d, m.params, rf);
  Rng rp(derive_seed(seed, {hash_string("init.proj")}));
  init_projections(config.objective, d, m.params, rp);

  Rng rm(derive_seed(seed, {hash_string("init.mask")}));
  std::normal_distribution<double> nd(0.0, 1.0);
  auto mask_init = [&] {
    Tensor t({d});
    for (auto& v : t.values()) v = nd(rm);
    return t;
  };
  if (config.masking.shared_mask_embedding) {
    m.params.add("mask.shared", mask_init());
  } else {
    m.params.add("mask.audio", mask_init());
    m.params.add("mask.visual", mask_init());
  }
  return m;
}

const Var& AvModel::mask_embedding(Modality m) const {
  if (config.masking.shared_mask_embedding) return params.get("mask.shared");
  if (m == Modality::fused) throw std::invalid_argument("no mask embedding for the fused stream");
  return params.get(m == Modality::audio ? "mask.audio" : "mask.visual");
}

Var AvModel::mask_rows(Modality m, std::size_t length) const {
  const Var& e = mask_embedding(m);
  return ops::gather_rows(ops::reshape(e, 1, e.value().size()), std::vector<std::int64_t>(length, 0), 1);
}

void validate_pretrain_mode(const ObjectiveConfig& objective, ExcludedModality excluded) {
  if (excluded == ExcludedModality::none) return;
  const bool audio_gone = excluded == ExcludedModality::audio;
  if (objective.cross_modal_negatives) {
    throw ConfigError("pretrain: cross-modal negatives need both modalities");
  }
  if ((audio_gone && objective.uses_audio_targets()) || (!audio_gone && objective.uses_visual_targets())) {
    throw ConfigError("pretrain: loss direction targets an excluded modality");
  }
}

PretrainPlan plan_pretrain(const AvModel& model, const Utterance& u, ExcludedModality excluded, Rng& rng) {
  const auto& cfg = model.config;
  const auto T = u.frames;
  PretrainPlan plan;
  if (excluded == ExcludedModality::audio) {
    plan.audio = MaskPlan::full(T);
  } else {
    plan.audio = sample_spans(T, cfg.masking.mask_prob, cfg.masking.mask_span, rng);
  }
  if (excluded == ExcludedModality::visual) {
    plan.visual = MaskPlan::full(T);
  } else {
    plan.visual = expand_visual_mask(sample_spans(T, cfg.masking.mask_prob, cfg.masking.mask_span, rng),
                                     receptive_field(cfg.visual));
  }
  const auto& obj = cfg.objective;
  if (obj.uses_audio_targets()) {
    for (auto t : plan.audio.indices) {
      plan.negatives_a.push_back(sample_negatives(plan.audio, plan.visual, Modality::audio, t,
                                                  obj.n_negatives, obj.cross_modal_negatives, rng));
    }
  }
  if (obj.uses_visual_targets()) {
    for (auto t : plan.visual.indices) {
      plan.negatives_v.push_back(sample_negatives(plan.visual, plan.audio, Modality::visual, t,
                                                  obj.n_negatives, obj.cross_modal_negatives, rng));
    }
  }
  plan.dropout_seed = rng();
  return plan;
}

PretrainTerms pretrain_forward(const AvModel& model, const Utterance& u, const PretrainPlan& plan,
                               ExcludedModality excluded, bool training) {
  const auto& cfg = model.config;
  const auto T = u.frames;

  EmbeddingSequence a, v, a_bar, v_bar;
  if (excluded != ExcludedModality::audio) {
    a = encode_audio(u.audio, cfg.audio, model.params);
    if (a.length() != T) throw DataError("utterance " + u.id + ": audio encoder length mismatch");
    a_bar = apply_mask(a, plan.audio, model.mask_embedding(Modality::audio));
  } else {
    a_bar = {model.mask_rows(Modality::audio, T), Modality::audio};
  }
  if (excluded != ExcludedModality::visual) {
    v = encode_visual(u.visual, T, u.height, u.width, cfg.visual, model.params);
    v_bar = apply_mask(v, plan.visual, model.mask_embedding(Modality::visual));
  } else {
    v_bar = {model.mask_rows(Modality::visual, T), Modality::visual};
  }

  Rng dropout_rng(plan.dropout_seed);
  ForwardContext ctx{training ? &dropout_rng : nullptr};
  const auto c = fuse(a_bar, v_bar, cfg.fusion, model.params, ctx);

  const auto& obj = cfg.objective;
  Var c_proj = project(c.frames, model.params, Modality::fused);
  Var a_proj = a.frames ? project(a.frames, model.params, Modality::audio) : Var();
  Var v_proj = v.frames ? project(v.frames, model.params, Modality::visual) : Var();

  PretrainTerms out;
  out.c2a = contrastive_direction(c_proj, a_proj, obj.cross_modal_negatives ? v_proj : Var(),
                                  plan.negatives_a, obj.temperature);
  out.c2v = contrastive_direction(c_proj, v_proj, obj.cross_modal_negatives ? a_proj : Var(),
                                  plan.negatives_v, obj.temperature);
  return out;
}

}  // namespace avrl
