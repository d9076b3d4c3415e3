#include "avrl/fusion.hpp"

#include <cmath>

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"

namespace avrl {

namespace {

void add_linear(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                Rng& rng) {
  params.add(prefix + ".weight", init_weight(in, out, rng));
  params.add(prefix + ".bias", Tensor({out}, 0.0));
}

void add_norm(ParameterSet& params, const std::string& prefix, std::size_t dim) {
  params.add(prefix + ".gamma", Tensor({dim}, 1.0));
  params.add(prefix + ".beta", Tensor({dim}, 0.0));
}

Var apply_linear(const Var& x, const ParameterSet& params, const std::string& prefix) {
  return ops::linear(x, params.get(prefix + ".weight"), params.get(prefix + ".bias"));
}

Var apply_norm(const Var& x, const ParameterSet& params, const std::string& prefix) {
  return ops::layer_norm(x, params.get(prefix + ".gamma"), params.get(prefix + ".beta"));
}

Var maybe_dropout(const Var& x, double p, ForwardContext ctx) {
  return ctx.training() ? ops::dropout(x, p, *ctx.rng) : x;
}

}  // namespace

void FusionConfig::validate() const {
  if (n_heads == 0 || attention_dim == 0 || attention_dim % n_heads != 0) {
    throw ConfigError("fusion: attention_dim must be a positive multiple of n_heads");
  }
  if (ff_dim == 0 || mlp_hidden == 0) throw ConfigError("fusion: ff_dim and mlp_hidden must be positive");
  if (positional == PositionalEncoding::conv && pos_kernel % 2 == 0) {
    throw ConfigError("fusion: pos_kernel must be odd");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("fusion: dropout must be in [0, 1)");
}

void init_fusion(const FusionConfig& cfg, std::size_t dim, ParameterSet& params, Rng& rng) {
  add_linear(params, "fusion.mlp.fc1", 2 * dim, cfg.mlp_hidden, rng);
  add_linear(params, "fusion.mlp.fc2", cfg.mlp_hidden, dim, rng);
  if (cfg.positional == PositionalEncoding::conv) {
    add_linear(params, "fusion.pos_conv", cfg.pos_kernel * dim, dim, rng);
  }
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const auto p = "fusion.block" + std::to_string(b);
    add_norm(params, p + ".ln1", dim);
    add_linear(params, p + ".attn.q", dim, cfg.attention_dim, rng);
    add_linear(params, p + ".attn.k", dim, cfg.attention_dim, rng);
    add_linear(params, p + ".attn.v", dim, cfg.attention_dim, rng);
    add_linear(params, p + ".attn.out", cfg.attention_dim, dim, rng);
    add_norm(params, p + ".ln2", dim);
    add_linear(params, p + ".ffn.fc1", dim, cfg.ff_dim, rng);
    add_linear(params, p + ".ffn.fc2", cfg.ff_dim, dim, rng);
  }
  add_norm(params, "fusion.ln_out", dim);
}

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  Tensor pe = Tensor::matrix(length, dim);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      pe.at(t, i) = i % 2 == 0 ? std::sin(t * rate) : std::cos(t * rate);
    }
  }
  return pe;
}

Var transformer_block(const Var& x, const ParameterSet& params, const std::string& prefix,
                      const FusionConfig& cfg, ForwardContext ctx, std::vector<Tensor>* attention) {
  const auto head_dim = cfg.attention_dim / cfg.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Var h = apply_norm(x, params, prefix + ".ln1");
  Var q = apply_linear(h, params, prefix + ".attn.q");
  Var k = apply_linear(h, params, prefix + ".attn.k");
  Var v = apply_linear(h, params, prefix + ".attn.v");
  std::vector<Var> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t i = 0; i < cfg.n_heads; ++i) {
    const auto lo = i * head_dim, hi = lo + head_dim;
    Var qi = ops::slice_cols(q, lo, hi);
    Var ki = ops::slice_cols(k, lo, hi);
    Var vi = ops::slice_cols(v, lo, hi);
    Var w = ops::softmax_rows(ops::scale(ops::matmul(qi, ops::transpose(ki)), inv_sqrt));
    if (attention) attention->push_back(w.value());
    heads.push_back(ops::matmul(w, vi));
  }
  Var attn = apply_linear(cfg.n_heads == 1 ? heads[0] : ops::concat_cols(heads), params,
                          prefix + ".attn.out");
  Var y = ops::add(x, maybe_dropout(attn, cfg.dropout, ctx));

  Var f = apply_norm(y, params, prefix + ".ln2");
  f = apply_linear(ops::gelu(apply_linear(f, params, prefix + ".ffn.fc1")), params, prefix + ".ffn.fc2");
  return ops::add(y, maybe_dropout(f, cfg.dropout, ctx));
}

EmbeddingSequence fuse(const EmbeddingSequence& audio, const EmbeddingSequence& visual,
                       const FusionConfig& cfg, const ParameterSet& params, ForwardContext ctx) {
  if (audio.length() != visual.length()) {
    throw std::invalid_argument("fuse: audio length " + std::to_string(audio.length()) +
                                " vs visual length " + std::to_string(visual.length()));
  }
  if (audio.dim() != visual.dim()) throw std::invalid_argument("fuse: embedding dims differ");
  const auto T = audio.length();
  const auto D = audio.dim();

  Var x = ops::concat_cols({audio.frames, visual.frames});
  x = apply_linear(ops::gelu(apply_linear(x, params, "fusion.mlp.fc1")), params, "fusion.mlp.fc2");

  switch (cfg.positional) {
    case PositionalEncoding::conv: {
      const auto kp = static_cast<std::int64_t>(cfg.pos_kernel);
      const auto pad = kp / 2;
      std::vector<std::int64_t> index(T * cfg.pos_kernel);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::int64_t j = 0; j < kp; ++j) {
          const auto src = static_cast<std::int64_t>(t) + j - pad;
          index[t * cfg.pos_kernel + static_cast<std::size_t>(j)] =
              src >= 0 && src < static_cast<std::int64_t>(T) ? src : -1;
        }
      }
      Var pos = apply_linear(ops::gather_rows(x, std::move(index), cfg.pos_kernel), params, "fusion.pos_conv");
      x = ops::add(x, ops::gelu(pos));
      break;
    }
    case PositionalEncoding::sinusoidal:
      x = ops::add(x, Var::constant(sinusoidal_positions(T, D)));
      break;
    case PositionalEncoding::none:
      break;
  }

  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    x = transformer_block(x, params, "fusion.block" + std::to_string(b), cfg, ctx);
  }
  x = apply_norm(x, params, "fusion.ln_out");
  return {x, Modality::fused};
}

}  // namespace avrl
