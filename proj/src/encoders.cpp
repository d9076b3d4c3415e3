#include "avrl/encoders.hpp"

#include <cmath>
#include <string>

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"

namespace avrl {

namespace {

std::string layer_path(const char* prefix, std::size_t i) {
  return std::string(prefix) + std::to_string(i);
}

void add_norm(ParameterSet& params, const std::string& prefix, std::size_t c) {
  params.add(prefix + ".ln.gamma", Tensor({c}, 1.0));
  params.add(prefix + ".ln.beta", Tensor({c}, 0.0));
}

void add_affine(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                Rng& rng) {
  params.add(prefix + ".weight", init_weight(in, out, rng));
  params.add(prefix + ".bias", Tensor({out}, 0.0));
}

// gather -> linear -> layer norm -> GELU
Var conv_block(const Var& x, std::vector<std::int64_t> index, std::size_t taps,
               const ParameterSet& params, const std::string& prefix) {
  Var h = ops::linear(ops::gather_rows(x, std::move(index), taps), params.get(prefix + ".weight"),
                      params.get(prefix + ".bias"));
  h = ops::layer_norm(h, params.get(prefix + ".ln.gamma"), params.get(prefix + ".ln.beta"));
  return ops::gelu(h);
}

}  // namespace

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::audio: return "audio";
    case Modality::visual: return "visual";
    case Modality::fused: return "fused";
  }
  return "?";
}

Tensor init_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  Tensor w = Tensor::matrix(fan_in, fan_out);
  for (auto& v : w.values()) v = nd(rng);
  return w;
}

std::size_t AudioEncoderConfig::total_stride() const {
  std::size_t s = 1;
  for (const auto& l : layers) s *= l.stride;
  return s;
}

void AudioEncoderConfig::validate(std::size_t samples_per_frame) const {
  if (layers.empty()) throw ConfigError("audio encoder: no layers");
  for (const auto& l : layers) {
    if (l.kernel == 0 || l.stride == 0 || l.channels == 0) {
      throw ConfigError("audio encoder: kernel, stride and channels must be positive");
    }
  }
  if (layers.back().kernel != 2 || layers.back().stride != 2) {
    throw ConfigError("audio encoder: final layer must have kernel 2 and stride 2");
  }
  if (total_stride() != samples_per_frame) {
    throw ConfigError("audio encoder: total stride " + std::to_string(total_stride()) +
                      " must equal samples per frame " + std::to_string(samples_per_frame));
  }
  if (output_dim == 0) throw ConfigError("audio encoder: output_dim must be positive");
}

void VisualEncoderConfig::validate() const {
  if (temporal.empty()) throw ConfigError("visual encoder: no temporal layers");
  for (const auto& l : temporal) {
    if (l.kernel % 2 == 0) throw ConfigError("visual encoder: temporal kernels must be odd");
    if (l.stride != 1) throw ConfigError("visual encoder: temporal stride must be 1");
    if (l.dilation == 0 || l.channels == 0) {
      throw ConfigError("visual encoder: dilation and channels must be positive");
    }
  }
  if (spatial_kernel % 2 == 0) throw ConfigError("visual encoder: spatial kernel must be odd");
  if (output_dim == 0) throw ConfigError("visual encoder: output_dim must be positive");
}

std::size_t receptive_field(const VisualEncoderConfig& cfg) {
  std::size_t rf = 1, jump = 1;
  for (const auto& l : cfg.temporal) {
    rf += (l.kernel - 1) * l.dilation * jump;
    jump *= l.stride;
  }
  return rf;
}

void init_audio_encoder(const AudioEncoderConfig& cfg, ParameterSet& params, Rng& rng) {
  std::size_t in = 1;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& l = cfg.layers[i];
    const auto p = layer_path("audio.conv", i);
    add_affine(params, p, l.kernel * in, l.channels, rng);
    add_norm(params, p, l.channels);
    in = l.channels;
  }
  add_affine(params, "audio.proj", in, cfg.output_dim, rng);
}

void init_visual_encoder(const VisualEncoderConfig& cfg, ParameterSet& params, Rng& rng) {
  const auto sk = cfg.spatial_kernel * cfg.spatial_kernel;
  std::size_t in = 1;
  for (std::size_t i = 0; i < cfg.temporal.size(); ++i) {
    const auto& l = cfg.temporal[i];
    const auto p = layer_path("visual.temporal", i);
    add_affine(params, p, l.kernel * sk * in, l.channels, rng);
    add_norm(params, p, l.channels);
    in = l.channels;
  }
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    const auto p = layer_path("visual.stage", i);
    add_affine(params, p, sk * in, cfg.stage_channels[i], rng);
    add_norm(params, p, cfg.stage_channels[i]);
    in = cfg.stage_channels[i];
  }
  add_affine(params, "visual.proj", in, cfg.output_dim, rng);
}

EmbeddingSequence encode_audio(std::span<const float> waveform, const AudioEncoderConfig& cfg,
                               const ParameterSet& params) {
  const auto stride = cfg.total_stride();
  if (waveform.size() < stride) {
    throw DataError("encode_audio: need at least " + std::to_string(stride) + " samples, got " +
                    std::to_string(waveform.size()));
  }
  Tensor input = Tensor::matrix(waveform.size(), 1);
  double mu = 0.0;
  for (float x : waveform) mu += x;
  mu /= static_cast<double>(waveform.size());
  double var = 0.0;
  for (float x : waveform) var += (x - mu) * (x - mu);
  var /= static_cast<double>(waveform.size());
  const bool norm = cfg.normalize_waveform;
  const double inv = norm && var > 0.0 ? 1.0 / std::sqrt(var + 1e-12) : 1.0;
  for (std::size_t i = 0; i < waveform.size(); ++i) {
    input[i] = norm ? (waveform[i] - mu) * inv : waveform[i];
  }

  Var h = Var::constant(std::move(input));
  std::size_t len = waveform.size();
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& l = cfg.layers[i];
    // Centered padding keeps out_len == floor(len / stride).
    const auto out_len = len / l.stride;
    const auto pad_left = l.kernel > l.stride ? (l.kernel - l.stride) / 2 : 0;
    std::vector<std::int64_t> index(out_len * l.kernel);
    for (std::size_t o = 0; o < out_len; ++o) {
      for (std::size_t j = 0; j < l.kernel; ++j) {
        const auto src = static_cast<std::int64_t>(o * l.stride + j) - static_cast<std::int64_t>(pad_left);
        index[o * l.kernel + j] = src >= 0 && src < static_cast<std::int64_t>(len) ? src : -1;
      }
    }
    h = conv_block(h, std::move(index), l.kernel, params, layer_path("audio.conv", i));
    len = out_len;
  }
  h = ops::linear(h, params.get("audio.proj.weight"), params.get("audio.proj.bias"));
  return {h, Modality::audio};
}

EmbeddingSequence encode_visual(std::span<const float> frames, std::size_t n_frames,
                                std::size_t height, std::size_t width,
                                const VisualEncoderConfig& cfg, const ParameterSet& params) {
  if (n_frames == 0) throw DataError("encode_visual: no frames");
  if (frames.size() != n_frames * height * width) {
    throw std::invalid_argument("encode_visual: frame buffer size mismatch");
  }
  Tensor input = Tensor::matrix(frames.size(), 1);
  for (std::size_t i = 0; i < frames.size(); ++i) input[i] = frames[i];
  Var h = Var::constant(std::move(input));

  const auto sk = static_cast<std::int64_t>(cfg.spatial_kernel);
  const auto sp = sk / 2;
  const auto M = static_cast<std::int64_t>(n_frames);
  auto H = static_cast<std::int64_t>(height), W = static_cast<std::int64_t>(width);
  auto row_of = [&](std::int64_t t, std::int64_t y, std::int64_t x) {
    if (t < 0 || t >= M || y < 0 || y >= H || x < 0 || x >= W) return std::int64_t{-1};
    return (t * H + y) * W + x;
  };

  // Temporal (3-D) convolutions, same-length in time and space.
  for (std::size_t i = 0; i < cfg.temporal.size(); ++i) {
    const auto& l = cfg.temporal[i];
    const auto kt = static_cast<std::int64_t>(l.kernel);
    const auto dil = static_cast<std::int64_t>(l.dilation);
    const auto pad = (kt - 1) * dil / 2;
    const auto taps = static_cast<std::size_t>(kt * sk * sk);
    std::vector<std::int64_t> index;
    index.reserve(static_cast<std::size_t>(M * H * W) * taps);
    for (std::int64_t t = 0; t < M; ++t) {
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
          for (std::int64_t dt = 0; dt < kt; ++dt) {
            for (std::int64_t dy = 0; dy < sk; ++dy) {
              for (std::int64_t dx = 0; dx < sk; ++dx) {
                index.push_back(row_of(t + dt * dil - pad, y + dy - sp, x + dx - sp));
              }
            }
          }
        }
      }
    }
    h = conv_block(h, std::move(index), taps, params, layer_path("visual.temporal", i));
  }

  // Per-frame spatial stages: conv -> norm -> GELU -> 2x2 average pool.
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    const auto taps = static_cast<std::size_t>(sk * sk);
    std::vector<std::int64_t> index;
    index.reserve(static_cast<std::size_t>(M * H * W) * taps);
    for (std::int64_t t = 0; t < M; ++t) {
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
          for (std::int64_t dy = 0; dy < sk; ++dy) {
            for (std::int64_t dx = 0; dx < sk; ++dx) {
              index.push_back(row_of(t, y + dy - sp, x + dx - sp));
            }
          }
        }
      }
    }
    h = conv_block(h, std::move(index), taps, params, layer_path("visual.stage", i));
    if (H >= 2 && W >= 2) {
      const auto H2 = H / 2, W2 = W / 2;
      std::vector<std::int64_t> pool;
      pool.reserve(static_cast<std::size_t>(M * H2 * W2 * 4));
      for (std::int64_t t = 0; t < M; ++t) {
        for (std::int64_t y = 0; y < H2; ++y) {
          for (std::int64_t x = 0; x < W2; ++x) {
            for (std::int64_t dy = 0; dy < 2; ++dy) {
              for (std::int64_t dx = 0; dx < 2; ++dx) pool.push_back(row_of(t, 2 * y + dy, 2 * x + dx));
            }
          }
        }
      }
      h = ops::block_mean(ops::gather_rows(h, std::move(pool), 4), 4);
      H = H2;
      W = W2;
    }
  }

  // Global average pool over each frame's remaining grid.
  const auto cells = static_cast<std::size_t>(H * W);
  h = ops::block_mean(ops::reshape(h, static_cast<std::size_t>(M), cells * h.cols()), cells);
  h = ops::linear(h, params.get("visual.proj.weight"), params.get("visual.proj.bias"));
  return {h, Modality::visual};
}

}  // namespace avrl
