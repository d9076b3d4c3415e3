#pragma once

#include <span>
#include <vector>

#include "avrl/autodiff.hpp"
#include "avrl/numeric.hpp"

namespace avrl {

enum class Modality { audio, visual, fused };

const char* modality_name(Modality m);

/// T x D frame embeddings of one modality (or of the fused stream).
struct EmbeddingSequence {
  Var frames;
  Modality modality = Modality::audio;

  std::size_t length() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
};

struct ConvLayerSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t channels = 1;
};

struct AudioEncoderConfig {
  // The last layer must be the kernel-2 / stride-2 frame-rate matching layer.
  std::vector<ConvLayerSpec> layers = {{8, 4, 8}, {8, 4, 16}, {8, 4, 16}, {5, 5, 32}, {2, 2, 32}};
  std::size_t output_dim = 32;
  bool normalize_waveform = true;

  std::size_t total_stride() const;
  void validate(std::size_t samples_per_frame) const;
};

struct TemporalLayerSpec {
  std::size_t kernel = 5;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t channels = 4;
};

struct VisualEncoderConfig {
  std::vector<TemporalLayerSpec> temporal = {{5, 1, 1, 4}};
  std::size_t spatial_kernel = 3;
  // One 3x3 conv + layer norm + GELU + 2x2 average pool per entry.
  std::vector<std::size_t> stage_channels = {8, 16};
  std::size_t output_dim = 32;

  void validate() const;
};

/// Exact temporal receptive field (frames) of the visual encoder's temporal stack.
std::size_t receptive_field(const VisualEncoderConfig& cfg);

void init_audio_encoder(const AudioEncoderConfig& cfg, ParameterSet& params, Rng& rng);
void init_visual_encoder(const VisualEncoderConfig& cfg, ParameterSet& params, Rng& rng);

/// T = floor(len(waveform) / total_stride) frames of output_dim.
EmbeddingSequence encode_audio(std::span<const float> waveform, const AudioEncoderConfig& cfg,
                               const ParameterSet& params);

/// frames x height x width single-channel input; T = frames.
EmbeddingSequence encode_visual(std::span<const float> frames, std::size_t n_frames,
                                std::size_t height, std::size_t width,
                                const VisualEncoderConfig& cfg, const ParameterSet& params);

/// Gaussian init with std 1/sqrt(fan_in) for a (fan_in x fan_out) weight.
Tensor init_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace avrl
