#pragma once

#include <string>
#include <vector>

#include "avrl/encoders.hpp"

namespace avrl {

enum class PositionalEncoding { conv, sinusoidal, none };

struct FusionConfig {
  std::size_t n_blocks = 2;
  std::size_t attention_dim = 32;
  std::size_t ff_dim = 64;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 64;
  PositionalEncoding positional = PositionalEncoding::conv;
  std::size_t pos_kernel = 9;
  double dropout = 0.1;

  void validate() const;
};

void init_fusion(const FusionConfig& cfg, std::size_t dim, ParameterSet& params, Rng& rng);

/// Dropout randomness for one forward pass; null rng means evaluation mode.
struct ForwardContext {
  Rng* rng = nullptr;
  bool training() const { return rng != nullptr; }
};

/// Pre-norm block: x + attn(LN(x)), then x + FFN(LN(x)). When `attention`
/// is non-null it receives one T x T weight matrix per head.
Var transformer_block(const Var& x, const ParameterSet& params, const std::string& prefix,
                      const FusionConfig& cfg, ForwardContext ctx,
                      std::vector<Tensor>* attention = nullptr);

/// Concatenates the masked audio and visual sequences along features, maps
/// them through the MLP, adds positional information and applies the
/// transformer stack. Output is T x D.
EmbeddingSequence fuse(const EmbeddingSequence& audio, const EmbeddingSequence& visual,
                       const FusionConfig& cfg, const ParameterSet& params, ForwardContext ctx = {});

Tensor sinusoidal_positions(std::size_t length, std::size_t dim);

}  // namespace avrl
