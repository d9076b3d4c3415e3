#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "avrl/numeric.hpp"

namespace avrl {

/// Abstract audio samples per 40 ms frame.
inline constexpr std::size_t kSamplesPerFrame = 640;

/// A synchronized audio/visual pair: floor(audio.size() / samples_per_frame) == frames.
struct Utterance {
  std::string id;
  std::vector<float> audio;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> visual;  // frames x height x width, row-major
  std::optional<std::string> transcript;
  std::optional<std::vector<int>> latent_states;

  std::size_t frame_pixels() const { return height * width; }
};

struct Corpus {
  std::size_t samples_per_frame = kSamplesPerFrame;
  std::vector<Utterance> utterances;
};

/// Throws DataError when the frame-synchronization invariants do not hold.
void validate_utterance(const Utterance& u, std::size_t samples_per_frame);

struct SyntheticConfig {
  std::size_t n_states = 5;
  double mean_dwell = 4.0;
  double audio_noise = 1.0;
  double visual_noise = 1.0;
  std::size_t n_utterances = 200;
  std::size_t min_frames = 25;
  std::size_t max_frames = 60;
  std::size_t samples_per_frame = kSamplesPerFrame;
  std::size_t height = 8;
  std::size_t width = 8;
  // state k is written as vocabulary[k] in transcripts
  std::string vocabulary = "abcdefghijklmnopqrstuvwxyz";
  // Templates are a property of the synthetic "world", shared by every corpus
  // generated with the same template seed.
  std::uint64_t template_seed = 1234;
  // Per-frame Gaussian latent of shared_dims components added to both
  // streams through fixed patterns, scaled by shared_strength. It gives
  // frames of the same state a cross-modally shared identity; 0 disables it.
  std::size_t shared_dims = 2;
  double shared_strength = 0.0;

  void validate() const;
};

/// Per-state templates: audio (samples_per_frame) and visual (height*width),
/// each scaled to unit RMS.
struct StateTemplates {
  std::vector<std::vector<float>> audio;
  std::vector<std::vector<float>> visual;
  // shared_dims unit-RMS patterns per stream
  std::vector<std::vector<float>> audio_shared;
  std::vector<std::vector<float>> visual_shared;
};

StateTemplates make_templates(const SyntheticConfig& cfg);

/// Markov-chain corpus: each frame emits its state's templates plus
/// independent Gaussian noise. Transcripts are the run-length-collapsed
/// state characters.
Corpus generate_corpus(const SyntheticConfig& cfg, std::uint64_t seed);

std::string collapse_states(const std::vector<int>& states, const std::string& vocabulary);

/// Discards utterances shorter than min_frames; crops longer than max_frames
/// to a uniformly drawn window, dropping the transcript of cropped ones.
std::optional<Utterance> filter_and_crop(const Utterance& u, std::size_t min_frames,
                                         std::size_t max_frames, std::size_t samples_per_frame,
                                         Rng& rng);

struct Batch {
  std::vector<std::size_t> members;  // indices into the source utterance list
  std::size_t total_frames = 0;
};

/// Length-sorted bucketing into batches of at most budget_frames, returned in
/// shuffled order. Every utterance appears exactly once.
std::vector<Batch> make_batches(const std::vector<Utterance>& utterances, std::size_t budget_frames,
                                std::uint64_t seed);

void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus read_corpus(const std::filesystem::path& path);

}  // namespace avrl
