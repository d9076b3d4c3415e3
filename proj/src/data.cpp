#include "avrl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "avrl/errors.hpp"
#include "binio.hpp"

namespace avrl {

namespace {

constexpr char kCorpusMagic[8] = {'A', 'V', 'R', 'L', 'C', 'O', 'R', 'P'};
constexpr std::uint32_t kCorpusVersion = 1;

void scale_to_unit_rms(std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  const double rms = std::sqrt(s / static_cast<double>(v.size()));
  if (rms == 0.0) return;
  for (auto& x : v) x = static_cast<float>(x / rms);
}

using binio::put;
using binio::get;
using binio::put_string;
using binio::get_string;

void put_floats(std::ostream& os, const std::vector<float>& v) { binio::put_vector(os, v); }
std::vector<float> get_floats(std::istream& is) { return binio::get_vector<float>(is); }

}  // namespace

void validate_utterance(const Utterance& u, std::size_t samples_per_frame) {
  if (u.audio.size() / samples_per_frame != u.frames) {
    throw DataError("utterance " + u.id + ": audio length " + std::to_string(u.audio.size()) +
                    " is not synchronized with " + std::to_string(u.frames) + " frames");
  }
  if (u.visual.size() != u.frames * u.frame_pixels()) {
    throw DataError("utterance " + u.id + ": visual tensor size mismatch");
  }
  if (u.latent_states && u.latent_states->size() != u.frames) {
    throw DataError("utterance " + u.id + ": latent state count differs from frame count");
  }
}

void SyntheticConfig::validate() const {
  if (n_states < 2) throw ConfigError("synthetic: n_states must be >= 2");
  if (mean_dwell < 1.0) throw ConfigError("synthetic: mean_dwell must be >= 1");
  if (audio_noise < 0.0 || visual_noise < 0.0) throw ConfigError("synthetic: noise must be >= 0");
  if (shared_strength < 0.0) throw ConfigError("synthetic: shared_strength must be >= 0");
  if (min_frames < 1 || min_frames > max_frames) throw ConfigError("synthetic: bad frame range");
  if (samples_per_frame < 1 || height < 1 || width < 1) {
    throw ConfigError("synthetic: frame geometry must be positive");
  }
}

StateTemplates make_templates(const SyntheticConfig& cfg) {
  Rng rng(derive_seed(cfg.template_seed, {hash_string("templates")}));
  std::uniform_real_distribution<double> freq(1.0, 24.0), phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> nd(0.0, 1.0);
  StateTemplates t;
  const auto n = cfg.samples_per_frame;
  for (std::size_t k = 0; k < cfg.n_states; ++k) {
    std::vector<float> a(n);
    for (int comp = 0; comp < 3; ++comp) {
      const double f = freq(rng), ph = phase(rng), amp = 0.5 + std::abs(nd(rng));
      for (std::size_t s = 0; s < n; ++s) {
        a[s] += static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * f * s / n + ph));
      }
    }
    scale_to_unit_rms(a);
    t.audio.push_back(std::move(a));

    std::vector<float> v(cfg.height * cfg.width);
    for (auto& x : v) x = static_cast<float>(nd(rng));
    scale_to_unit_rms(v);
    t.visual.push_back(std::move(v));
  }
  // Own stream, so the state templates do not depend on shared_dims.
  Rng srng(derive_seed(cfg.template_seed, {hash_string("shared-patterns")}));
  for (std::size_t j = 0; j < cfg.shared_dims; ++j) {
    std::vector<float> a(n), v(cfg.height * cfg.width);
    for (auto& x : a) x = static_cast<float>(nd(srng));
    for (auto& x : v) x = static_cast<float>(nd(srng));
    scale_to_unit_rms(a);
    scale_to_unit_rms(v);
    t.audio_shared.push_back(std::move(a));
    t.visual_shared.push_back(std::move(v));
  }
  return t;
}

std::string collapse_states(const std::vector<int>& states, const std::string& vocabulary) {
  std::string out;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (i > 0 && states[i] == states[i - 1]) continue;
    out.push_back(vocabulary.at(static_cast<std::size_t>(states[i])));
  }
  return out;
}

Corpus generate_corpus(const SyntheticConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.n_states > cfg.vocabulary.size()) {
    throw ConfigError("synthetic: " + std::to_string(cfg.n_states) +
                      " states exceed vocabulary of " + std::to_string(cfg.vocabulary.size()));
  }
  const auto templates = make_templates(cfg);
  const auto spf = cfg.samples_per_frame;
  const double switch_prob = 1.0 / cfg.mean_dwell;

  Corpus corpus;
  corpus.samples_per_frame = spf;
  corpus.utterances.reserve(cfg.n_utterances);
  for (std::size_t n = 0; n < cfg.n_utterances; ++n) {
    Rng rng(derive_seed(seed, {hash_string("utterance"), n}));
    std::uniform_int_distribution<std::size_t> len(cfg.min_frames, cfg.max_frames);
    std::uniform_int_distribution<std::size_t> extra(0, spf - 1);
    std::uniform_int_distribution<int> any_state(0, static_cast<int>(cfg.n_states) - 1);
    std::uniform_int_distribution<int> other_state(0, static_cast<int>(cfg.n_states) - 2);
    std::bernoulli_distribution jump(switch_prob);
    std::normal_distribution<double> noise_a(0.0, cfg.audio_noise > 0 ? cfg.audio_noise : 1.0);
    std::normal_distribution<double> noise_v(0.0, cfg.visual_noise > 0 ? cfg.visual_noise : 1.0);

    Utterance u;
    char id[32];
    std::snprintf(id, sizeof id, "utt%05zu", n);
    u.id = id;
    u.frames = len(rng);
    u.height = cfg.height;
    u.width = cfg.width;

    std::vector<int> states(u.frames);
    states[0] = any_state(rng);
    for (std::size_t t = 1; t < u.frames; ++t) {
      if (jump(rng)) {
        int s = other_state(rng);
        states[t] = s >= states[t - 1] ? s + 1 : s;
      } else {
        states[t] = states[t - 1];
      }
    }

    // Drawn from a separate stream so enabling it leaves everything else as is.
    std::vector<double> shared(u.frames * cfg.shared_dims, 0.0);
    if (cfg.shared_strength > 0) {
      Rng zr(derive_seed(seed, {hash_string("shared"), n}));
      std::normal_distribution<double> z(0.0, cfg.shared_strength);
      for (auto& x : shared) x = z(zr);
    }
    auto shared_term = [&](const std::vector<std::vector<float>>& patterns, std::size_t t, std::size_t i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cfg.shared_dims; ++j) s += shared[t * cfg.shared_dims + j] * patterns[j][i];
      return s;
    };

    const std::size_t n_samples = u.frames * spf + extra(rng);
    u.audio.resize(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
      const auto frame = std::min(i / spf, u.frames - 1);
      double x = templates.audio[states[frame]][i % spf];
      if (cfg.shared_strength > 0) x += shared_term(templates.audio_shared, frame, i % spf);
      if (cfg.audio_noise > 0) x += noise_a(rng);
      u.audio[i] = static_cast<float>(x);
    }
    const auto px = u.frame_pixels();
    u.visual.resize(u.frames * px);
    for (std::size_t t = 0; t < u.frames; ++t) {
      for (std::size_t p = 0; p < px; ++p) {
        double x = templates.visual[states[t]][p];
        if (cfg.shared_strength > 0) x += shared_term(templates.visual_shared, t, p);
        if (cfg.visual_noise > 0) x += noise_v(rng);
        u.visual[t * px + p] = static_cast<float>(x);
      }
    }
    u.transcript = collapse_states(states, cfg.vocabulary);
    u.latent_states = std::move(states);
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

std::optional<Utterance> filter_and_crop(const Utterance& u, std::size_t min_frames,
                                         std::size_t max_frames, std::size_t samples_per_frame,
                                         Rng& rng) {
  if (min_frames > max_frames) throw ConfigError("filter_and_crop: min_frames > max_frames");
  if (u.frames < min_frames) return std::nullopt;
  if (u.frames <= max_frames) return u;

  std::uniform_int_distribution<std::size_t> start_dist(0, u.frames - max_frames);
  const auto start = start_dist(rng);
  Utterance out;
  out.id = u.id;
  out.frames = max_frames;
  out.height = u.height;
  out.width = u.width;
  const auto a0 = start * samples_per_frame;
  out.audio.assign(u.audio.begin() + static_cast<std::ptrdiff_t>(a0),
                   u.audio.begin() + static_cast<std::ptrdiff_t>(a0 + max_frames * samples_per_frame));
  const auto px = u.frame_pixels();
  out.visual.assign(u.visual.begin() + static_cast<std::ptrdiff_t>(start * px),
                    u.visual.begin() + static_cast<std::ptrdiff_t>((start + max_frames) * px));
  if (u.latent_states) {
    out.latent_states = std::vector<int>(u.latent_states->begin() + static_cast<std::ptrdiff_t>(start),
                                         u.latent_states->begin() +
                                             static_cast<std::ptrdiff_t>(start + max_frames));
  }
  return out;
}

std::vector<Batch> make_batches(const std::vector<Utterance>& utterances, std::size_t budget_frames,
                                std::uint64_t seed) {
  std::vector<std::size_t> order(utterances.size());
  std::iota(order.begin(), order.end(), 0);
  for (auto i : order) {
    if (utterances[i].frames > budget_frames) {
      throw DataError("utterance " + utterances[i].id + " has " +
                      std::to_string(utterances[i].frames) + " frames, over the batch budget of " +
                      std::to_string(budget_frames) + "; crop first");
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (utterances[a].frames != utterances[b].frames) return utterances[a].frames < utterances[b].frames;
    return utterances[a].id < utterances[b].id;
  });

  std::vector<Batch> batches;
  Batch cur;
  for (auto i : order) {
    const auto f = utterances[i].frames;
    if (!cur.members.empty() && cur.total_frames + f > budget_frames) {
      batches.push_back(std::move(cur));
      cur = Batch{};
    }
    cur.members.push_back(i);
    cur.total_frames += f;
  }
  if (!cur.members.empty()) batches.push_back(std::move(cur));

  Rng rng(derive_seed(seed, {hash_string("batch-order")}));
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open corpus for writing: " + path.string());
  os.write(kCorpusMagic, sizeof kCorpusMagic);
  put<std::uint32_t>(os, kCorpusVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(corpus.samples_per_frame));
  put<std::uint64_t>(os, corpus.utterances.size());
  for (const auto& u : corpus.utterances) {
    validate_utterance(u, corpus.samples_per_frame);
    put_string(os, u.id);
    put_floats(os, u.audio);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(u.frames));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(u.height));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(u.width));
    put_floats(os, u.visual);
    put<std::uint8_t>(os, u.transcript ? 1 : 0);
    if (u.transcript) put_string(os, *u.transcript);
    put<std::uint8_t>(os, u.latent_states ? 1 : 0);
    if (u.latent_states) {
      for (int s : *u.latent_states) put<std::int32_t>(os, s);
    }
  }
  if (!os) throw DataError("failed writing corpus: " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open corpus: " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCorpusMagic, sizeof magic) != 0) {
    throw DataError("not a corpus file: " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCorpusVersion) {
    throw DataError("unsupported corpus version " + std::to_string(version));
  }
  Corpus corpus;
  corpus.samples_per_frame = get<std::uint32_t>(is);
  if (corpus.samples_per_frame == 0) throw DataError("corpus has zero samples per frame");
  const auto count = get<std::uint64_t>(is);
  corpus.utterances.reserve(count);
  for (std::uint64_t n = 0; n < count; ++n) {
    Utterance u;
    u.id = get_string(is);
    u.audio = get_floats(is);
    u.frames = get<std::uint32_t>(is);
    u.height = get<std::uint32_t>(is);
    u.width = get<std::uint32_t>(is);
    u.visual = get_floats(is);
    if (get<std::uint8_t>(is)) u.transcript = get_string(is);
    if (get<std::uint8_t>(is)) {
      std::vector<int> s(u.frames);
      for (auto& x : s) x = get<std::int32_t>(is);
      u.latent_states = std::move(s);
    }
    validate_utterance(u, corpus.samples_per_frame);
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace avrl
