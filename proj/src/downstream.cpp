#include "avrl/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "avrl/errors.hpp"
#include "avrl/ops.hpp"

namespace avrl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

Var zeros_like_frames(std::size_t T, std::size_t D) { return Var::constant(Tensor::matrix(T, D)); }

// Mean over frames as a 1 x D row.
Var time_mean(const Var& x) {
  return ops::matmul(Var::constant(Tensor::matrix(1, x.rows(), 1.0 / static_cast<double>(x.rows()))), x);
}

EmbeddingSequence maybe_span_mask(const AvModel& model, EmbeddingSequence seq, const FeatureAugment& aug,
                                  Rng* rng) {
  if (!rng || aug.mask_prob <= 0.0) return seq;
  auto plan = sample_spans(seq.length(), aug.mask_prob, aug.mask_span, *rng);
  if (seq.modality == Modality::visual) plan = expand_visual_mask(plan, receptive_field(model.config.visual));
  return apply_mask(seq, plan, model.mask_embedding(seq.modality));
}

EmbeddingSequence encode_audio_of(const AvModel& model, const Utterance& u) {
  auto a = encode_audio(u.audio, model.config.audio, model.params);
  if (a.length() != u.frames) throw DataError("utterance " + u.id + ": audio encoder length mismatch");
  return a;
}

EmbeddingSequence encode_visual_of(const AvModel& model, const Utterance& u) {
  return encode_visual(u.visual, u.frames, u.height, u.width, model.config.visual, model.params);
}

EmbeddingSequence augment_visual(const AvModel& model, EmbeddingSequence v, const FeatureAugment& aug, Rng* rng) {
  if (!aug.visual) return v;
  v = maybe_span_mask(model, std::move(v), aug, rng);
  if (rng && aug.visual_window > 0) v = temporal_mask_aug(v, aug.visual_window, *rng);
  return v;
}

EmbeddingSequence fuse_with(const AvModel& model, const EmbeddingSequence& a, const EmbeddingSequence& v,
                            Rng* rng) {
  return fuse(a, v, model.config.fusion, model.params, ForwardContext{rng});
}

double ctc_forward(const Tensor& lp, const std::vector<int>& ext, std::vector<double>& alpha) {
  const auto T = lp.rows(), S = ext.size();
  alpha.assign(T * S, kNegInf);
  alpha[0] = lp.at(0, static_cast<std::size_t>(ext[0]));
  if (S > 1) alpha[1] = lp.at(0, static_cast<std::size_t>(ext[1]));
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = alpha[(t - 1) * S + s];
      if (s >= 1) acc = log_add(acc, alpha[(t - 1) * S + s - 1]);
      if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]) acc = log_add(acc, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = acc == kNegInf ? kNegInf : acc + lp.at(t, static_cast<std::size_t>(ext[s]));
    }
  }
  double total = alpha[(T - 1) * S + S - 1];
  if (S > 1) total = log_add(total, alpha[(T - 1) * S + S - 2]);
  return total;
}

std::vector<std::size_t> argmax_rows(const Tensor& x) {
  std::vector<std::size_t> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace

Vocabulary::Vocabulary(std::string symbols) : symbols_(std::move(symbols)) {
  if (symbols_.empty()) throw ConfigError("vocabulary is empty");
  std::set<char> seen(symbols_.begin(), symbols_.end());
  if (seen.size() != symbols_.size()) throw ConfigError("vocabulary symbols must be unique");
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char ch : text) {
    const auto pos = symbols_.find(ch);
    if (pos == std::string::npos) throw DataError(std::string("symbol '") + ch + "' is not in the vocabulary");
    out.push_back(static_cast<int>(pos) + 1);
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id <= 0) continue;
    if (static_cast<std::size_t>(id) >= size()) throw std::out_of_range("vocabulary index out of range");
    out.push_back(symbols_[static_cast<std::size_t>(id) - 1]);
  }
  return out;
}

Var ctc_loss(const Var& log_probs, const std::vector<int>& target) {
  const auto& lp = log_probs.value();
  const auto T = lp.rows(), V = lp.cols();
  if (T == 0) throw std::invalid_argument("ctc_loss: no frames");
  for (int l : target) {
    if (l <= 0 || static_cast<std::size_t>(l) >= V) throw std::invalid_argument("ctc_loss: label out of range");
  }
  // Blank-interleaved target: blank, l1, blank, l2, ..., blank.
  std::vector<int> ext(2 * target.size() + 1, 0);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];

  std::vector<double> alpha;
  const double total = ctc_forward(lp, ext, alpha);
  if (total == kNegInf) {
    throw NumericError("ctc_loss: target of length " + std::to_string(target.size()) + " is infeasible in " +
                       std::to_string(T) + " frames");
  }

  return make_result(
      Tensor::scalar(-total), {log_probs},
      [ext = std::move(ext), alpha = std::move(alpha), total, T](Node& self) {
        auto& pg = self.parents[0]->grad_buffer();
        const auto& lp = self.parents[0]->value;
        const auto S = ext.size();
        // Adjoint of the recursion, swept backwards in time.
        std::vector<double> adj(T * S, 0.0);
        const double g = self.grad[0];
        adj[(T - 1) * S + S - 1] = -g * std::exp(alpha[(T - 1) * S + S - 1] - total);
        if (S > 1) adj[(T - 1) * S + S - 2] = -g * std::exp(alpha[(T - 1) * S + S - 2] - total);
        for (std::size_t t = T; t-- > 0;) {
          for (std::size_t s = 0; s < S; ++s) {
            const double a = adj[t * S + s];
            const double here = alpha[t * S + s];
            if (a == 0.0 || here == kNegInf) continue;
            const auto sym = static_cast<std::size_t>(ext[s]);
            pg.at(t, sym) += a;
            if (t == 0) continue;
            // here = lse(predecessors) + lp[t, sym]
            const double z = here - lp.at(t, sym);
            auto push = [&](std::size_t p) {
              const double prev = alpha[(t - 1) * S + p];
              if (prev != kNegInf) adj[(t - 1) * S + p] += a * std::exp(prev - z);
            };
            push(s);
            if (s >= 1) push(s - 1);
            if (s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]) push(s - 2);
          }
        }
      },
      "ctc_loss");
}

std::vector<int> best_path_decode(const Tensor& log_probs) {
  std::vector<int> out;
  int prev = -1;
  for (auto a : argmax_rows(log_probs)) {
    const int sym = static_cast<int>(a);
    if (sym != prev && sym != 0) out.push_back(sym);
    prev = sym;
  }
  return out;
}

std::size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

ErrorRate error_rate(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  ErrorRate r;
  r.distance = edit_distance(ref, hyp);
  r.ref_length = ref.size();
  if (ref.empty()) {
    r.empty_reference = true;
    r.rate = static_cast<double>(hyp.size());
  } else {
    r.rate = static_cast<double>(r.distance) / static_cast<double>(ref.size());
  }
  return r;
}

std::vector<std::string> char_tokens(const std::string& s) {
  std::vector<std::string> out;
  for (char c : s) out.emplace_back(1, c);
  return out;
}

std::vector<std::string> word_tokens(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

ErrorRate cer(const std::string& ref, const std::string& hyp) { return error_rate(char_tokens(ref), char_tokens(hyp)); }
ErrorRate wer(const std::string& ref, const std::string& hyp) { return error_rate(word_tokens(ref), word_tokens(hyp)); }

EmbeddingSequence fused_frames(const AvModel& model, const Utterance& u, const Exclusion& exclusion,
                               const FeatureAugment& aug, Rng* rng) {
  const auto T = u.frames;
  const auto D = model.config.dim();
  const auto excluded = exclusion.modality;

  EmbeddingSequence a, v;
  if (excluded == ExcludedModality::audio) {
    switch (exclusion.strategy) {
      case ExclusionStrategy::input_zero: {
        Utterance z = u;
        std::fill(z.audio.begin(), z.audio.end(), 0.0f);
        a = encode_audio_of(model, z);
        break;
      }
      case ExclusionStrategy::embedding_zero: a = {zeros_like_frames(T, D), Modality::audio}; break;
      case ExclusionStrategy::embedding_mask:
        a = apply_mask(encode_audio_of(model, u), MaskPlan::full(T), model.mask_embedding(Modality::audio));
        break;
    }
  } else {
    a = encode_audio_of(model, u);
    if (aug.audio) a = maybe_span_mask(model, std::move(a), aug, rng);
  }

  if (excluded == ExcludedModality::visual) {
    switch (exclusion.strategy) {
      case ExclusionStrategy::input_zero: {
        Utterance z = u;
        std::fill(z.visual.begin(), z.visual.end(), 0.0f);
        v = encode_visual_of(model, z);
        break;
      }
      case ExclusionStrategy::embedding_zero: v = {zeros_like_frames(T, D), Modality::visual}; break;
      case ExclusionStrategy::embedding_mask:
        v = apply_mask(encode_visual_of(model, u), MaskPlan::full(T), model.mask_embedding(Modality::visual));
        break;
    }
  } else {
    v = augment_visual(model, encode_visual_of(model, u), aug, rng);
  }
  return fuse_with(model, a, v, rng);
}

EmbeddingSequence asr_frames(const AvModel& model, const Utterance& u, const FeatureAugment& aug, Rng* rng) {
  auto a = encode_audio_of(model, u);
  if (aug.audio) a = maybe_span_mask(model, std::move(a), aug, rng);
  EmbeddingSequence v{model.mask_rows(Modality::visual, u.frames), Modality::visual};
  return fuse_with(model, a, v, rng);
}

EmbeddingSequence vsr_frames(const AvModel& model, const Utterance& u, const FeatureAugment& aug, Rng* rng) {
  EmbeddingSequence a{model.mask_rows(Modality::audio, u.frames), Modality::audio};
  auto v = augment_visual(model, encode_visual_of(model, u), aug, rng);
  return fuse_with(model, a, v, rng);
}

EmbeddingSequence temporal_mask_aug(const EmbeddingSequence& seq, std::size_t length, Rng& rng) {
  const auto T = seq.length();
  if (length == 0) return seq;
  if (length > T) {
    std::cerr << "warning: temporal mask of " << length << " frames covers the whole " << T << "-frame sequence\n";
    length = T;
  }
  std::uniform_int_distribution<std::size_t> d(0, T - length);
  const auto start = d(rng);
  std::vector<bool> flags(T, false);
  for (std::size_t t = start; t < start + length; ++t) flags[t] = true;
  return {ops::replace_rows(seq.frames, flags, Var::constant(Tensor({seq.dim()}, 0.0))), seq.modality};
}

double sample_beta(double a, double b, Rng& rng) {
  if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("sample_beta: parameters must be positive");
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  for (;;) {
    const double x = ga(rng), y = gb(rng);
    if (x + y > 0.0) return x / (x + y);
  }
}

Utterance mixup(const Utterance& first, const Utterance& second, double lambda) {
  if (first.audio.size() != second.audio.size() || first.visual.size() != second.visual.size() ||
      first.frames != second.frames) {
    throw std::invalid_argument("mixup: utterances differ in shape");
  }
  Utterance out;
  out.id = first.id + "+" + second.id;
  out.frames = first.frames;
  out.height = first.height;
  out.width = first.width;
  out.audio.resize(first.audio.size());
  out.visual.resize(first.visual.size());
  const double mu = 1.0 - lambda;
  for (std::size_t i = 0; i < out.audio.size(); ++i) {
    out.audio[i] = static_cast<float>(lambda * first.audio[i] + mu * second.audio[i]);
  }
  for (std::size_t i = 0; i < out.visual.size(); ++i) {
    out.visual[i] = static_cast<float>(lambda * first.visual[i] + mu * second.visual[i]);
  }
  return out;
}

std::vector<double> mix_targets(const std::vector<double>& first, const std::vector<double>& second, double lambda) {
  if (first.size() != second.size()) throw std::invalid_argument("mix_targets: size mismatch");
  std::vector<double> out(first.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * first[i] + (1.0 - lambda) * second[i];
  return out;
}

ProbeResult linear_probe(const Tensor& features, const std::vector<int>& labels,
                         const std::vector<std::size_t>& groups, const ProbeConfig& cfg) {
  const auto N = features.rows(), D = features.cols();
  if (labels.size() != N || groups.size() != N) throw std::invalid_argument("linear_probe: row count mismatch");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw DataError("linear_probe: labels contain a single class");
  const auto K = classes.size();
  std::vector<std::size_t> y(N);
  for (std::size_t i = 0; i < N; ++i) {
    y[i] = static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin());
  }

  // Held-out split by group.
  std::vector<std::size_t> ids(groups.begin(), groups.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(derive_seed(cfg.seed, {hash_string("probe-split")}));
  std::vector<bool> test(N, false);
  if (ids.size() >= 2) {
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_test = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(cfg.held_out * static_cast<double>(ids.size()))), 1, ids.size() - 1);
    std::set<std::size_t> held(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
    for (std::size_t i = 0; i < N; ++i) test[i] = held.count(groups[i]) > 0;
  } else {
    std::vector<std::size_t> rows(N);
    std::iota(rows.begin(), rows.end(), 0);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::ceil(cfg.held_out * static_cast<double>(N)));
    for (std::size_t i = 0; i < n_test && i < N; ++i) test[rows[i]] = true;
  }

  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t i = 0; i < N; ++i) (test[i] ? test_rows : train_rows).push_back(i);
  if (train_rows.empty() || test_rows.empty()) throw DataError("linear_probe: not enough rows to split");

  std::vector<double> mean(D, 0.0), inv_std(D, 0.0);
  for (auto i : train_rows) {
    for (std::size_t d = 0; d < D; ++d) mean[d] += features.at(i, d);
  }
  for (auto& m : mean) m /= static_cast<double>(train_rows.size());
  for (auto i : train_rows) {
    for (std::size_t d = 0; d < D; ++d) inv_std[d] += (features.at(i, d) - mean[d]) * (features.at(i, d) - mean[d]);
  }
  for (auto& s : inv_std) s = 1.0 / std::max(std::sqrt(s / static_cast<double>(train_rows.size())), 1e-8);
  Tensor x = Tensor::matrix(N, D);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t d = 0; d < D; ++d) x.at(i, d) = (features.at(i, d) - mean[d]) * inv_std[d];
  }

  // Full-batch Adam on the mean cross-entropy.
  std::vector<double> W(D * K, 0.0), b(K, 0.0), gW(D * K), gb(K);
  std::vector<double> mW(D * K, 0.0), vW(D * K, 0.0), mb(K, 0.0), vb(K, 0.0);
  std::vector<double> logits(K);
  auto forward = [&](std::size_t i) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = b[k];
      for (std::size_t d = 0; d < D; ++d) s += x.at(i, d) * W[d * K + k];
      logits[k] = s;
    }
  };
  const double inv_n = 1.0 / static_cast<double>(train_rows.size());
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (auto i : train_rows) {
      forward(i);
      const auto p = softmax_stable(logits);
      for (std::size_t k = 0; k < K; ++k) {
        const double e = (p[k] - (k == y[i] ? 1.0 : 0.0)) * inv_n;
        gb[k] += e;
        for (std::size_t d = 0; d < D; ++d) gW[d * K + k] += e * x.at(i, d);
      }
    }
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(it));
    auto update = [&](std::vector<double>& w, std::vector<double>& g, std::vector<double>& m, std::vector<double>& v,
                      double l2) {
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] + l2 * w[j];
        m[j] = 0.9 * m[j] + 0.1 * gj;
        v[j] = 0.999 * v[j] + 0.001 * gj * gj;
        w[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + 1e-8);
      }
    };
    update(W, gW, mW, vW, cfg.l2);
    update(b, gb, mb, vb, 0.0);
  }

  auto accuracy = [&](const std::vector<std::size_t>& rows) {
    std::size_t hit = 0;
    for (auto i : rows) {
      forward(i);
      if (static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()) == y[i]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(rows.size());
  };
  ProbeResult r;
  r.n_classes = K;
  r.n_train = train_rows.size();
  r.n_test = test_rows.size();
  r.train_accuracy = accuracy(train_rows);
  r.accuracy = accuracy(test_rows);
  return r;
}

ProbeData fused_probe_data(const AvModel& model, const std::vector<Utterance>& corpus) {
  ProbeData out;
  std::vector<double> rows;
  const auto D = model.config.dim();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& u = corpus[i];
    if (!u.latent_states) throw DataError("probe: utterance " + u.id + " has no latent states");
    const auto c = fused_frames(model, u, {});
    const auto& v = c.frames.value();
    rows.insert(rows.end(), v.storage().begin(), v.storage().end());
    for (std::size_t t = 0; t < u.frames; ++t) {
      out.labels.push_back((*u.latent_states)[t]);
      out.groups.push_back(i);
    }
  }
  out.features = Tensor({out.labels.size(), D}, std::move(rows));
  return out;
}

const char* task_name(FinetuneTask t) {
  switch (t) {
    case FinetuneTask::asr: return "asr";
    case FinetuneTask::vsr: return "vsr";
    case FinetuneTask::avsr: return "avsr";
    case FinetuneTask::wordclass: return "wordclass";
  }
  return "?";
}

std::size_t FinetuneConfig::steps() const {
  const auto total = train.schedule.total_steps;
  if (task != FinetuneTask::vsr) return total;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(vsr_step_ratio * static_cast<double>(total))));
}

void FinetuneConfig::validate() const {
  train.validate();
  if (!(vsr_step_ratio > 0.0 && vsr_step_ratio <= 1.0)) throw ConfigError("finetune: vsr_step_ratio must be in (0, 1]");
  if (augment.mask_prob < 0.0 || augment.mask_prob > 1.0) throw ConfigError("finetune: mask_prob must be in [0, 1]");
  if (augment.mask_span == 0) throw ConfigError("finetune: mask_span must be >= 1");
  if (task == FinetuneTask::wordclass) {
    if (n_classes < 2) throw ConfigError("finetune: word classification needs at least 2 classes");
    if (clip_frames == 0) throw ConfigError("finetune: clip_frames must be positive");
    if (mixup_alpha < 0.0) throw ConfigError("finetune: mixup_alpha must be >= 0");
  } else {
    Vocabulary check(vocabulary);
  }
}

ExcludedModality task_exclusion(FinetuneTask task) {
  switch (task) {
    case FinetuneTask::asr: return ExcludedModality::visual;
    case FinetuneTask::vsr: return ExcludedModality::audio;
    default: return ExcludedModality::none;
  }
}

void check_task_init(FinetuneTask task, ExcludedModality pretrained_without) {
  if (task == FinetuneTask::vsr && pretrained_without == ExcludedModality::visual) {
    throw ConfigError("finetune: VSR needs a visual encoder, but the checkpoint was pre-trained audio-only");
  }
  if (task == FinetuneTask::asr && pretrained_without == ExcludedModality::audio) {
    throw ConfigError("finetune: ASR needs an audio encoder, but the checkpoint was pre-trained visual-only");
  }
}

void init_head(const FinetuneConfig& cfg, std::size_t dim, ParameterSet& params, Rng& rng) {
  if (cfg.task == FinetuneTask::wordclass) {
    if (cfg.backend == WordBackend::temporal_conv) {
      params.add("head.tconv.weight", init_weight(3 * dim, dim, rng));
      params.add("head.tconv.bias", Tensor({dim}, 0.0));
    }
    params.add("head.word.weight", init_weight(dim, cfg.n_classes, rng));
    params.add("head.word.bias", Tensor({cfg.n_classes}, 0.0));
  } else {
    const Vocabulary vocab(cfg.vocabulary);
    params.add("head.ctc.weight", init_weight(dim, vocab.size(), rng));
    params.add("head.ctc.bias", Tensor({vocab.size()}, 0.0));
  }
}

int majority_state(const std::vector<int>& states) {
  if (states.empty()) throw DataError("majority_state: no frames");
  std::map<int, std::size_t> counts;
  for (int s : states) ++counts[s];
  return std::max_element(counts.begin(), counts.end(),
                          [](const auto& a, const auto& b) { return a.second < b.second; })
      ->first;
}

std::optional<Utterance> center_clip(const Utterance& u, std::size_t frames, std::size_t samples_per_frame) {
  if (frames == 0 || u.frames < frames) return std::nullopt;
  const auto start = (u.frames - frames) / 2;
  const auto px = u.frame_pixels();
  Utterance out;
  out.id = u.id;
  out.frames = frames;
  out.height = u.height;
  out.width = u.width;
  const auto a0 = u.audio.begin() + static_cast<std::ptrdiff_t>(start * samples_per_frame);
  out.audio.assign(a0, a0 + static_cast<std::ptrdiff_t>(frames * samples_per_frame));
  const auto v0 = u.visual.begin() + static_cast<std::ptrdiff_t>(start * px);
  out.visual.assign(v0, v0 + static_cast<std::ptrdiff_t>(frames * px));
  if (u.latent_states) {
    const auto s0 = u.latent_states->begin() + static_cast<std::ptrdiff_t>(start);
    out.latent_states = std::vector<int>(s0, s0 + static_cast<std::ptrdiff_t>(frames));
  }
  return out;
}

namespace {

// Fused frames for a CTC task, per the configured exclusion strategy.
EmbeddingSequence task_frames(const AvModel& model, const FinetuneConfig& cfg, const Utterance& u, Rng* rng) {
  const auto aug = rng ? cfg.augment : FeatureAugment{};
  const auto excluded = task_exclusion(cfg.task);
  if (excluded == ExcludedModality::visual && cfg.strategy == ExclusionStrategy::embedding_mask) {
    return asr_frames(model, u, aug, rng);
  }
  if (excluded == ExcludedModality::audio && cfg.strategy == ExclusionStrategy::embedding_mask) {
    return vsr_frames(model, u, aug, rng);
  }
  return fused_frames(model, u, {excluded, cfg.strategy}, aug, rng);
}

Var ctc_log_probs(const AvModel& model, const EmbeddingSequence& c) {
  return ops::log_softmax_rows(
      ops::linear(c.frames, model.params.get("head.ctc.weight"), model.params.get("head.ctc.bias")));
}

Var word_logits(const AvModel& model, const FinetuneConfig& cfg, const Utterance& clip, Rng* rng) {
  FeatureAugment aug;
  if (rng) aug.visual_window = cfg.temporal_mask;
  Var c = fused_frames(model, clip, {}, aug, rng).frames;
  if (cfg.backend == WordBackend::temporal_conv) {
    const auto T = static_cast<std::int64_t>(c.rows());
    std::vector<std::int64_t> index;
    for (std::int64_t t = 0; t < T; ++t) {
      for (std::int64_t j = -1; j <= 1; ++j) index.push_back(t + j >= 0 && t + j < T ? t + j : -1);
    }
    c = ops::gelu(ops::linear(ops::gather_rows(c, std::move(index), 3), model.params.get("head.tconv.weight"),
                              model.params.get("head.tconv.bias")));
  }
  return ops::linear(time_mean(c), model.params.get("head.word.weight"), model.params.get("head.word.bias"));
}

std::vector<double> one_hot(int label, std::size_t n) {
  if (label < 0 || static_cast<std::size_t>(label) >= n) throw DataError("word label outside the class range");
  std::vector<double> v(n, 0.0);
  v[static_cast<std::size_t>(label)] = 1.0;
  return v;
}

const char* strategy_label(const FinetuneConfig& cfg) {
  if (task_exclusion(cfg.task) == ExcludedModality::none) return "none";
  switch (cfg.strategy) {
    case ExclusionStrategy::input_zero: return "input_zero";
    case ExclusionStrategy::embedding_zero: return "embedding_zero";
    case ExclusionStrategy::embedding_mask: return "embedding_mask";
  }
  return "?";
}

}  // namespace

EvalReport evaluate(const AvModel& model, const FinetuneConfig& cfg, const std::vector<Utterance>& corpus) {
  EvalReport r;
  r.task = task_name(cfg.task);
  r.strategy = strategy_label(cfg);
  if (corpus.empty()) return r;
  const auto spf = model.config.samples_per_frame;
  if (cfg.task == FinetuneTask::wordclass) {
    std::size_t hit = 0, n = 0;
    double loss = 0.0;
    for (const auto& u : corpus) {
      if (!u.latent_states) throw DataError("wordclass: utterance " + u.id + " has no latent states");
      auto clip = center_clip(u, cfg.clip_frames, spf);
      if (!clip) continue;
      const int label = majority_state(*clip->latent_states);
      const auto logits = word_logits(model, cfg, *clip, nullptr).value();
      const auto p = softmax_stable(logits.values());
      const auto pred = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      hit += pred == label;
      loss -= std::log(std::max(p[static_cast<std::size_t>(label)], 1e-300));
      ++n;
      r.rows.push_back({u.id, std::to_string(label), std::to_string(pred), 0.0, 0.0});
    }
    if (n == 0) throw DataError("wordclass: no utterance has " + std::to_string(cfg.clip_frames) + " frames");
    r.accuracy = static_cast<double>(hit) / static_cast<double>(n);
    r.loss = loss / static_cast<double>(n);
    return r;
  }

  const Vocabulary vocab(cfg.vocabulary);
  std::size_t cdist = 0, clen = 0, wdist = 0, wlen = 0;
  double loss = 0.0;
  for (const auto& u : corpus) {
    if (!u.transcript) throw DataError("utterance " + u.id + " has no transcript");
    const auto c = task_frames(model, cfg, u, nullptr);
    const auto lp = ctc_log_probs(model, c);
    loss += ctc_loss(lp, vocab.encode(*u.transcript)).value()[0];
    const auto hyp = vocab.decode(best_path_decode(lp.value()));
    const auto ce = avrl::cer(*u.transcript, hyp);
    const auto we = avrl::wer(*u.transcript, hyp);
    cdist += ce.distance;
    clen += ce.ref_length;
    wdist += we.distance;
    wlen += we.ref_length;
    r.rows.push_back({u.id, *u.transcript, hyp, ce.rate, we.rate});
  }
  r.cer = clen ? static_cast<double>(cdist) / static_cast<double>(clen) : 0.0;
  r.wer = wlen ? static_cast<double>(wdist) / static_cast<double>(wlen) : 0.0;
  r.loss = loss / static_cast<double>(corpus.size());
  return r;
}

FinetuneResult finetune(AvModel& model, const FinetuneConfig& cfg_in, const std::vector<Utterance>& train,
                        const std::vector<Utterance>& val, std::uint64_t seed) {
  cfg_in.validate();
  FinetuneConfig cfg = cfg_in;
  const auto steps = cfg.steps();
  cfg.train.schedule.total_steps = steps;
  const bool word = cfg.task == FinetuneTask::wordclass;
  if (word) cfg.train.min_frames = cfg.train.max_frames = cfg.clip_frames;

  const std::string head = word ? "head.word.weight" : "head.ctc.weight";
  if (!model.params.contains(head)) {
    Rng rng(derive_seed(seed, {hash_string("init.head")}));
    init_head(cfg, model.config.dim(), model.params, rng);
  }

  const auto spf = model.config.samples_per_frame;
  const Vocabulary vocab(word ? std::string("a") : cfg.vocabulary);

  GroupGradFn grad = [&](const std::vector<std::vector<Utterance>>& group, std::uint64_t step_seed) {
    std::size_t n = 0;
    for (const auto& mb : group) n += mb.size();
    const double w = 1.0 / static_cast<double>(n);
    double total = 0.0;
    std::size_t pos = 0;
    // Per-utterance backward passes keep the reduction order split-invariant.
    for (const auto& mb : group) {
      for (std::size_t i = 0; i < mb.size(); ++i, ++pos) {
        const auto& u = mb[i];
        Rng rng(utterance_seed(step_seed, pos, u.id));
        Var loss;
        if (word) {
          if (!u.latent_states) throw DataError("wordclass: utterance " + u.id + " has no latent states");
          auto target = one_hot(majority_state(*u.latent_states), cfg.n_classes);
          Utterance input = u;
          if (cfg.mixup_alpha > 0.0 && n > 1) {
            // Partner drawn from the whole group; mixing needs equal clip shapes.
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            std::size_t j = pick(rng), k = 0;
            const Utterance* partner = nullptr;
            for (const auto& other : group) {
              if (j < k + other.size()) {
                partner = &other[j - k];
                break;
              }
              k += other.size();
            }
            const double lambda = sample_beta(cfg.mixup_alpha, cfg.mixup_alpha, rng);
            input = mixup(u, *partner, lambda);
            target = mix_targets(target, one_hot(majority_state(*partner->latent_states), cfg.n_classes), lambda);
          }
          Var lp = ops::log_softmax_rows(word_logits(model, cfg, input, &rng));
          Var t = Var::constant(Tensor({1, cfg.n_classes}, target));
          loss = ops::scale(ops::sum(ops::mul(lp, t)), -1.0);
        } else {
          if (!u.transcript) throw DataError("utterance " + u.id + " has no transcript");
          loss = ctc_loss(ctc_log_probs(model, task_frames(model, cfg, u, &rng)), vocab.encode(*u.transcript));
        }
        total += loss.value()[0];
        backward(ops::scale(loss, w));
      }
    }
    StepValues out;
    out.loss_total = total * w;
    return out;
  };

  // Cropping drops transcripts, so CTC tasks keep whole utterances.
  if (!word) {
    std::size_t longest = 0;
    for (const auto& u : train) longest = std::max(longest, u.frames);
    cfg.train.max_frames = std::max(cfg.train.max_frames, longest);
    cfg.train.budget_frames = std::max(cfg.train.budget_frames, longest);
  }
  EpochBatcher batcher(train, cfg.train, spf, seed);
  Trainer trainer(model.params, cfg.train, std::move(batcher), grad, seed);

  FinetuneResult result;
  trainer.set_sink([&](const MetricsRecord& r) { result.metrics.push_back(r); });

  auto score = [&](const EvalReport& r) { return word ? -r.accuracy.value_or(0.0) : r.cer.value_or(1e9); };
  auto record_val = [&](const EvalReport& r) {
    MetricsRecord m;
    m.step = trainer.step_count();
    m.lr = lr_at(m.step, cfg.train.schedule);
    m.values.loss_total = r.loss.value_or(0.0);
    m.split = "val";
    result.metrics.push_back(m);
  };

  EvalReport best = evaluate(model, cfg, val);
  record_val(best);
  auto best_params = snapshot(model.params);
  const auto every = cfg.train.validate_every ? cfg.train.validate_every : steps;
  while (trainer.step_count() < steps) {
    if (!trainer.step()) break;
    if (trainer.step_count() % every == 0 || trainer.step_count() == steps) {
      auto r = evaluate(model, cfg, val);
      record_val(r);
      if (score(r) < score(best)) {
        best = std::move(r);
        best_params = snapshot(model.params);
        result.best_step = trainer.step_count();
      }
    }
  }
  result.steps = trainer.step_count();
  restore_params(model.params, best_params);
  result.report = std::move(best);
  return result;
}

std::string report_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["strategy"] = r.strategy;
  j["cer"] = opt(r.cer);
  j["wer"] = opt(r.wer);
  j["accuracy"] = opt(r.accuracy);
  j["loss"] = opt(r.loss);
  j["n"] = r.rows.size();
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"id", row.id}, {"ref", row.ref}, {"hyp", row.hyp}, {"cer", row.cer}, {"wer", row.wer}});
  }
  j["utterances"] = rows;
  return j.dump(2);
}

}  // namespace avrl
