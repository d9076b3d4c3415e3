#include "avrl/config.hpp"

#include <fstream>
#include <set>
#include <utility>

#include "avrl/errors.hpp"

namespace avrl {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

template <typename E>
using EnumTable = std::initializer_list<std::pair<E, const char*>>;

const EnumTable<ScheduleKind> kScheduleKinds = {{ScheduleKind::constant, "constant"},
                                                {ScheduleKind::warmup_hold_decay, "warmup_hold_decay"}};
const EnumTable<PositionalEncoding> kPositional = {{PositionalEncoding::conv, "conv"},
                                                   {PositionalEncoding::sinusoidal, "sinusoidal"},
                                                   {PositionalEncoding::none, "none"}};
const EnumTable<LossDirections> kDirections = {
    {LossDirections::audio, "a"}, {LossDirections::visual, "v"}, {LossDirections::both, "both"}};
const EnumTable<ExcludedModality> kExcluded = {
    {ExcludedModality::none, "none"}, {ExcludedModality::audio, "audio"}, {ExcludedModality::visual, "visual"}};
const EnumTable<ExclusionStrategy> kStrategies = {{ExclusionStrategy::input_zero, "input_zero"},
                                                  {ExclusionStrategy::embedding_zero, "embedding_zero"},
                                                  {ExclusionStrategy::embedding_mask, "embedding_mask"}};
const EnumTable<FinetuneTask> kTasks = {{FinetuneTask::asr, "asr"},
                                        {FinetuneTask::vsr, "vsr"},
                                        {FinetuneTask::avsr, "avsr"},
                                        {FinetuneTask::wordclass, "wordclass"}};
const EnumTable<WordBackend> kBackends = {{WordBackend::mean_pool, "mean_pool"},
                                          {WordBackend::temporal_conv, "temporal_conv"}};

template <typename E>
const char* enum_name(E v, EnumTable<E> table) {
  for (const auto& [e, name] : table) {
    if (e == v) return name;
  }
  return "?";
}

template <typename E>
E enum_value(const std::string& s, EnumTable<E> table, const std::string& where) {
  std::string allowed;
  for (const auto& [e, name] : table) {
    if (s == name) return e;
    allowed += allowed.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(where + ": unknown value \"" + s + "\" (expected one of " + allowed + ")");
}

// Each config struct lists its fields once, in visit(); a Reader pulls them
// out of JSON and a Writer emits them.

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(j_.at(key), path(key), out);
  }

  template <typename E>
  void enumeration(const char* key, E& out, EnumTable<E> table) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(path(key) + ": expected a string");
    out = enum_value(v.get<std::string>(), table, path(key));
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown config key: " + path(item.key().c_str()));
    }
  }

 private:
  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  template <typename T>
  static void read(const json& v, const std::string& where, T& out);

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <typename T>
  void operator()(const char* key, const T& v) {
    out[key] = write(v);
  }

  template <typename E>
  void enumeration(const char* key, const E& v, EnumTable<E> table) {
    out[key] = enum_name(v, table);
  }

  template <typename T>
  static ojson write(const T& v);

  ojson out = ojson::object();
};

template <typename V>
void visit(V& v, SyntheticConfig& c) {
  v("n_states", c.n_states);
  v("mean_dwell", c.mean_dwell);
  v("audio_noise", c.audio_noise);
  v("visual_noise", c.visual_noise);
  v("n_utterances", c.n_utterances);
  v("min_frames", c.min_frames);
  v("max_frames", c.max_frames);
  v("samples_per_frame", c.samples_per_frame);
  v("height", c.height);
  v("width", c.width);
  v("vocabulary", c.vocabulary);
  v("template_seed", c.template_seed);
  v("shared_dims", c.shared_dims);
  v("shared_strength", c.shared_strength);
}

template <typename V>
void visit(V& v, ConvLayerSpec& c) {
  v("kernel", c.kernel);
  v("stride", c.stride);
  v("channels", c.channels);
}

template <typename V>
void visit(V& v, TemporalLayerSpec& c) {
  v("kernel", c.kernel);
  v("stride", c.stride);
  v("dilation", c.dilation);
  v("channels", c.channels);
}

template <typename V>
void visit(V& v, AudioEncoderConfig& c) {
  v("layers", c.layers);
  v("output_dim", c.output_dim);
  v("normalize_waveform", c.normalize_waveform);
}

template <typename V>
void visit(V& v, VisualEncoderConfig& c) {
  v("temporal", c.temporal);
  v("spatial_kernel", c.spatial_kernel);
  v("stage_channels", c.stage_channels);
  v("output_dim", c.output_dim);
}

template <typename V>
void visit(V& v, FusionConfig& c) {
  v("n_blocks", c.n_blocks);
  v("attention_dim", c.attention_dim);
  v("ff_dim", c.ff_dim);
  v("n_heads", c.n_heads);
  v("mlp_hidden", c.mlp_hidden);
  v.enumeration("positional", c.positional, kPositional);
  v("pos_kernel", c.pos_kernel);
  v("dropout", c.dropout);
}

template <typename V>
void visit(V& v, MaskingConfig& c) {
  v("mask_prob", c.mask_prob);
  v("mask_span", c.mask_span);
  v("shared_mask_embedding", c.shared_mask_embedding);
}

template <typename V>
void visit(V& v, ObjectiveConfig& c) {
  v("loss_dim", c.loss_dim);
  v("temperature", c.temperature);
  v("n_negatives", c.n_negatives);
  v("cross_modal_negatives", c.cross_modal_negatives);
  v.enumeration("loss_directions", c.directions, kDirections);
}

template <typename V>
void visit(V& v, ModelConfig& c) {
  v("audio", c.audio);
  v("visual", c.visual);
  v("fusion", c.fusion);
  v("masking", c.masking);
  v("objective", c.objective);
}

template <typename V>
void visit(V& v, ScheduleConfig& c) {
  v.enumeration("kind", c.kind, kScheduleKinds);
  v("max_lr", c.max_lr);
  v("total_steps", c.total_steps);
  v("warmup", c.warmup);
  v("hold", c.hold);
  v("decay", c.decay);
  v("final_lr_ratio", c.final_lr_ratio);
}

template <typename V>
void visit(V& v, AdamConfig& c) {
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("eps", c.eps);
}

template <typename V>
void visit(V& v, TrainConfig& c) {
  v("schedule", c.schedule);
  v("adam", c.adam);
  v("accumulation", c.accumulation);
  v("budget_frames", c.budget_frames);
  v("min_frames", c.min_frames);
  v("max_frames", c.max_frames);
  v("validate_every", c.validate_every);
  v("checkpoint_every", c.checkpoint_every);
  v("max_epochs", c.max_epochs);
}

template <typename V>
void visit(V& v, PretrainConfig& c) {
  v.enumeration("exclude", c.exclude, kExcluded);
  v("train", c.train);
}

template <typename V>
void visit(V& v, FeatureAugment& c) {
  v("mask_prob", c.mask_prob);
  v("mask_span", c.mask_span);
  v("audio", c.audio);
  v("visual", c.visual);
}

template <typename V>
void visit(V& v, FinetuneConfig& c) {
  v.enumeration("task", c.task, kTasks);
  v.enumeration("strategy", c.strategy, kStrategies);
  v("train", c.train);
  v("vsr_step_ratio", c.vsr_step_ratio);
  v("augment", c.augment);
  v("vocabulary", c.vocabulary);
  v.enumeration("backend", c.backend, kBackends);
  v("n_classes", c.n_classes);
  v("clip_frames", c.clip_frames);
  v("mixup_alpha", c.mixup_alpha);
  v("temporal_mask", c.temporal_mask);
}

template <typename V>
void visit(V& v, ProbeConfig& c) {
  v("held_out", c.held_out);
  v("iterations", c.iterations);
  v("lr", c.lr);
  v("l2", c.l2);
  v("seed", c.seed);
}

template <typename V>
void visit(V& v, RunConfig& c) {
  v("version", c.version);
  v("seed", c.seed);
  v("output_dir", c.output_dir);
  v("data", c.data);
  v("model", c.model);
  v("pretrain", c.pretrain);
  v("finetune", c.finetune);
  v("probe", c.probe);
}

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};

template <typename T>
void Reader::read(const json& v, const std::string& where, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
    out = v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned()) {
        out = v.get<T>();
      } else if (v.get<std::int64_t>() < 0) {
        throw ConfigError(where + ": must be nonnegative");
      } else {
        out = static_cast<T>(v.get<std::int64_t>());
      }
    } else {
      out = v.get<T>();
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number");
    out = v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(where + ": expected a string");
    out = v.get<std::string>();
  } else if constexpr (is_vector<T>::value) {
    if (!v.is_array()) throw ConfigError(where + ": expected an array");
    T items(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) read(v[i], where + "[" + std::to_string(i) + "]", items[i]);
    out = std::move(items);
  } else {
    Reader r(v, where);
    visit(r, out);
    r.finish();
  }
}

template <typename T>
ojson Writer::write(const T& v) {
  if constexpr (std::is_arithmetic_v<T> || std::is_same_v<T, std::string>) {
    return ojson(v);
  } else if constexpr (is_vector<T>::value) {
    ojson a = ojson::array();
    for (const auto& item : v) a.push_back(write(item));
    return a;
  } else {
    Writer w;
    visit(w, const_cast<T&>(v));
    return std::move(w.out);
  }
}

}  // namespace

void RunConfig::validate() const {
  if (version != kConfigVersion) {
    throw ConfigError("config version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kConfigVersion) + ")");
  }
  data.validate();
  model.validate();
  if (model.samples_per_frame != data.samples_per_frame) {
    throw ConfigError("model and data disagree on samples per frame");
  }
  pretrain.train.validate();
  validate_pretrain_mode(model.objective, pretrain.exclude);
  finetune.validate();
  if (!(probe.held_out > 0.0 && probe.held_out < 1.0)) throw ConfigError("probe.held_out must be in (0, 1)");
}

RunConfig desk_config() {
  RunConfig c;
  c.data.shared_strength = 0.7;
  c.pretrain.train.schedule.max_lr = 1e-3;
  c.pretrain.train.validate_every = 200;
  c.pretrain.train.checkpoint_every = 500;
  c.finetune.task = FinetuneTask::asr;
  c.finetune.train.schedule.max_lr = 1e-3;
  c.finetune.train.schedule.total_steps = 300;
  c.finetune.train.validate_every = 50;
  return c;
}

RunConfig parse_run_config(const json& j) {
  RunConfig c = desk_config();
  Reader r(j, "");
  visit(r, c);
  r.finish();
  c.model.samples_per_frame = c.data.samples_per_frame;
  c.validate();
  return c;
}

ojson to_json(const RunConfig& cfg) { return Writer::write(cfg); }

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write config echo: " + path.string());
  os << to_json(cfg).dump(2) << "\n";
}

std::uint64_t config_hash(const RunConfig& cfg) {
  // Where outputs go does not change what is computed.
  auto j = to_json(cfg);
  j.erase("output_dir");
  return hash_string(j.dump());
}

std::uint64_t model_hash(const ModelConfig& cfg) { return hash_string(Writer::write(cfg).dump()); }

const char* exclusion_name(ExcludedModality m) { return enum_name(m, kExcluded); }
const char* strategy_name(ExclusionStrategy s) { return enum_name(s, kStrategies); }

}  // namespace avrl
