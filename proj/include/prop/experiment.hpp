#pragma once

// Experiment orchestration: configuration, backbone pretraining, the
// class-incremental loop for the learner and the baselines, ablation sweeps,
// and the files a run leaves behind.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "prop/baselines.hpp"
#include "prop/checkpoint.hpp"
#include "prop/dataset.hpp"
#include "prop/embeddings.hpp"
#include "prop/encoder.hpp"
#include "prop/errors.hpp"
#include "prop/metrics.hpp"
#include "prop/profiler.hpp"
#include "prop/prop_core.hpp"

namespace prop {

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  real lr = real(0.05);
  real weight_decay = real(0.0005);
};

struct ExperimentConfig {
  EncoderConfig encoder;  // input_dim is taken from the data
  TrainConfig train;
  Fusion fusion = Fusion::concatenate;
  PretrainConfig pretrain;

  // data
  bool synthetic = true;
  std::string data_dir;
  std::string checkpoint;  // backbone source; empty means pretrain
  std::size_t num_classes = 10;
  std::size_t base_classes = 5;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t data_dim = 16;
  real separation = 10;
  real task_separation = 0;  // > 0: classes come in orthogonal task clusters
  real test_fraction = real(1) / real(3);

  // protocol
  std::size_t init_classes = 2;
  std::size_t inc_classes = 2;
  std::uint64_t seed = 1993;
  std::vector<std::uint64_t> seeds{1993, 1994, 1995, 1996, 1997};

  ExperimentConfig with_seed(std::uint64_t s) const {
    ExperimentConfig c = *this;
    c.seed = s;
    c.train.seed = s;
    return c;
  }
};

// ---------------------------------------------------------------------------
// key=value configuration files

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

inline real parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return static_cast<real>(x);
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects a boolean, got '" + v + "'");
}

inline std::string real_str(real v) {
  std::ostringstream os;
  os.precision(17);
  os << static_cast<double>(v);
  return os.str();
}

struct ConfigField {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define PROP_SIZE_FIELD(name, member)                                                                  \
  ConfigField {                                                                                       \
    name, [](ExperimentConfig& c, const std::string& v) { c.member = parse_size(name, v); },           \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }                            \
  }
#define PROP_REAL_FIELD(name, member)                                                                  \
  ConfigField {                                                                                       \
    name, [](ExperimentConfig& c, const std::string& v) { c.member = parse_real(name, v); },           \
        [](const ExperimentConfig& c) { return real_str(c.member); }                                  \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      PROP_SIZE_FIELD("num_layers", encoder.num_layers),
      PROP_SIZE_FIELD("num_heads", encoder.num_heads),
      PROP_SIZE_FIELD("model_dim", encoder.model_dim),
      PROP_SIZE_FIELD("seq_len", encoder.seq_len),
      PROP_SIZE_FIELD("ff_hidden", encoder.ff_hidden),
      ConfigField{"prompt_mode",
                  [](ExperimentConfig& c, const std::string& v) {
                    if (v == "concat") c.encoder.prompt_mode = PromptMode::concat;
                    else if (v == "prefix") c.encoder.prompt_mode = PromptMode::prefix;
                    else throw ConfigError("config: prompt_mode must be concat or prefix");
                  },
                  [](const ExperimentConfig& c) {
                    return std::string(c.encoder.prompt_mode == PromptMode::concat ? "concat" : "prefix");
                  }},
      ConfigField{"prompt_sharing",
                  [](ExperimentConfig& c, const std::string& v) {
                    if (v == "per_layer") c.encoder.prompt_sharing = PromptSharing::per_layer;
                    else if (v == "shared") c.encoder.prompt_sharing = PromptSharing::shared;
                    else throw ConfigError("config: prompt_sharing must be per_layer or shared");
                  },
                  [](const ExperimentConfig& c) {
                    return std::string(c.encoder.prompt_sharing == PromptSharing::per_layer ? "per_layer" : "shared");
                  }},
      ConfigField{"mask_prompt_keys",
                  [](ExperimentConfig& c, const std::string& v) {
                    c.encoder.mask_prompt_keys = parse_bool("mask_prompt_keys", v);
                  },
                  [](const ExperimentConfig& c) { return std::string(c.encoder.mask_prompt_keys ? "true" : "false"); }},
      PROP_SIZE_FIELD("batch_size", train.batch_size),
      PROP_SIZE_FIELD("epochs", train.epochs),
      PROP_REAL_FIELD("lambda", train.lambda),
      PROP_SIZE_FIELD("prompt_len", train.prompt_len),
      PROP_REAL_FIELD("lr", train.lr),
      PROP_REAL_FIELD("weight_decay", train.weight_decay),
      PROP_SIZE_FIELD("l2_steps", train.l2_steps),
      PROP_REAL_FIELD("prompt_init_std", train.prompt_init_std),
      PROP_REAL_FIELD("head_init_std", train.head_init_std),
      ConfigField{"fusion", [](ExperimentConfig& c, const std::string& v) { c.fusion = parse_fusion(v); },
                  [](const ExperimentConfig& c) { return to_string(c.fusion); }},
      PROP_SIZE_FIELD("pretrain_epochs", pretrain.epochs),
      PROP_SIZE_FIELD("pretrain_batch_size", pretrain.batch_size),
      PROP_REAL_FIELD("pretrain_lr", pretrain.lr),
      PROP_REAL_FIELD("pretrain_weight_decay", pretrain.weight_decay),
      ConfigField{"synthetic",
                  [](ExperimentConfig& c, const std::string& v) { c.synthetic = parse_bool("synthetic", v); },
                  [](const ExperimentConfig& c) { return std::string(c.synthetic ? "true" : "false"); }},
      ConfigField{"data_dir", [](ExperimentConfig& c, const std::string& v) { c.data_dir = v; },
                  [](const ExperimentConfig& c) { return c.data_dir; }},
      ConfigField{"checkpoint", [](ExperimentConfig& c, const std::string& v) { c.checkpoint = v; },
                  [](const ExperimentConfig& c) { return c.checkpoint; }},
      PROP_SIZE_FIELD("num_classes", num_classes),
      PROP_SIZE_FIELD("base_classes", base_classes),
      PROP_SIZE_FIELD("train_per_class", train_per_class),
      PROP_SIZE_FIELD("test_per_class", test_per_class),
      PROP_SIZE_FIELD("data_dim", data_dim),
      PROP_REAL_FIELD("separation", separation),
      PROP_REAL_FIELD("task_separation", task_separation),
      PROP_REAL_FIELD("test_fraction", test_fraction),
      PROP_SIZE_FIELD("init_classes", init_classes),
      PROP_SIZE_FIELD("inc_classes", inc_classes),
      ConfigField{"seed",
                  [](ExperimentConfig& c, const std::string& v) {
                    c.seed = parse_size("seed", v);
                    c.train.seed = c.seed;
                  },
                  [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      ConfigField{"seeds",
                  [](ExperimentConfig& c, const std::string& v) {
                    c.seeds.clear();
                    std::istringstream is(v);
                    std::string item;
                    while (std::getline(is, item, ',')) c.seeds.push_back(parse_size("seeds", trim(item)));
                    if (c.seeds.empty()) throw ConfigError("config: seeds must list at least one seed");
                  },
                  [](const ExperimentConfig& c) {
                    std::string s;
                    for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                    return s;
                  }},
  };
  return fields;
}

#undef PROP_SIZE_FIELD
#undef PROP_REAL_FIELD

}  // namespace detail

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

/// Flat key=value text; '#' starts a comment.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig cfg = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(cfg));
}

/// Every setting as key=value lines, in a fixed order.
inline std::string config_echo(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + '=' + f.get(cfg) + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Backbone pretraining

struct PretrainResult {
  EncoderParams params;
  real base_train_accuracy = 0;
};

/// Trains the encoder plus a temporary head with cross-entropy on the base
/// classes, then freezes it. Base classes must not appear in the stream.
inline PretrainResult pretrain_backbone(const Dataset& base_train, EncoderConfig enc_cfg, const PretrainConfig& cfg,
                                        std::uint64_t seed, const std::set<std::size_t>& stream_classes) {
  const auto base = base_train.classes();
  for (auto c : base) {
    if (stream_classes.count(c)) {
      throw ProtocolError("pretraining class " + std::to_string(c) + " also appears in the incremental stream");
    }
  }
  if (base_train.samples.empty()) throw DataError("pretrain: no base samples");
  if (cfg.batch_size == 0) throw ConfigError("pretrain_batch_size must be positive");
  enc_cfg.input_dim = base_train.dim;
  enc_cfg.validate();

  std::mt19937_64 rng(seed);
  EncoderParams params = EncoderParams::init(enc_cfg, rng());
  const std::vector<std::size_t> classes(base.begin(), base.end());
  std::map<std::size_t, std::size_t> local;
  for (std::size_t i = 0; i < classes.size(); ++i) local[classes[i]] = i;

  ParamMap trainable = params.trainable_map();
  trainable.emplace("head.weight", detail::gaussian({classes.size(), enc_cfg.model_dim}, real(0.02), rng));
  trainable.emplace("head.bias", Tensor({classes.size()}));

  const auto& samples = base_train.samples;
  const std::size_t n = samples.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  if (cfg.epochs > 0) {
    SgdCosineOptimizer opt(cfg.epochs * per_epoch, cfg.lr, cfg.weight_decay);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t b = 0; b < per_epoch; ++b) {
        params.assign(trainable);
        ad::Tape tape;
        const BoundEncoder enc = bind(tape, params, true);
        const ad::Var hw = tape.parameter("head.weight", trainable.at("head.weight"));
        const ad::Var hb = tape.parameter("head.bias", trainable.at("head.bias"));
        std::vector<ad::Var> feats;
        std::vector<std::size_t> labels;
        for (std::size_t i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
          feats.push_back(encode(enc, samples[order[i]].x, {}));
          labels.push_back(local.at(samples[order[i]].label));
        }
        const ad::Var stacked = feats.size() == 1 ? feats.front() : ad::concat_rows(feats);
        const ad::Var logits = ad::add_row_bias(ad::matmul(stacked, ad::transpose(hw)), hb);
        opt.step(trainable, tape.backward(ad::cross_entropy(logits, labels)));
      }
    }
  }
  params.assign(trainable);

  std::size_t correct = 0;
  const Tensor& hw = trainable.at("head.weight");
  const Tensor& hb = trainable.at("head.bias");
  for (const auto& s : samples) {
    if (classes[detail::head_argmax(encode(params, s.x, nullptr), hw, hb)] == s.label) ++correct;
  }
  params.frozen = true;
  return PretrainResult{std::move(params), real(correct) / real(n)};
}

// ---------------------------------------------------------------------------
// Data + backbone for one seed

struct Workbench {
  ExperimentConfig config;
  DataSplit base;
  TaskStream stream;
  EncoderParams backbone;
  real base_train_accuracy = 0;
};

/// Loads or generates the data, builds the task stream and obtains a frozen
/// backbone (from config.checkpoint, or by pretraining on the base classes).
inline Workbench prepare(const ExperimentConfig& cfg) {
  Workbench wb;
  wb.config = cfg;
  DataSplit all;
  std::set<std::size_t> stream_classes, base_classes;
  const bool clustered = cfg.synthetic && cfg.task_separation > 0;
  if (clustered) {
    // Stream classes in task clusters, in cluster order; base classes drawn
    // independently and appended after them.
    if (cfg.inc_classes == 0 || cfg.init_classes != cfg.inc_classes || cfg.num_classes % cfg.inc_classes != 0) {
      throw ConfigError("task_separation needs init_classes == inc_classes dividing num_classes");
    }
    const std::size_t n = cfg.train_per_class + cfg.test_per_class;
    Dataset ds = gen_task_clusters(cfg.num_classes / cfg.inc_classes, cfg.inc_classes, n, cfg.data_dim,
                                   cfg.task_separation, cfg.separation, cfg.seed);
    Dataset base = gen_synthetic(cfg.base_classes, n, cfg.data_dim, cfg.separation, cfg.seed ^ 0x9e3779b97f4a7c15ull);
    for (auto& s : base.samples) {
      s.label += cfg.num_classes;
      s.id += ds.samples.size();
      ds.samples.push_back(std::move(s));
    }
    all = split_per_class(ds, cfg.train_per_class);
    for (std::size_t c = 0; c < cfg.num_classes + cfg.base_classes; ++c) {
      (c < cfg.num_classes ? stream_classes : base_classes).insert(c);
    }
  } else if (cfg.synthetic) {
    const Dataset ds = gen_synthetic(cfg.num_classes + cfg.base_classes, cfg.train_per_class + cfg.test_per_class,
                                     cfg.data_dim, cfg.separation, cfg.seed);
    all = split_per_class(ds, cfg.train_per_class);
    for (std::size_t c = 0; c < cfg.num_classes + cfg.base_classes; ++c) {
      (c < cfg.num_classes ? stream_classes : base_classes).insert(c);
    }
  } else {
    if (cfg.data_dir.empty()) throw ConfigError("no data source: set data_dir or synthetic=true");
    all = split_fraction(load_dataset_dir(cfg.data_dir), cfg.test_fraction);
    const auto classes = all.train.classes();
    if (cfg.checkpoint.empty() && cfg.base_classes >= classes.size()) {
      throw ConfigError("base_classes leaves no classes for the stream");
    }
    // The highest class ids are held out for pretraining.
    const std::size_t n_base = cfg.checkpoint.empty() ? cfg.base_classes : 0;
    std::size_t i = 0;
    for (auto c : classes) (i++ < classes.size() - n_base ? stream_classes : base_classes).insert(c);
  }
  const DataSplit stream_data{all.train.subset(stream_classes), all.test.subset(stream_classes)};
  wb.base = DataSplit{all.train.subset(base_classes), all.test.subset(base_classes)};
  wb.stream = make_task_stream(stream_data, cfg.init_classes, cfg.inc_classes, cfg.seed, !clustered);

  if (!cfg.checkpoint.empty()) {
    wb.backbone = params_from_checkpoint(load_checkpoint(cfg.checkpoint));
    // An unfrozen backbone (e.g. a finetune result) has seen stream data.
    if (!wb.backbone.frozen) {
      throw ProtocolError("checkpoint backbone " + cfg.checkpoint + " is not a frozen pretrained backbone");
    }
    if (wb.backbone.config.input_dim != all.train.dim) {
      throw ConfigError("checkpoint input_dim does not match the data width");
    }
  } else {
    auto pre = pretrain_backbone(wb.base.train, cfg.encoder, cfg.pretrain, cfg.seed, stream_classes);
    wb.backbone = std::move(pre.params);
    wb.base_train_accuracy = pre.base_train_accuracy;
  }
  return wb;
}

// ---------------------------------------------------------------------------
// Runs

struct PropRun {
  AccuracyRecord record;
  PropModel model;
  std::vector<TaskTrainResult> tasks;
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
};

/// Learner state restricted to the first `num_tasks` prompts.
inline PropModel truncate_model(const PropModel& model, std::size_t num_tasks) {
  PropModel out(model.bank.fusion(), model.bank.model_dim());
  for (std::size_t i = 0; i < std::min(num_tasks, model.prompts.size()); ++i) {
    const auto& p = model.prompts[i];
    out.prompts.push_back(p);
    for (auto c : model.bank.classes_of_task(p.task_id)) out.bank.insert(c, p.task_id, model.bank.at(c).vector);
  }
  return out;
}

/// Full class-incremental loop: train each task, then evaluate on every class seen so far.
inline PropRun run_prop(const Workbench& wb, const ExperimentConfig& cfg) {
  PropRun run;
  run.model = PropModel(cfg.fusion, wb.backbone.config.model_dim);
  run.backbone_hash_before = wb.backbone.hash();
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  for (std::size_t t = 0; t < wb.stream.size(); ++t) {
    try {
      run.tasks.push_back(train_task(wb.stream.tasks[t], wb.backbone, tc, run.model));
      const StepAccuracy acc = evaluate_step(
          wb.stream, t, [&](const Sample& s) { return predict(s.x, wb.backbone, run.model).class_id; });
      run.record.push(acc.seen, acc.per_task);
    } catch (ProtocolError& e) {
      throw ProtocolError("task " + std::to_string(t) + ": " + e.what());
    } catch (ConfigError& e) {
      throw ConfigError("task " + std::to_string(t) + ": " + e.what());
    }
  }
  run.backbone_hash_after = wb.backbone.hash();
  return run;
}

struct KvRun {
  AccuracyRecord record;
  KeyPool keys;
  std::vector<real> retrieval_accuracy;  // per step, over the seen test data
  std::size_t agreements = 0;            // final step: kv prediction == learner prediction
  std::size_t evaluated = 0;
};

/// Key-value baseline on top of an existing learner run: same prompts and
/// prototypes, but one task is retrieved by key before scoring.
inline KvRun run_kv(const Workbench& wb, const ExperimentConfig& cfg, const PropRun& prop) {
  KvRun run;
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  for (std::size_t t = 0; t < wb.stream.size(); ++t) {
    const TaskData& task = wb.stream.tasks[t];
    run.keys.add(task.task_id, train_keys(task, wb.backbone, tc).key);
    const PropModel partial = truncate_model(prop.model, t + 1);
    std::size_t hits = 0, total = 0;
    std::map<std::size_t, std::size_t> task_of;
    for (std::size_t i = 0; i <= t; ++i)
      for (auto c : wb.stream.tasks[i].classes) task_of[c] = wb.stream.tasks[i].task_id;
    const bool last = t + 1 == wb.stream.size();
    const StepAccuracy acc = evaluate_step(wb.stream, t, [&](const Sample& s) {
      const KvPrediction p = kv_predict(s.x, wb.backbone, partial, run.keys);
      hits += p.selected_task == task_of.at(s.label) ? 1 : 0;
      ++total;
      if (last) {
        run.agreements += p.class_id == predict(s.x, wb.backbone, partial).class_id ? 1 : 0;
        ++run.evaluated;
      }
      return p.class_id;
    });
    run.record.push(acc.seen, acc.per_task);
    run.retrieval_accuracy.push_back(real(hits) / real(total));
  }
  return run;
}

inline FinetuneResult run_finetune(const Workbench& wb, const ExperimentConfig& cfg) {
  EncoderParams copy = wb.backbone;
  copy.frozen = false;
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  return finetune_baseline(wb.stream, std::move(copy), tc);
}

inline AccuracyRecord run_ncm(const Workbench& wb) { return ncm_baseline(wb.stream, wb.backbone); }

// ---------------------------------------------------------------------------
// Artifacts

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct RunArtifacts {
  std::string metrics_csv;
  std::string checkpoint;  // serialized PROPCKPT
  std::string manifest;
};

inline RunArtifacts make_artifacts(const std::string& kind, const ExperimentConfig& cfg, const Workbench& wb,
                                   const AccuracyRecord& rec, const CheckpointData& ck) {
  RunArtifacts a;
  a.metrics_csv = metrics_csv(rec, wb.stream.size());
  a.checkpoint = serialize_checkpoint(ck);
  std::ostringstream m;
  m << "# prop run manifest\n";
  m << "kind=" << kind << '\n';
  m << config_echo(cfg);
  m << "tasks=" << wb.stream.size() << '\n';
  m << "dropped_classes=";
  for (std::size_t i = 0; i < wb.stream.dropped_classes.size(); ++i) m << (i ? "," : "") << wb.stream.dropped_classes[i];
  m << '\n';
  m << "base_train_accuracy=" << format_real(wb.base_train_accuracy) << '\n';
  m << "backbone_hash=" << hex64(wb.backbone.hash()) << '\n';
  m << "final_last=" << format_real(rec.final_last()) << '\n';
  m << "final_avg=" << format_real(rec.final_avg()) << '\n';
  m << "metrics_fnv1a=" << hex64(fnv1a(a.metrics_csv)) << '\n';
  m << "checkpoint_fnv1a=" << hex64(fnv1a(a.checkpoint)) << '\n';
  a.manifest = m.str();
  return a;
}

inline void write_artifacts(const std::filesystem::path& out_dir, const RunArtifacts& a,
                            const std::string& checkpoint_name = "model.ckpt") {
  std::filesystem::create_directories(out_dir);
  write_file_atomic(out_dir / "metrics.csv", a.metrics_csv);
  write_file_atomic(out_dir / checkpoint_name, a.checkpoint);
  write_file_atomic(out_dir / "manifest.txt", a.manifest);
}

struct ExperimentResult {
  AccuracyRecord record;
  RunArtifacts artifacts;
  std::uint64_t backbone_hash_before = 0;
  std::uint64_t backbone_hash_after = 0;
};

/// Prepares data and backbone, runs the learner over the stream and, when
/// `out_dir` is given, writes metrics.csv, model.ckpt and manifest.txt.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  const Workbench wb = prepare(cfg);
  for (const auto& w : wb.stream.warnings) std::cerr << "warning: " << w << '\n';
  const PropRun run = run_prop(wb, cfg);
  ExperimentResult res;
  res.record = run.record;
  res.backbone_hash_before = run.backbone_hash_before;
  res.backbone_hash_after = run.backbone_hash_after;
  res.artifacts = make_artifacts("prop", cfg, wb, run.record, to_checkpoint(wb.backbone, &run.model));
  if (out_dir) write_artifacts(*out_dir, res.artifacts);
  return res;
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationAxis { lambda, prompt_len, loss_components, fusion };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "lambda") return AblationAxis::lambda;
  if (s == "prompt_len") return AblationAxis::prompt_len;
  if (s == "loss_components") return AblationAxis::loss_components;
  if (s == "fusion") return AblationAxis::fusion;
  throw ConfigError("unknown ablation axis '" + s + "'");
}

inline std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::lambda: return "lambda";
    case AblationAxis::prompt_len: return "prompt_len";
    case AblationAxis::loss_components: return "loss_components";
    case AblationAxis::fusion: return "fusion";
  }
  return "unknown";
}

struct AblationSetting {
  std::string label;
  std::function<void(ExperimentConfig&)> apply;
};

inline std::vector<AblationSetting> ablation_settings(AblationAxis axis, const ExperimentConfig& base) {
  std::vector<AblationSetting> out;
  switch (axis) {
    case AblationAxis::lambda:
      for (real l : {real(0.01), real(0.05), real(0.025), real(0.1), real(0.2)}) {
        out.push_back({detail::real_str(l), [l](ExperimentConfig& c) { c.train.lambda = l; }});
      }
      break;
    case AblationAxis::prompt_len:
      for (std::size_t lp : {1, 5, 10, 15, 20}) {
        out.push_back({std::to_string(lp), [lp](ExperimentConfig& c) { c.train.prompt_len = lp; }});
      }
      break;
    case AblationAxis::loss_components: {
      const real l = base.train.lambda > 0 ? base.train.lambda : kDefaultLambda;
      out.push_back({"ce_only", [](ExperimentConfig& c) { c.train.lambda = 0; }});
      out.push_back({"ce_l2", [l](ExperimentConfig& c) { c.train.lambda = l; }});
      break;
    }
    case AblationAxis::fusion:
      for (Fusion f : {Fusion::concatenate, Fusion::sum, Fusion::average, Fusion::max_pool}) {
        out.push_back({to_string(f), [f](ExperimentConfig& c) { c.fusion = f; }});
      }
      break;
  }
  return out;
}

struct AblationRow {
  std::string setting;
  std::vector<std::uint64_t> seeds;
  std::vector<AccuracyRecord> runs;
  real mean_last = 0;
  real mean_avg = 0;
};

/// Runs the learner for every setting of `axis` and every seed in
/// config.seeds. Workbenches (data + backbone) are shared across settings.
inline std::vector<AblationRow> ablation_sweep(const ExperimentConfig& cfg, AblationAxis axis,
                                               const std::vector<Workbench>* benches = nullptr) {
  std::vector<Workbench> owned;
  if (!benches) {
    for (auto s : cfg.seeds) owned.push_back(prepare(cfg.with_seed(s)));
    benches = &owned;
  }
  std::vector<AblationRow> rows;
  for (const auto& setting : ablation_settings(axis, cfg)) {
    AblationRow row;
    row.setting = setting.label;
    for (const auto& wb : *benches) {
      ExperimentConfig c = wb.config;
      setting.apply(c);
      row.seeds.push_back(c.seed);
      row.runs.push_back(run_prop(wb, c).record);
    }
    for (const auto& r : row.runs) {
      row.mean_last += r.final_last();
      row.mean_avg += r.final_avg();
    }
    row.mean_last /= real(row.runs.size());
    row.mean_avg /= real(row.runs.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string ablation_csv(AblationAxis axis, const std::vector<AblationRow>& rows) {
  std::string out = "axis,setting,num_seeds,mean_last,mean_avg\n";
  for (const auto& r : rows) {
    out += to_string(axis) + ',' + r.setting + ',' + std::to_string(r.runs.size()) + ',' + format_real(r.mean_last) +
           ',' + format_real(r.mean_avg) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Profiling and embedding export

struct ProfileRow {
  std::size_t tasks = 0;
  CostEstimate formula;
  MacCounter measured;
};

/// Measured attention MACs of one predict call with 1..T prompts, beside the closed form.
inline std::vector<ProfileRow> profile_run(const Workbench& wb, const PropRun& run) {
  std::vector<ProfileRow> rows;
  const Sample* probe = nullptr;
  for (const auto& t : wb.stream.tasks)
    if (!t.test.empty()) probe = &t.test.front();
  if (!probe) throw DataError("profile: no test sample available");
  for (std::size_t t = 1; t <= run.model.prompts.size(); ++t) {
    const PropModel partial = truncate_model(run.model, t);
    ProfileRow row;
    row.tasks = t;
    row.formula = flop_estimate(cost_model_for(wb.backbone, partial));
    row.measured = measure_macs(probe->x, wb.backbone, partial);
    rows.push_back(row);
  }
  return rows;
}

inline std::string profile_csv(const std::vector<ProfileRow>& rows, const EncoderParams& params,
                               std::size_t prompt_len) {
  std::string out =
      "tasks,layers,seq_len,prompt_len,model_dim,formula_prop_similarity,formula_prop_forward,formula_prop_total,"
      "formula_kv_total,measured_prompted_score_macs,measured_prompted_total_macs,measured_frozen_total_macs\n";
  for (const auto& r : rows) {
    out += std::to_string(r.tasks) + ',' + std::to_string(params.config.num_layers) + ',' +
           std::to_string(params.config.seq_len) + ',' + std::to_string(prompt_len) + ',' +
           std::to_string(params.config.model_dim) + ',' + std::to_string(r.formula.prop_similarity) + ',' +
           std::to_string(r.formula.prop_forward) + ',' + std::to_string(r.formula.prop_total) + ',' +
           std::to_string(r.formula.kv_total) + ',' + std::to_string(r.measured.prompted_score) + ',' +
           std::to_string(r.measured.prompted_total()) + ',' + std::to_string(r.measured.frozen_total()) + '\n';
  }
  return out;
}

/// Test samples as fused features under their own task's prompt, plus every prototype.
inline std::pair<std::vector<LabeledVector>, std::vector<LabeledVector>> embedding_inputs(const Workbench& wb,
                                                                                          const PropModel& model) {
  std::vector<LabeledVector> samples, protos;
  for (const auto& task : wb.stream.tasks) {
    const TaskPrompt* p = model.prompt_for(task.task_id);
    if (!p) continue;
    for (const auto& s : task.test) {
      const Tensor h = fuse(encode(wb.backbone, s.x, p), encode(wb.backbone, s.x, nullptr), model.bank.fusion());
      samples.push_back({h.values(), s.label});
    }
  }
  for (const auto& [cls, e] : model.bank.entries()) protos.push_back({e.vector.values(), cls});
  return {std::move(samples), std::move(protos)};
}

}  // namespace prop
