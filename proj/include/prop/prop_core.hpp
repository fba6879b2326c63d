#pragma once

// Prompt-prototype continual learner.
//
// Each task gets its own prompt, trained with cross-entropy through a
// throwaway linear head plus an L2 penalty on the prompt. After training, the
// per-class means of the prompted and frozen features are fused into
// prototypes that replace the head. At inference every stored prompt is
// applied to the input and its fused feature is scored only against the
// prototypes produced under that same prompt, so no task retrieval is needed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prop/autodiff.hpp"
#include "prop/dataset.hpp"
#include "prop/encoder.hpp"
#include "prop/errors.hpp"
#include "prop/optimizer.hpp"
#include "prop/tensor.hpp"

namespace prop {

enum class Fusion : std::uint32_t { concatenate = 0, sum = 1, average = 2, max_pool = 3 };

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::concatenate: return "concatenate";
    case Fusion::sum: return "sum";
    case Fusion::average: return "average";
    case Fusion::max_pool: return "maxpool";
  }
  return "unknown";
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "concatenate" || s == "concat") return Fusion::concatenate;
  if (s == "sum") return Fusion::sum;
  if (s == "average" || s == "avg") return Fusion::average;
  if (s == "maxpool" || s == "max_pool" || s == "pooling") return Fusion::max_pool;
  throw ConfigError("unknown fusion strategy '" + s + "'");
}

inline std::size_t fused_dim(Fusion f, std::size_t d) { return f == Fusion::concatenate ? 2 * d : d; }

/// Combines a prompted feature `a` with the frozen feature `b`.
inline Tensor fuse(const Tensor& a, const Tensor& b, Fusion f) {
  if (a.size() != b.size()) {
    throw DimensionError("fuse: widths differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  const std::size_t d = a.size();
  std::vector<real> out;
  if (f == Fusion::concatenate) {
    out.reserve(2 * d);
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    return Tensor::vector(std::move(out));
  }
  out.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    switch (f) {
      case Fusion::sum: out[i] = a[i] + b[i]; break;
      case Fusion::average: out[i] = (a[i] + b[i]) / real(2); break;
      case Fusion::max_pool: out[i] = std::max(a[i], b[i]); break;
      case Fusion::concatenate: break;
    }
  }
  return Tensor::vector(std::move(out));
}

/// Arithmetic mean of same-width feature vectors, summed left to right.
inline Tensor class_prototype(std::span<const Tensor> features) {
  if (features.empty()) throw DataError("class has no samples");
  const std::size_t d = features.front().size();
  std::vector<real> acc(d, real(0));
  for (const auto& f : features) {
    if (f.size() != d) throw DimensionError("class_prototype: feature widths differ");
    for (std::size_t i = 0; i < d; ++i) acc[i] += f[i];
  }
  const real n = static_cast<real>(features.size());
  for (auto& v : acc) v /= n;
  return Tensor::vector(std::move(acc));
}

struct PrototypeEntry {
  std::size_t task_id = 0;
  Tensor vector;

  friend bool operator==(const PrototypeEntry&, const PrototypeEntry&) = default;
};

/// One fused prototype per class ever seen; doubles as the cosine classifier.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(Fusion fusion, std::size_t model_dim)
      : fusion_(fusion), model_dim_(model_dim), width_(fused_dim(fusion, model_dim)) {}

  Fusion fusion() const noexcept { return fusion_; }
  std::size_t model_dim() const noexcept { return model_dim_; }
  std::size_t width() const noexcept { return width_; }

  void insert(std::size_t class_id, std::size_t task_id, Tensor prototype) {
    if (entries_.count(class_id)) {
      throw ProtocolError("prototype for class " + std::to_string(class_id) + " already stored");
    }
    if (prototype.size() != width_) {
      throw DimensionError("prototype width " + std::to_string(prototype.size()) + " differs from bank width " +
                           std::to_string(width_));
    }
    if (l2_norm(prototype.data()) == 0) {
      throw ZeroNormError("prototype for class " + std::to_string(class_id) + " has zero norm");
    }
    entries_.emplace(class_id, PrototypeEntry{task_id, std::move(prototype)});
    by_task_[task_id].push_back(class_id);
  }

  bool contains(std::size_t class_id) const { return entries_.count(class_id) != 0; }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::map<std::size_t, PrototypeEntry>& entries() const noexcept { return entries_; }
  const PrototypeEntry& at(std::size_t class_id) const { return entries_.at(class_id); }

  const std::vector<std::size_t>& classes_of_task(std::size_t task_id) const {
    static const std::vector<std::size_t> none;
    auto it = by_task_.find(task_id);
    return it == by_task_.end() ? none : it->second;
  }

  friend bool operator==(const PrototypeBank& a, const PrototypeBank& b) {
    return a.fusion_ == b.fusion_ && a.width_ == b.width_ && a.entries_ == b.entries_;
  }

 private:
  Fusion fusion_ = Fusion::concatenate;
  std::size_t model_dim_ = 0;
  std::size_t width_ = 0;
  std::map<std::size_t, PrototypeEntry> entries_;
  std::map<std::size_t, std::vector<std::size_t>> by_task_;
};

/// Cosine similarity of a feature against each prototype; each score is in [-1, 1].
inline std::vector<real> similarity_scores(const Tensor& feature, std::span<const Tensor> prototypes) {
  if (l2_norm(feature.data()) == 0) throw ZeroNormError("similarity: input feature has zero norm");
  std::vector<real> out;
  out.reserve(prototypes.size());
  for (const auto& c : prototypes) {
    if (c.size() != feature.size()) throw DimensionError("similarity: prototype width differs from feature width");
    out.push_back(cosine(feature.data(), c.data()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss terms

struct LossReport {
  real ce = 0;
  real l2 = 0;
  real lambda = 0;
  real total = 0;
};

inline real ce_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  ad::Tape tape;
  return ad::cross_entropy(tape.constant(logits), labels).value().item();
}

/// Euclidean norm over every element of every block.
inline real prompt_l2(const TaskPrompt& prompt) {
  real s = 0;
  for (const auto& b : prompt.blocks)
    for (auto v : b.data()) s += v * v;
  return std::sqrt(s);
}

inline real total_loss(real ce, real l2, real lambda) { return ce + lambda * l2; }

inline constexpr real kDefaultLambda = real(0.1);

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  real lambda = kDefaultLambda;
  std::size_t prompt_len = 5;
  real lr = real(0.03);
  real weight_decay = real(0.0005);
  std::uint64_t seed = 1993;
  std::size_t l2_steps = 0;  // 0: penalty at every step; k > 0: only the first k optimizer steps
  real prompt_init_std = real(0.02);
  real head_init_std = real(0.02);

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
    if (!(lr >= 0) || !(weight_decay >= 0)) throw ConfigError("lr and weight_decay must be non-negative");
    if (!(prompt_init_std >= 0) || !(head_init_std >= 0)) throw ConfigError("init std must be non-negative");
  }
};

/// Training-time linear classifier over the current task's classes.
struct ClassifierHead {
  std::vector<std::size_t> classes;  // global ids; row i scores classes[i]
  Tensor weight;                     // M x D
  Tensor bias;                       // M

  static ClassifierHead init(std::vector<std::size_t> classes, std::size_t d, real stddev, std::mt19937_64& rng) {
    ClassifierHead h;
    h.weight = detail::gaussian({classes.size(), d}, stddev, rng);
    h.bias = Tensor({classes.size()});
    h.classes = std::move(classes);
    return h;
  }
};

struct BatchLoss {
  ad::Var ce, l2, total;
  LossReport report;
};

/// Composite loss ce + lambda * ||p|| for one mini-batch, with logits
/// head(encode(x, prompt)). The L2 term is omitted (zero) when `apply_l2` is false.
inline BatchLoss build_batch_loss(ad::Tape& tape, const BoundEncoder& enc, std::span<const ad::Var> prompt,
                                  ad::Var head_weight, ad::Var head_bias, std::span<const Sample* const> batch,
                                  std::span<const std::size_t> local_labels, real lambda, bool apply_l2) {
  if (batch.empty()) throw ContractError("build_batch_loss: empty batch");
  std::vector<ad::Var> feats;
  feats.reserve(batch.size());
  for (const Sample* s : batch) feats.push_back(encode(enc, s->x, prompt));
  const ad::Var stacked = feats.size() == 1 ? feats.front() : ad::concat_rows(feats);
  const ad::Var logits = ad::add_row_bias(ad::matmul(stacked, ad::transpose(head_weight)), head_bias);
  BatchLoss out;
  out.ce = ad::cross_entropy(logits, local_labels);
  if (apply_l2 && !prompt.empty()) {
    out.l2 = ad::l2_norm(prompt.size() == 1 ? prompt.front() : ad::concat_rows(prompt));
  } else {
    out.l2 = tape.constant(Tensor::vector({0}));
  }
  out.total = ad::add(out.ce, ad::scale(out.l2, lambda));
  out.report.ce = out.ce.value().item();
  out.report.l2 = out.l2.value().item();
  out.report.lambda = lambda;
  out.report.total = out.total.value().item();
  return out;
}

struct DualPrototype {
  Tensor prompted;  // mean of encode(x, prompt)
  Tensor frozen;    // mean of encode(x) without prompt
};

/// Per-class prompted and frozen prototypes over `samples`.
inline std::map<std::size_t, DualPrototype> dual_prototypes(std::span<const Sample> samples,
                                                            const EncoderParams& params, const TaskPrompt& prompt) {
  std::map<std::size_t, std::vector<Tensor>> prompted, frozen;
  for (const auto& s : samples) {
    prompted[s.label].push_back(encode(params, s.x, &prompt));
    frozen[s.label].push_back(encode(params, s.x, nullptr));
  }
  std::map<std::size_t, DualPrototype> out;
  for (auto& [cls, feats] : prompted) {
    out.emplace(cls, DualPrototype{class_prototype(feats), class_prototype(frozen[cls])});
  }
  return out;
}

/// Everything learned so far: one prompt per task and the prototype bank.
struct PropModel {
  std::vector<TaskPrompt> prompts;
  PrototypeBank bank;

  PropModel() = default;
  PropModel(Fusion fusion, std::size_t model_dim) : bank(fusion, model_dim) {}

  const TaskPrompt* prompt_for(std::size_t task_id) const {
    for (const auto& p : prompts)
      if (p.task_id == task_id) return &p;
    return nullptr;
  }
};

struct TaskTrainResult {
  TaskPrompt prompt;
  std::map<std::size_t, DualPrototype> prototypes;
  std::vector<LossReport> epoch_losses;  // sample-weighted mean per epoch
  std::size_t steps = 0;
  real final_train_accuracy = 0;  // training head on the training set, after the last step
};

namespace detail {

inline std::uint64_t task_seed(std::uint64_t seed, std::size_t task_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(task_id), 0x50524f50u};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t(words[0]) << 32) | words[1];
}

}  // namespace detail

/// Trains the prompt for one task, then stores its fused class prototypes in
/// `model`. The backbone must be frozen and the task's classes new.
inline TaskTrainResult train_task(const TaskData& task, const EncoderParams& params, const TrainConfig& cfg,
                                  PropModel& model) {
  cfg.validate();
  if (!params.frozen) throw ProtocolError("train_task requires a frozen backbone");
  if (model.prompt_for(task.task_id)) {
    throw ProtocolError("task " + std::to_string(task.task_id) + " already trained");
  }
  for (auto c : task.classes) {
    if (model.bank.contains(c)) {
      throw ProtocolError("class " + std::to_string(c) + " of task " + std::to_string(task.task_id) +
                          " overlaps an earlier task");
    }
  }
  if (task.train.empty()) throw DataError("task " + std::to_string(task.task_id) + " has no training samples");
  if (model.bank.model_dim() != params.config.model_dim) {
    throw ConfigError("prototype bank width does not match the encoder");
  }

  std::map<std::size_t, std::size_t> local;
  for (std::size_t i = 0; i < task.classes.size(); ++i) local[task.classes[i]] = i;
  for (const auto& s : task.train) {
    if (!local.count(s.label)) {
      throw ProtocolError("training sample of class " + std::to_string(s.label) + " is not in task " +
                          std::to_string(task.task_id));
    }
  }

  std::mt19937_64 rng(detail::task_seed(cfg.seed, task.task_id));
  TaskTrainResult result;
  result.prompt = init_prompt(task.task_id, params.config, cfg.prompt_len, cfg.prompt_init_std, rng);
  const ClassifierHead head0 = ClassifierHead::init(task.classes, params.config.model_dim, cfg.head_init_std, rng);

  ParamMap trainable;
  for (std::size_t l = 0; l < result.prompt.blocks.size(); ++l) {
    trainable.emplace(TaskPrompt::block_name(task.task_id, l), result.prompt.blocks[l]);
  }
  trainable.emplace("head.weight", head0.weight);
  trainable.emplace("head.bias", head0.bias);

  const std::size_t n = task.train.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  if (cfg.epochs > 0) {
    SgdCosineOptimizer opt(cfg.epochs * per_epoch, cfg.lr, cfg.weight_decay);
    std::vector<const Sample*> batch;
    std::vector<std::size_t> labels;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      LossReport acc{0, 0, cfg.lambda, 0};
      for (std::size_t b = 0; b < per_epoch; ++b) {
        batch.clear();
        labels.clear();
        for (std::size_t i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
          batch.push_back(&task.train[order[i]]);
          labels.push_back(local.at(task.train[order[i]].label));
        }
        ad::Tape tape;
        const BoundEncoder enc = bind(tape, params, false);
        std::vector<ad::Var> prompt;
        for (std::size_t l = 0; l < result.prompt.blocks.size(); ++l) {
          const auto name = TaskPrompt::block_name(task.task_id, l);
          prompt.push_back(tape.parameter(name, trainable.at(name)));
        }
        const ad::Var hw = tape.parameter("head.weight", trainable.at("head.weight"));
        const ad::Var hb = tape.parameter("head.bias", trainable.at("head.bias"));
        const bool apply_l2 = cfg.l2_steps == 0 || opt.current_step() < cfg.l2_steps;
        const BatchLoss loss = build_batch_loss(tape, enc, prompt, hw, hb, batch, labels, cfg.lambda, apply_l2);
        opt.step(trainable, tape.backward(loss.total));
        const real w = real(batch.size());
        acc.ce += loss.report.ce * w;
        acc.l2 += loss.report.l2 * w;
        acc.total += loss.report.total * w;
      }
      acc.ce /= real(n);
      acc.l2 /= real(n);
      acc.total /= real(n);
      result.epoch_losses.push_back(acc);
    }
    result.steps = opt.current_step();
    for (std::size_t l = 0; l < result.prompt.blocks.size(); ++l) {
      result.prompt.blocks[l] = trainable.at(TaskPrompt::block_name(task.task_id, l));
    }
  }

  // Head accuracy on the training set with the final parameters.
  {
    const Tensor& w = trainable.at("head.weight");
    const Tensor& bias = trainable.at("head.bias");
    std::size_t correct = 0;
    for (const auto& s : task.train) {
      const Tensor f = encode(params, s.x, &result.prompt);
      std::size_t best = 0;
      real best_v = 0;
      for (std::size_t c = 0; c < w.rows(); ++c) {
        const real v = dot(w.row(c), f.data()) + bias[c];
        if (c == 0 || v > best_v) {
          best = c;
          best_v = v;
        }
      }
      if (best == local.at(s.label)) ++correct;
    }
    result.final_train_accuracy = real(correct) / real(n);
  }

  result.prototypes = dual_prototypes(task.train, params, result.prompt);
  for (auto c : task.classes) {
    if (!result.prototypes.count(c)) {
      throw DataError("class " + std::to_string(c) + " of task " + std::to_string(task.task_id) + " has no samples");
    }
  }
  for (const auto& [cls, dp] : result.prototypes) {
    model.bank.insert(cls, task.task_id, fuse(dp.prompted, dp.frozen, model.bank.fusion()));
  }
  model.prompts.push_back(result.prompt);
  return result;
}

// ---------------------------------------------------------------------------
// Inference

struct ClassScore {
  std::size_t class_id = 0;
  std::size_t task_id = 0;
  real score = 0;
};

struct Prediction {
  std::size_t class_id = 0;
  std::size_t task_id = 0;
  real score = 0;
};

/// The frozen feature and one prompted feature per stored prompt (same order as model.prompts).
struct InputFeatures {
  Tensor frozen;
  std::vector<Tensor> prompted;
};

inline InputFeatures extract_features(std::span<const real> x, const EncoderParams& params, const PropModel& model,
                                      MacCounter* macs = nullptr) {
  InputFeatures f;
  f.frozen = encode(params, x, nullptr, macs);
  f.prompted.reserve(model.prompts.size());
  for (const auto& p : model.prompts) f.prompted.push_back(encode(params, x, &p, macs));
  return f;
}

/// Scores each class only against the fused feature of its own task's prompt.
inline std::vector<ClassScore> score_classes(const InputFeatures& f, const PropModel& model) {
  if (model.bank.empty()) throw ContractError("predict: prototype bank is empty");
  if (f.prompted.size() != model.prompts.size()) throw ContractError("predict: one prompted feature per prompt expected");
  std::vector<ClassScore> out;
  for (std::size_t i = 0; i < model.prompts.size(); ++i) {
    const std::size_t task = model.prompts[i].task_id;
    const Tensor h = fuse(f.prompted[i], f.frozen, model.bank.fusion());
    if (h.size() != model.bank.width()) throw ConfigError("predict: fused feature width differs from bank width");
    if (l2_norm(h.data()) == 0) throw ZeroNormError("predict: fused feature has zero norm");
    for (auto cls : model.bank.classes_of_task(task)) {
      out.push_back(ClassScore{cls, task, cosine(h.data(), model.bank.at(cls).vector.data())});
    }
  }
  return out;
}

/// Highest score wins; ties go to the lowest class id.
inline Prediction argmax_scores(std::span<const ClassScore> scores) {
  if (scores.empty()) throw ContractError("predict: nothing to score");
  const ClassScore* best = &scores[0];
  for (const auto& s : scores) {
    if (s.score > best->score || (s.score == best->score && s.class_id < best->class_id)) best = &s;
  }
  return Prediction{best->class_id, best->task_id, best->score};
}

inline Prediction predict_from_features(const InputFeatures& f, const PropModel& model) {
  const auto scores = score_classes(f, model);
  return argmax_scores(scores);
}

inline Prediction predict(std::span<const real> x, const EncoderParams& params, const PropModel& model,
                          MacCounter* macs = nullptr) {
  return predict_from_features(extract_features(x, params, model, macs), model);
}

}  // namespace prop
