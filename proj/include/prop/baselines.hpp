#pragma once

// Reference competitors: key-value prompt retrieval, sequential finetuning of
// the whole backbone, and a frozen nearest-class-mean classifier.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "prop/autodiff.hpp"
#include "prop/dataset.hpp"
#include "prop/encoder.hpp"
#include "prop/errors.hpp"
#include "prop/metrics.hpp"
#include "prop/optimizer.hpp"
#include "prop/prop_core.hpp"

namespace prop {

/// Query used for key matching: the frozen, prompt-free feature.
inline Tensor compute_query(std::span<const real> x, const EncoderParams& params) {
  return encode(params, x, nullptr);
}

/// One learned key per trained task.
class KeyPool {
 public:
  void add(std::size_t task_id, Tensor key) {
    if (keys_.count(task_id)) throw ProtocolError("key for task " + std::to_string(task_id) + " already exists");
    keys_.emplace(task_id, std::move(key));
  }
  bool empty() const noexcept { return keys_.empty(); }
  std::size_t size() const noexcept { return keys_.size(); }
  const std::map<std::size_t, Tensor>& keys() const noexcept { return keys_; }
  const Tensor& at(std::size_t task_id) const { return keys_.at(task_id); }

  static std::string key_name(std::size_t task_id) { return "key." + std::to_string(task_id); }

 private:
  std::map<std::size_t, Tensor> keys_;
};

struct KeyTrainResult {
  Tensor key;
  std::vector<real> epoch_losses;  // mean 1 - cosine per epoch
};

/// Fits k minimizing mean(1 - cos(q_i, k)) over precomputed queries with the
/// SGD settings of `cfg`.
inline KeyTrainResult train_key_on_queries(std::span<const Tensor> queries, std::size_t task_id,
                                           const TrainConfig& cfg) {
  cfg.validate();
  if (queries.empty()) throw DataError("train_keys: task " + std::to_string(task_id) + " has no samples");
  const std::size_t d = queries.front().size();
  std::mt19937_64 rng(detail::task_seed(cfg.seed ^ 0x6b657973ull, task_id));
  ParamMap params{{"key", detail::gaussian({d}, cfg.prompt_init_std, rng)}};
  KeyTrainResult out;
  const std::size_t n = queries.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  if (cfg.epochs > 0) {
    SgdCosineOptimizer opt(cfg.epochs * per_epoch, cfg.lr, cfg.weight_decay);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      real epoch_loss = 0;
      for (std::size_t b = 0; b < per_epoch; ++b) {
        ad::Tape tape;
        const ad::Var key = tape.parameter("key", params.at("key"));
        std::vector<ad::Var> sims;
        const std::size_t end = std::min(n, (b + 1) * cfg.batch_size);
        for (std::size_t i = b * cfg.batch_size; i < end; ++i) {
          sims.push_back(ad::cosine(tape.constant(queries[order[i]]), key));
        }
        const real count = real(sims.size());
        const ad::Var loss = ad::affine(ad::sum(ad::concat_cols(sims)), real(-1) / count, real(1));
        epoch_loss += loss.value().item() * count;
        opt.step(params, tape.backward(loss));
      }
      out.epoch_losses.push_back(epoch_loss / real(n));
    }
  }
  out.key = params.at("key");
  return out;
}

inline KeyTrainResult train_keys(const TaskData& task, const EncoderParams& params, const TrainConfig& cfg) {
  std::vector<Tensor> queries;
  queries.reserve(task.train.size());
  for (const auto& s : task.train) queries.push_back(compute_query(s.x, params));
  return train_key_on_queries(queries, task.task_id, cfg);
}

/// Task whose key is most cosine-similar to the query; ties go to the lowest task id.
inline std::size_t select_prompt_by_key(const Tensor& query, const KeyPool& pool) {
  if (pool.empty()) throw ContractError("select_prompt_by_key: key pool is empty");
  if (l2_norm(query.data()) == 0) throw ZeroNormError("select_prompt_by_key: zero-norm query");
  std::size_t best = 0;
  real best_score = 0;
  bool first = true;
  for (const auto& [task, key] : pool.keys()) {
    const real s = cosine(query.data(), key.data());
    if (first || s > best_score) {
      best = task;
      best_score = s;
      first = false;
    }
  }
  return best;
}

struct KvPrediction {
  std::size_t class_id = 0;
  std::size_t selected_task = 0;
};

/// Retrieves one task by key, then classifies among that task's classes with
/// the same fused prototypes the prompt-prototype learner uses.
inline KvPrediction kv_predict(std::span<const real> x, const EncoderParams& params, const PropModel& model,
                               const KeyPool& pool) {
  const Tensor q = compute_query(x, params);
  const std::size_t task = select_prompt_by_key(q, pool);
  const TaskPrompt* prompt = model.prompt_for(task);
  if (!prompt) throw ContractError("kv_predict: no prompt for retrieved task " + std::to_string(task));
  const Tensor h = fuse(encode(params, x, prompt), q, model.bank.fusion());
  if (h.size() != model.bank.width()) throw ConfigError("kv_predict: fused feature width differs from bank width");
  std::vector<ClassScore> scores;
  for (auto cls : model.bank.classes_of_task(task)) {
    scores.push_back(ClassScore{cls, task, cosine(h.data(), model.bank.at(cls).vector.data())});
  }
  const Prediction p = argmax_scores(scores);
  return KvPrediction{p.class_id, task};
}

// ---------------------------------------------------------------------------
// Sequential finetuning

struct FinetuneResult {
  AccuracyRecord record;
  EncoderParams params;
  std::vector<std::size_t> head_classes;
  Tensor head_weight, head_bias;
};

namespace detail {

inline std::size_t head_argmax(const Tensor& f, const Tensor& w, const Tensor& b) {
  std::size_t best = 0;
  real best_v = 0;
  for (std::size_t c = 0; c < w.rows(); ++c) {
    const real v = dot(w.row(c), f.data()) + b[c];
    if (c == 0 || v > best_v) {
      best = c;
      best_v = v;
    }
  }
  return best;
}

}  // namespace detail

/// Trains backbone and a growing softmax head on each task in turn with plain
/// cross-entropy over every class seen so far, using only the current task's data.
inline FinetuneResult finetune_baseline(const TaskStream& stream, EncoderParams params, const TrainConfig& cfg) {
  cfg.validate();
  params.frozen = false;
  FinetuneResult res;
  const std::size_t d = params.config.model_dim;
  std::map<std::size_t, std::size_t> head_index;
  std::vector<real> w_flat, b_flat;

  for (std::size_t t = 0; t < stream.size(); ++t) {
    const TaskData& task = stream.tasks[t];
    std::mt19937_64 rng(detail::task_seed(cfg.seed ^ 0x66696e65ull, task.task_id));
    const Tensor fresh = detail::gaussian({task.classes.size(), d}, cfg.head_init_std, rng);
    for (std::size_t i = 0; i < task.classes.size(); ++i) {
      if (head_index.count(task.classes[i])) throw ProtocolError("finetune: class seen in two tasks");
      head_index[task.classes[i]] = res.head_classes.size();
      res.head_classes.push_back(task.classes[i]);
      w_flat.insert(w_flat.end(), fresh.row(i).begin(), fresh.row(i).end());
      b_flat.push_back(0);
    }
    ParamMap trainable = params.trainable_map();
    trainable.emplace("head.weight", Tensor::matrix(res.head_classes.size(), d, w_flat));
    trainable.emplace("head.bias", Tensor::vector(b_flat));

    const std::size_t n = task.train.size();
    if (n == 0) throw DataError("finetune: task " + std::to_string(t) + " has no training samples");
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
            const Sample& s = task.train[order[i]];
            feats.push_back(encode(enc, s.x, {}));
            labels.push_back(head_index.at(s.label));
          }
          const ad::Var stacked = feats.size() == 1 ? feats.front() : ad::concat_rows(feats);
          const ad::Var logits = ad::add_row_bias(ad::matmul(stacked, ad::transpose(hw)), hb);
          opt.step(trainable, tape.backward(ad::cross_entropy(logits, labels)));
        }
      }
    }
    params.assign(trainable);
    const Tensor& hw = trainable.at("head.weight");
    const Tensor& hb = trainable.at("head.bias");
    w_flat = hw.values();
    b_flat = hb.values();

    const StepAccuracy acc = evaluate_step(stream, t, [&](const Sample& s) {
      return res.head_classes[detail::head_argmax(encode(params, s.x, nullptr), hw, hb)];
    });
    res.record.push(acc.seen, acc.per_task);
  }
  res.params = std::move(params);
  res.head_weight = Tensor::matrix(res.head_classes.empty() ? 1 : res.head_classes.size(), d,
                                   w_flat.empty() ? std::vector<real>(d) : w_flat);
  res.head_bias = Tensor::vector(b_flat.empty() ? std::vector<real>{0} : b_flat);
  return res;
}

// ---------------------------------------------------------------------------
// Frozen nearest-class-mean

/// Cosine nearest-class-mean over frozen features, class means from training data.
inline AccuracyRecord ncm_baseline(const TaskStream& stream, const EncoderParams& params) {
  AccuracyRecord rec;
  std::map<std::size_t, Tensor> means;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    std::map<std::size_t, std::vector<Tensor>> feats;
    for (const auto& s : stream.tasks[t].train) feats[s.label].push_back(encode(params, s.x, nullptr));
    for (auto& [cls, f] : feats) means.emplace(cls, class_prototype(f));
    const StepAccuracy acc = evaluate_step(stream, t, [&](const Sample& s) {
      const Tensor f = encode(params, s.x, nullptr);
      std::size_t best = 0;
      real best_v = 0;
      bool first = true;
      for (const auto& [cls, m] : means) {
        const real v = cosine(f.data(), m.data());
        if (first || v > best_v) {
          best = cls;
          best_v = v;
          first = false;
        }
      }
      return best;
    });
    rec.push(acc.seen, acc.per_task);
  }
  return rec;
}

}  // namespace prop
