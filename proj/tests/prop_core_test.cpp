#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "gradcheck.hpp"
#include "prop/dataset.hpp"
#include "prop/encoder.hpp"
#include "prop/prop_core.hpp"

namespace {

using prop::real;
using prop::Tensor;
namespace ad = prop::ad;

prop::EncoderConfig tiny_config(std::size_t input_dim = 4) {
  prop::EncoderConfig c;
  c.input_dim = input_dim;
  c.num_layers = 1;
  c.num_heads = 2;
  c.model_dim = 8;
  c.seq_len = 3;
  c.ff_hidden = 8;
  return c;
}

prop::EncoderParams frozen_backbone(std::uint64_t seed, std::size_t input_dim = 4) {
  auto p = prop::EncoderParams::init(tiny_config(input_dim), seed);
  p.frozen = true;
  return p;
}

prop::TaskStream tiny_stream(std::size_t classes, std::size_t per_class, real separation, std::uint64_t seed,
                             std::size_t dim = 4) {
  const auto ds = prop::gen_synthetic(classes, per_class + 4, dim, separation, seed);
  return prop::make_task_stream(prop::split_per_class(ds, per_class), 2, 2, seed);
}

prop::TrainConfig quick_train(std::size_t epochs = 3) {
  prop::TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.prompt_len = 2;
  c.lr = real(0.05);
  return c;
}

// --- fusion -----------------------------------------------------------------

TEST(Fusion, StrategiesOnSmallVectors) {
  const Tensor a = Tensor::vector({1, -2, 3});
  const Tensor b = Tensor::vector({4, 5, -6});
  EXPECT_EQ(prop::fuse(a, b, prop::Fusion::concatenate), Tensor::vector({1, -2, 3, 4, 5, -6}));
  EXPECT_EQ(prop::fuse(a, b, prop::Fusion::sum), Tensor::vector({5, 3, -3}));
  EXPECT_EQ(prop::fuse(a, b, prop::Fusion::average), Tensor::vector({2.5, 1.5, -1.5}));
  EXPECT_EQ(prop::fuse(a, b, prop::Fusion::max_pool), Tensor::vector({4, 5, 3}));
}

TEST(Fusion, WidthsAndParsing) {
  EXPECT_EQ(prop::fused_dim(prop::Fusion::concatenate, 16), 32u);
  for (auto f : {prop::Fusion::sum, prop::Fusion::average, prop::Fusion::max_pool}) {
    EXPECT_EQ(prop::fused_dim(f, 16), 16u);
    EXPECT_EQ(prop::parse_fusion(prop::to_string(f)), f);
  }
  EXPECT_THROW(prop::parse_fusion("median"), prop::ConfigError);
  EXPECT_THROW(prop::fuse(Tensor::vector({1, 2}), Tensor::vector({1}), prop::Fusion::sum), prop::DimensionError);
}

// --- prototypes ---------------------------------------------------------------

TEST(Prototype, MatchesCompensatedMean) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0, 100);
  std::vector<Tensor> feats;
  for (int i = 0; i < 257; ++i) {
    std::vector<real> v(6);
    for (auto& x : v) x = nd(rng);
    feats.push_back(Tensor::vector(v));
  }
  const Tensor proto = prop::class_prototype(feats);
  for (std::size_t j = 0; j < 6; ++j) {
    // Neumaier-compensated sum in long double as the oracle.
    long double s = 0, comp = 0;
    for (const auto& f : feats) {
      const long double t = s + f[j];
      comp += std::fabs(s) >= std::fabs((long double)f[j]) ? (s - t) + f[j] : (f[j] - t) + s;
      s = t;
    }
    EXPECT_NEAR(proto[j], double((s + comp) / feats.size()), 1e-10);
  }
}

TEST(Prototype, SingleSampleIsExact) {
  const Tensor f = Tensor::vector({0.1, -0.7, 3e-9});
  const std::vector<Tensor> one{f};
  EXPECT_EQ(prop::class_prototype(one), f);
}

TEST(Prototype, EmptyClassRejected) {
  EXPECT_THROW(prop::class_prototype(std::span<const Tensor>{}), prop::DataError);
}

TEST(PrototypeBank, InsertRules) {
  prop::PrototypeBank bank(prop::Fusion::sum, 3);
  bank.insert(4, 0, Tensor::vector({1, 0, 0}));
  EXPECT_THROW(bank.insert(4, 1, Tensor::vector({0, 1, 0})), prop::ProtocolError);
  EXPECT_THROW(bank.insert(5, 1, Tensor::vector({0, 1, 0, 0})), prop::DimensionError);
  EXPECT_THROW(bank.insert(6, 1, Tensor::vector({0, 0, 0})), prop::ZeroNormError);
  bank.insert(2, 0, Tensor::vector({0, 1, 0}));
  EXPECT_EQ(bank.classes_of_task(0), (std::vector<std::size_t>{4, 2}));
  EXPECT_TRUE(bank.classes_of_task(7).empty());
}

// --- cosine scoring -----------------------------------------------------------

TEST(Cosine, KnownValue) {
  const std::vector<real> a{1, 0}, b{1, 1};
  EXPECT_NEAR(prop::cosine(a, b), 1 / std::numbers::sqrt2, 1e-15);
}

TEST(Cosine, ScoresBoundedAndZeroFeatureRejected) {
  std::mt19937_64 rng(4);
  std::vector<Tensor> protos;
  for (int i = 0; i < 30; ++i) protos.push_back(prop::detail::gaussian({5}, 3, rng));
  for (int trial = 0; trial < 30; ++trial) {
    for (real s : prop::similarity_scores(prop::detail::gaussian({5}, 10, rng), protos)) {
      EXPECT_GE(s, -1);
      EXPECT_LE(s, 1);
    }
  }
  EXPECT_THROW(prop::similarity_scores(Tensor({5}), protos), prop::ZeroNormError);
  // parallel vectors must not exceed 1 through rounding
  const Tensor v = Tensor::vector({0.1, 0.2, 0.3, 1e-8, 7});
  const Tensor w = prop::scaled(v, real(3.7));
  const std::vector<Tensor> one{w};
  EXPECT_LE(prop::similarity_scores(v, one)[0], 1);
}

TEST(Argmax, TiesGoToLowestClassId) {
  const std::vector<prop::ClassScore> s{{7, 1, 0.5}, {3, 0, 0.5}, {9, 2, 0.2}};
  EXPECT_EQ(prop::argmax_scores(s).class_id, 3u);
  const std::vector<prop::ClassScore> none;
  EXPECT_THROW(prop::argmax_scores(none), prop::ContractError);
}

// --- losses -------------------------------------------------------------------

TEST(Loss, CrossEntropyMatchesLogSumExp) {
  const Tensor logits = Tensor::from_rows({{1000, 1001, 999}, {-3, 0.5, 2}});
  const std::vector<std::size_t> labels{2, 0};
  double want = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    double m = -1e300;
    for (std::size_t j = 0; j < 3; ++j) m = std::max(m, double(logits(i, j)));
    double z = 0;
    for (std::size_t j = 0; j < 3; ++j) z += std::exp(double(logits(i, j)) - m);
    want += m + std::log(z) - double(logits(i, labels[i]));
  }
  EXPECT_NEAR(prop::ce_loss(logits, labels), want / 2, 1e-12);
}

TEST(Loss, PromptNormAndTotal) {
  prop::TaskPrompt p;
  p.blocks = {Tensor::from_rows({{3, 0}}), Tensor::from_rows({{0, 4}})};
  EXPECT_DOUBLE_EQ(prop::prompt_l2(p), 5);
  EXPECT_DOUBLE_EQ(prop::total_loss(2, 5, real(0.1)), 2.5);
}

// Analytic gradients of ce + lambda * ||p|| match finite differences for
// every prompt and head parameter.
TEST(Loss, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto cfg = tiny_config();
    cfg.num_layers = 1 + seed % 2;
    cfg.prompt_mode = seed % 3 == 0 ? prop::PromptMode::prefix : prop::PromptMode::concat;
    auto bb = prop::EncoderParams::init(cfg, 100 + seed);
    bb.frozen = true;
    std::mt19937_64 rng(seed);
    const auto prompt = prop::init_prompt(0, cfg, 1 + seed % 3, real(0.3), rng);
    const auto head = prop::ClassifierHead::init({0, 1, 2}, cfg.model_dim, real(0.3), rng);
    const auto ds = prop::gen_synthetic(3, 2, cfg.input_dim, 2, seed);
    std::vector<const prop::Sample*> batch;
    std::vector<std::size_t> labels;
    for (const auto& s : ds.samples) {
      batch.push_back(&s);
      labels.push_back(s.label);
    }
    prop::ParamMap params;
    for (std::size_t l = 0; l < prompt.blocks.size(); ++l) params.emplace(prompt.block_name(0, l), prompt.blocks[l]);
    params.emplace("head.weight", head.weight);
    params.emplace("head.bias", Tensor::vector({0.1, -0.2, 0.05}));
    const real lambda = real(0.05) * real(1 + seed % 4);

    const prop::testing::LossBuilder build = [&](ad::Tape& tape, const prop::ParamMap& pm, bool trainable) {
      auto put = [&](const std::string& n) { return trainable ? tape.parameter(n, pm.at(n)) : tape.constant(pm.at(n)); };
      const auto enc = prop::bind(tape, bb, false);
      std::vector<ad::Var> pv;
      for (std::size_t l = 0; l < prompt.blocks.size(); ++l) pv.push_back(put(prompt.block_name(0, l)));
      return prop::build_batch_loss(tape, enc, pv, put("head.weight"), put("head.bias"), batch, labels, lambda, true)
          .total;
    };
    const auto report = prop::testing::check_gradients(build, params);
    EXPECT_LT(report.worst_rel_error, 1e-4) << "seed " << seed << " param " << report.worst_param;
    EXPECT_EQ(report.params_checked, params.size());
  }
}

TEST(Loss, ReportSplitsTerms) {
  const auto bb = frozen_backbone(3);
  std::mt19937_64 rng(1);
  const auto prompt = prop::init_prompt(0, bb.config, 2, real(0.5), rng);
  const auto head = prop::ClassifierHead::init({0, 1}, 8, real(0.1), rng);
  const auto ds = prop::gen_synthetic(2, 2, 4, 3, 2);
  std::vector<const prop::Sample*> batch;
  std::vector<std::size_t> labels;
  for (const auto& s : ds.samples) {
    batch.push_back(&s);
    labels.push_back(s.label);
  }
  ad::Tape tape;
  const auto enc = prop::bind(tape, bb, false);
  const auto pv = prop::bind_prompt(tape, prompt, false);
  const auto loss = prop::build_batch_loss(tape, enc, pv, tape.constant(head.weight), tape.constant(head.bias), batch,
                                           labels, real(0.1), true);
  EXPECT_NEAR(loss.report.l2, prop::prompt_l2(prompt), 1e-12);
  EXPECT_NEAR(loss.report.total, loss.report.ce + real(0.1) * loss.report.l2, 1e-12);
  const auto no_l2 = prop::build_batch_loss(tape, enc, pv, tape.constant(head.weight), tape.constant(head.bias), batch,
                                            labels, real(0.1), false);
  EXPECT_EQ(no_l2.report.l2, 0);
  EXPECT_DOUBLE_EQ(no_l2.report.total, no_l2.report.ce);
}

// --- training -----------------------------------------------------------------

TEST(TrainTask, RequiresFrozenBackbone) {
  auto bb = prop::EncoderParams::init(tiny_config(), 1);
  const auto stream = tiny_stream(4, 6, 5, 1);
  prop::PropModel model(prop::Fusion::concatenate, 8);
  EXPECT_THROW(prop::train_task(stream.tasks[0], bb, quick_train(1), model), prop::ProtocolError);
}

TEST(TrainTask, RejectsRepeatedTaskAndOverlappingClasses) {
  const auto bb = frozen_backbone(1);
  const auto stream = tiny_stream(4, 6, 5, 1);
  prop::PropModel model(prop::Fusion::concatenate, 8);
  prop::train_task(stream.tasks[0], bb, quick_train(1), model);
  EXPECT_THROW(prop::train_task(stream.tasks[0], bb, quick_train(1), model), prop::ProtocolError);
  prop::TaskData clash = stream.tasks[1];
  clash.task_id = 9;
  clash.classes.push_back(stream.tasks[0].classes[0]);
  EXPECT_THROW(prop::train_task(clash, bb, quick_train(1), model), prop::ProtocolError);
}

TEST(TrainTask, RejectsSampleOutsideTaskAndEmptyTask) {
  const auto bb = frozen_backbone(1);
  auto stream = tiny_stream(4, 6, 5, 1);
  prop::PropModel model(prop::Fusion::concatenate, 8);
  prop::TaskData bad = stream.tasks[0];
  bad.train.push_back(stream.tasks[1].train.front());
  EXPECT_THROW(prop::train_task(bad, bb, quick_train(1), model), prop::ProtocolError);
  prop::TaskData empty = stream.tasks[0];
  empty.train.clear();
  EXPECT_THROW(prop::train_task(empty, bb, quick_train(1), model), prop::DataError);
  prop::PropModel wrong(prop::Fusion::concatenate, 16);
  EXPECT_THROW(prop::train_task(stream.tasks[0], bb, quick_train(1), wrong), prop::ConfigError);
}

TEST(TrainTask, PrototypesEqualBruteForceMeans) {
  const auto bb = frozen_backbone(2);
  auto stream = tiny_stream(4, 6, 5, 2);
  // make one class a single-sample class
  auto& t0 = stream.tasks[0];
  const std::size_t lone = t0.classes[1];
  bool kept = false;
  std::erase_if(t0.train, [&](const prop::Sample& s) {
    if (s.label != lone) return false;
    if (!kept) return !(kept = true);
    return true;
  });
  prop::PropModel model(prop::Fusion::concatenate, 8);
  const auto res = prop::train_task(t0, bb, quick_train(2), model);
  for (auto cls : t0.classes) {
    std::vector<double> sum(16, 0);
    std::size_t n = 0;
    for (const auto& s : t0.train) {
      if (s.label != cls) continue;
      const Tensor a = prop::encode(bb, s.x, &res.prompt), b = prop::encode(bb, s.x, nullptr);
      for (std::size_t j = 0; j < 8; ++j) {
        sum[j] += a[j];
        sum[8 + j] += b[j];
      }
      ++n;
    }
    const Tensor& stored = model.bank.at(cls).vector;
    for (std::size_t j = 0; j < 16; ++j) {
      if (cls == lone) {
        EXPECT_EQ(stored[j], sum[j]) << "single-sample class must be exact";
      } else {
        EXPECT_NEAR(stored[j], sum[j] / double(n), 1e-10);
      }
    }
  }
}

TEST(TrainTask, OldStateAndBackboneUntouchedByLaterTasks) {
  const auto bb = frozen_backbone(3);
  const auto stream = tiny_stream(6, 6, 5, 3);
  prop::PropModel model(prop::Fusion::concatenate, 8);
  const auto before = bb.hash();
  prop::train_task(stream.tasks[0], bb, quick_train(2), model);
  const prop::TaskPrompt p0 = model.prompts[0];
  const prop::PrototypeBank bank0 = model.bank;
  prop::train_task(stream.tasks[1], bb, quick_train(2), model);
  prop::train_task(stream.tasks[2], bb, quick_train(2), model);
  EXPECT_EQ(model.prompts[0], p0);
  for (const auto& [cls, e] : bank0.entries()) EXPECT_EQ(model.bank.at(cls), e);
  EXPECT_EQ(bb.hash(), before);
}

TEST(TrainTask, DeterministicGivenSeed) {
  const auto bb = frozen_backbone(3);
  const auto stream = tiny_stream(4, 6, 5, 3);
  prop::PropModel a(prop::Fusion::concatenate, 8), b(prop::Fusion::concatenate, 8);
  prop::train_task(stream.tasks[0], bb, quick_train(2), a);
  prop::train_task(stream.tasks[0], bb, quick_train(2), b);
  EXPECT_EQ(a.prompts[0], b.prompts[0]);
  EXPECT_TRUE(a.bank == b.bank);
}

TEST(TrainTask, LossDecreasesAndStepsCounted) {
  const auto bb = frozen_backbone(4);
  const auto stream = tiny_stream(4, 16, 4, 4);
  prop::PropModel model(prop::Fusion::concatenate, 8);
  auto cfg = quick_train(6);
  const auto res = prop::train_task(stream.tasks[0], bb, cfg, model);
  ASSERT_EQ(res.epoch_losses.size(), 6u);
  EXPECT_LT(res.epoch_losses.back().ce, res.epoch_losses.front().ce);
  EXPECT_EQ(res.steps, 6u * ((stream.tasks[0].train.size() + 7) / 8));
}

TEST(TrainTask, L2StepsLimitsThePenalty) {
  const auto bb = frozen_backbone(4);
  const auto stream = tiny_stream(4, 8, 4, 4);
  prop::PropModel model(prop::Fusion::concatenate, 8);
  auto cfg = quick_train(3);
  cfg.l2_steps = 2;  // 16 samples / batch 8 = 2 steps per epoch
  const auto res = prop::train_task(stream.tasks[0], bb, cfg, model);
  EXPECT_GT(res.epoch_losses[0].l2, 0);
  EXPECT_EQ(res.epoch_losses[1].l2, 0);
  EXPECT_EQ(res.epoch_losses[2].l2, 0);
}

TEST(TrainTask, ZeroEpochsKeepsInitialPrompt) {
  const auto bb = frozen_backbone(4);
  const auto stream = tiny_stream(4, 8, 4, 4);
  prop::PropModel a(prop::Fusion::concatenate, 8), b(prop::Fusion::concatenate, 8);
  const auto r0 = prop::train_task(stream.tasks[0], bb, quick_train(0), a);
  EXPECT_EQ(r0.steps, 0u);
  EXPECT_TRUE(r0.epoch_losses.empty());
  const auto r1 = prop::train_task(stream.tasks[0], bb, quick_train(1), b);
  EXPECT_FALSE(r0.prompt == r1.prompt);
}

// --- inference ----------------------------------------------------------------

prop::PropModel trained_model(const prop::EncoderParams& bb, const prop::TaskStream& stream, prop::Fusion f) {
  prop::PropModel model(f, bb.config.model_dim);
  for (const auto& t : stream.tasks) prop::train_task(t, bb, quick_train(2), model);
  return model;
}

TEST(Predict, MatchesBruteForceOverAllTaskClassScores) {
  const auto bb = frozen_backbone(5);
  const auto stream = tiny_stream(4, 10, 8, 5);
  const auto model = trained_model(bb, stream, prop::Fusion::concatenate);
  std::size_t correct = 0, total = 0;
  for (const auto& t : stream.tasks) {
    for (const auto& s : t.train) {
      // brute force: every (task, class) pair with the class's own task prompt
      std::size_t best = 0;
      double best_v = -2;
      for (const auto& [cls, e] : model.bank.entries()) {
        const auto* p = model.prompt_for(e.task_id);
        const Tensor h = prop::fuse(prop::encode(bb, s.x, p), prop::encode(bb, s.x, nullptr), prop::Fusion::concatenate);
        const double v = prop::cosine(h.data(), e.vector.data());
        if (v > best_v) {
          best_v = v;
          best = cls;
        }
      }
      const auto pred = prop::predict(s.x, bb, model);
      EXPECT_EQ(pred.class_id, best);
      EXPECT_EQ(pred.task_id, model.bank.at(best).task_id);
      correct += pred.class_id == s.label;
      ++total;
    }
  }
  EXPECT_GE(double(correct) / double(total), 0.95);
}

TEST(Predict, ArgmaxInvariantToPositiveRescaling) {
  const auto bb = frozen_backbone(6);
  const auto stream = tiny_stream(4, 6, 3, 6);
  for (auto f : {prop::Fusion::concatenate, prop::Fusion::sum, prop::Fusion::average, prop::Fusion::max_pool}) {
    const auto model = trained_model(bb, stream, f);
    prop::PropModel scaled_model(f, 8);
    scaled_model.prompts = model.prompts;
    for (const auto& [cls, e] : model.bank.entries()) {
      scaled_model.bank.insert(cls, e.task_id, prop::scaled(e.vector, real(37.5)));
    }
    for (const auto& s : stream.tasks[1].test) {
      auto feats = prop::extract_features(s.x, bb, model);
      const auto base = prop::predict_from_features(feats, model);
      feats.frozen = prop::scaled(feats.frozen, real(0.01));
      for (auto& p : feats.prompted) p = prop::scaled(p, real(0.01));
      EXPECT_EQ(prop::predict_from_features(feats, scaled_model).class_id, base.class_id);
    }
  }
}

TEST(Predict, ZeroFeatureRejected) {
  const auto bb = frozen_backbone(6);
  const auto stream = tiny_stream(2, 4, 3, 6);
  const auto model = trained_model(bb, stream, prop::Fusion::sum);
  prop::InputFeatures f;
  f.frozen = Tensor({8});
  f.prompted = {Tensor({8})};
  EXPECT_THROW(prop::predict_from_features(f, model), prop::ZeroNormError);
  EXPECT_THROW(prop::predict(stream.tasks[0].test[0].x, bb, prop::PropModel(prop::Fusion::sum, 8)),
               prop::ContractError);
}

TEST(Predict, ScoresStayInRange) {
  const auto bb = frozen_backbone(7);
  const auto stream = tiny_stream(4, 6, 3, 7);
  const auto model = trained_model(bb, stream, prop::Fusion::concatenate);
  for (const auto& t : stream.tasks)
    for (const auto& s : t.test)
      for (const auto& cs : prop::score_classes(prop::extract_features(s.x, bb, model), model)) {
        EXPECT_GE(cs.score, -1);
        EXPECT_LE(cs.score, 1);
      }
}

}  // namespace
