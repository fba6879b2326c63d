// Acceptance suite: one PASS/FAIL line per criterion. Criterion 7 is soft and
// reports PASS or WARN without failing the run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "prop/experiment.hpp"

namespace {

using prop::real;
using prop::Tensor;
namespace ad = prop::ad;
using Clock = std::chrono::steady_clock;

// Tolerances and thresholds.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr std::size_t kGradSeeds = 24;
constexpr double kGradBudgetSeconds = 60;
constexpr double kProtoTol = 1e-10;
constexpr double kMacRelTol = 0.01;
constexpr double kForgettingBudgetSeconds = 300;
// Pilot (seeds 1993-1997, default config): ProP final Last 0.924/0.844/0.888/
// 0.966/0.940, finetune 0.276/0.304/0.244/0.272/0.318; margin about 63 points.
constexpr double kForgettingMargin = 0.20;
// Task-cluster offsets for the retrieval streams (class offsets 3). Pilot: at
// 30 two of five seeds still missed a few retrievals; at 60 and 100 none did.
constexpr real kSeparableTaskSeparation = 60;
constexpr real kOverlapTaskSeparation = 4;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

int hard_failures = 0;
double shared_setup_seconds = 0;  // building default_runs()

void report(int id, const std::string& name, const Outcome& o, bool soft = false) {
  const char* tag = o.pass ? "PASS" : (soft ? "WARN" : "FAIL");
  std::printf("[%s] criterion %d: %s -- %s\n", tag, id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass && !soft) ++hard_failures;
}

template <class F>
void guarded(int id, const std::string& name, F&& body, bool soft = false) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, name, o, soft);
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

// Shared state: default stream workbenches and learner runs, one per seed.
struct SeedRun {
  prop::Workbench wb;
  prop::PropRun run;
};

std::vector<SeedRun>& default_runs() {
  static std::vector<SeedRun> runs = [] {
    std::vector<SeedRun> out;
    const prop::ExperimentConfig base;
    for (auto s : base.seeds) {
      const auto cfg = base.with_seed(s);
      auto wb = prop::prepare(cfg);
      auto run = prop::run_prop(wb, cfg);
      out.push_back({std::move(wb), std::move(run)});
    }
    return out;
  }();
  return runs;
}

// --- 1 ------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_where;
  for (std::size_t seed = 0; seed < kGradSeeds; ++seed) {
    prop::EncoderConfig cfg;
    cfg.input_dim = 6;
    cfg.num_layers = 1 + seed % 2;
    cfg.model_dim = 8;
    cfg.seq_len = 4;
    cfg.ff_hidden = 16;
    cfg.prompt_mode = seed % 4 == 3 ? prop::PromptMode::prefix : prop::PromptMode::concat;
    cfg.prompt_sharing = seed % 5 == 4 ? prop::PromptSharing::shared : prop::PromptSharing::per_layer;
    auto bb = prop::EncoderParams::init(cfg, 7000 + seed);
    bb.frozen = true;
    std::mt19937_64 rng(seed);
    const std::size_t lp = 1 + seed % 5;
    const std::size_t classes = 2 + seed % 3;
    const auto prompt = prop::init_prompt(0, cfg, lp, real(0.2), rng);
    std::vector<std::size_t> ids(classes);
    for (std::size_t i = 0; i < classes; ++i) ids[i] = i;
    const auto head = prop::ClassifierHead::init(ids, cfg.model_dim, real(0.3), rng);
    const auto ds = prop::gen_synthetic(classes, 2, cfg.input_dim, 3, 100 + seed);
    std::vector<const prop::Sample*> batch;
    std::vector<std::size_t> labels;
    for (const auto& s : ds.samples) {
      batch.push_back(&s);
      labels.push_back(s.label);
    }
    prop::ParamMap params;
    for (std::size_t l = 0; l < prompt.blocks.size(); ++l) params.emplace(prompt.block_name(0, l), prompt.blocks[l]);
    params.emplace("head.weight", head.weight);
    params.emplace("head.bias", prop::detail::gaussian({classes}, real(0.1), rng));
    const real lambda = real(0.1);
    const prop::testing::LossBuilder build = [&](ad::Tape& tape, const prop::ParamMap& pm, bool trainable) {
      auto put = [&](const std::string& n) { return trainable ? tape.parameter(n, pm.at(n)) : tape.constant(pm.at(n)); };
      const auto enc = prop::bind(tape, bb, false);
      std::vector<ad::Var> pv;
      for (std::size_t l = 0; l < prompt.blocks.size(); ++l) pv.push_back(put(prompt.block_name(0, l)));
      return prop::build_batch_loss(tape, enc, pv, put("head.weight"), put("head.bias"), batch, labels, lambda, true)
          .total;
    };
    const auto r = prop::testing::check_gradients(build, params, real(kGradStep));
    if (r.params_checked != params.size()) return {false, "not every parameter was checked"};
    if (r.worst_rel_error > worst) {
      worst = r.worst_rel_error;
      worst_where = "seed " + std::to_string(seed) + " " + r.worst_param;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < kGradRelTol && secs < kGradBudgetSeconds,
          std::to_string(kGradSeeds) + " configs, worst rel err " + std::to_string(worst) + " (" + worst_where + "), " +
              fmt(secs, 1) + " s"};
}

// --- 2 ------------------------------------------------------------------------

Outcome prototype_oracle() {
  double worst = 0;
  std::size_t checked = 0;
  for (const auto& [wb, run] : default_runs()) {
    for (const auto& task : wb.stream.tasks) {
      const auto* p = run.model.prompt_for(task.task_id);
      for (auto cls : task.classes) {
        std::vector<double> sum(2 * wb.backbone.config.model_dim, 0.0);
        std::size_t n = 0;
        for (const auto& s : task.train) {
          if (s.label != cls) continue;
          const Tensor a = prop::encode(wb.backbone, s.x, p), b = prop::encode(wb.backbone, s.x, nullptr);
          for (std::size_t j = 0; j < a.size(); ++j) {
            sum[j] += a[j];
            sum[a.size() + j] += b[j];
          }
          ++n;
        }
        const Tensor& stored = run.model.bank.at(cls).vector;
        for (std::size_t j = 0; j < sum.size(); ++j) worst = std::max(worst, std::abs(stored[j] - sum[j] / double(n)));
        ++checked;
      }
    }
  }
  // single-sample classes: exact equality
  const auto& wb = default_runs().front().wb;
  prop::TaskData lone = wb.stream.tasks.front();
  lone.train = {lone.train.front()};
  for (const auto& s : wb.stream.tasks.front().train) {
    if (s.label != lone.train.front().label) {
      lone.train.push_back(s);
      break;
    }
  }
  prop::PropModel model(prop::Fusion::concatenate, wb.backbone.config.model_dim);
  prop::TrainConfig tc;
  tc.epochs = 2;
  const auto res = prop::train_task(lone, wb.backbone, tc, model);
  bool exact = true;
  for (const auto& s : lone.train) {
    const Tensor want = prop::fuse(prop::encode(wb.backbone, s.x, &res.prompt), prop::encode(wb.backbone, s.x, nullptr),
                                   prop::Fusion::concatenate);
    exact = exact && model.bank.at(s.label).vector == want;
  }
  return {worst <= kProtoTol && exact, std::to_string(checked) + " prototypes, max abs err " + std::to_string(worst) +
                                           ", single-sample classes exact: " + (exact ? "yes" : "no")};
}

// --- 3 ------------------------------------------------------------------------

Outcome shape_and_frozen_invariants() {
  const auto& wb = default_runs().front().wb;
  const auto& cfg = wb.backbone.config;
  std::mt19937_64 rng(3);
  bool shapes = true;
  for (std::size_t lp : {0, 1, 5, 20}) {
    const auto p = prop::init_prompt(0, cfg, lp, real(0.02), rng);
    shapes = shapes && prop::encode(wb.backbone, wb.stream.tasks[0].test[0].x, &p).shape() == prop::Shape{cfg.model_dim};
  }
  // replay a 5-task run, snapshotting state after every task
  const auto hash0 = wb.backbone.hash();
  prop::PropModel model(prop::Fusion::concatenate, cfg.model_dim);
  std::vector<prop::TaskPrompt> prompts;
  std::map<std::size_t, Tensor> protos;
  bool untouched = true;
  for (const auto& task : wb.stream.tasks) {
    prop::train_task(task, wb.backbone, prop::TrainConfig{}, model);
    for (std::size_t i = 0; i < prompts.size(); ++i) untouched = untouched && model.prompts[i] == prompts[i];
    for (const auto& [c, v] : protos) untouched = untouched && model.bank.at(c).vector == v;
    prompts.push_back(model.prompts.back());
    for (auto c : task.classes) protos.emplace(c, model.bank.at(c).vector);
  }
  const bool hash_ok = wb.backbone.hash() == hash0 && default_runs().front().run.backbone_hash_before ==
                                                          default_runs().front().run.backbone_hash_after;
  return {shapes && hash_ok && untouched && wb.stream.size() == 5,
          std::string("D-dim for L_p in {0,1,5,20}: ") + (shapes ? "yes" : "no") + ", backbone hash stable over " +
              std::to_string(wb.stream.size()) + " tasks: " + (hash_ok ? "yes" : "no") +
              ", old prompts/prototypes bit-identical: " + (untouched ? "yes" : "no")};
}

// --- 4 ------------------------------------------------------------------------

Outcome metric_identity() {
  double worst = 0;
  for (const auto& [wb, run] : default_runs()) {
    const auto& r = run.record;
    for (std::size_t t = 0; t < r.steps(); ++t) {
      long double s = 0;
      for (std::size_t i = 0; i <= t; ++i) s += r.last[i];
      worst = std::max(worst, std::abs(double(r.avg[t]) - double(s / (t + 1))));
    }
  }
  prop::ExperimentConfig one;
  one.init_classes = one.num_classes;
  const auto single = prop::run_experiment(one);
  const bool same = single.record.steps() == 1 && single.record.final_avg() == single.record.final_last();
  return {worst <= 1e-12 && same,
          "max |Avg_t - mean(Last_1..t)| = " + std::to_string(worst) + ", 1-task Avg == Last: " + (same ? "yes" : "no")};
}

// --- 5 ------------------------------------------------------------------------

Outcome forgetting_ordering() {
  const auto t0 = Clock::now();
  double prop_sum = 0, ft_sum = 0;
  bool ft_drops = true;
  std::string per_seed;
  const auto& runs = default_runs();
  for (const auto& [wb, run] : runs) {
    const auto ft = prop::run_finetune(wb, wb.config);
    prop_sum += run.record.final_last();
    ft_sum += ft.record.final_last();
    // accuracy on the first task right after it, then after the second task
    ft_drops = ft_drops && ft.record.per_task[1][0] < ft.record.per_task[0][0];
    per_seed += " " + fmt(run.record.final_last(), 3) + "/" + fmt(ft.record.final_last(), 3);
  }
  const double n = double(runs.size());
  const double margin = (prop_sum - ft_sum) / n;
  // learner runs were built for the shared cache; time them in as well
  const double secs = seconds_since(t0) + shared_setup_seconds;
  return {margin >= kForgettingMargin && ft_drops && secs < kForgettingBudgetSeconds,
          "ProP " + fmt(prop_sum / n) + " vs finetune " + fmt(ft_sum / n) + " (margin " + fmt(margin) +
              ", need >= " + fmt(kForgettingMargin, 2) + "), finetune task-1 drops after task 2: " +
              (ft_drops ? "yes" : "no") + ", " + fmt(secs, 1) + " s; per seed prop/ft:" + per_seed};
}

// --- 6 ------------------------------------------------------------------------

prop::ExperimentConfig clustered(real task_separation) {
  prop::ExperimentConfig c;
  c.separation = 3;
  c.task_separation = task_separation;
  return c;
}

Outcome retrieval_interference() {
  const std::vector<std::uint64_t> seeds = prop::ExperimentConfig{}.seeds;
  // separable: orthogonal, far-apart task clusters
  bool sep_ok = true;
  double sep_min_retrieval = 1;
  std::size_t sep_agree = 0, sep_total = 0;
  for (auto s : seeds) {
    const auto cfg = clustered(kSeparableTaskSeparation).with_seed(s);
    const auto wb = prop::prepare(cfg);
    const auto run = prop::run_prop(wb, cfg);
    const auto kv = prop::run_kv(wb, cfg, run);
    for (auto r : kv.retrieval_accuracy) sep_min_retrieval = std::min<double>(sep_min_retrieval, r);
    sep_agree += kv.agreements;
    sep_total += kv.evaluated;
  }
  sep_ok = sep_min_retrieval == 1.0 && sep_agree == sep_total;
  // overlapping: task clusters pulled close together
  double ov_retrieval = 0, kv_last = 0, prop_last = 0;
  for (auto s : seeds) {
    const auto cfg = clustered(kOverlapTaskSeparation).with_seed(s);
    const auto wb = prop::prepare(cfg);
    const auto run = prop::run_prop(wb, cfg);
    const auto kv = prop::run_kv(wb, cfg, run);
    ov_retrieval += kv.retrieval_accuracy.back();
    kv_last += kv.record.final_last();
    prop_last += run.record.final_last();
  }
  const double n = double(seeds.size());
  const bool ov_ok = ov_retrieval / n < 1.0 && kv_last <= prop_last;
  return {sep_ok && ov_ok, "separable: min retrieval " + fmt(sep_min_retrieval) + ", agreement " +
                               std::to_string(sep_agree) + "/" + std::to_string(sep_total) +
                               "; overlapping: retrieval " + fmt(ov_retrieval / n) + ", kv Last " + fmt(kv_last / n) +
                               " <= ProP Last " + fmt(prop_last / n)};
}

// --- 7 ------------------------------------------------------------------------

double mean_last_with(const std::function<void(prop::ExperimentConfig&)>& tweak) {
  double sum = 0;
  for (const auto& [wb, run] : default_runs()) {
    auto cfg = wb.config;
    tweak(cfg);
    sum += prop::run_prop(wb, cfg).record.final_last();
  }
  return sum / double(default_runs().size());
}

Outcome ablation_directionality() {
  double base = 0;
  for (const auto& r : default_runs()) base += r.run.record.final_last();
  base /= double(default_runs().size());  // CE+L2, L_p = 5, Concatenate
  const double ce_only = mean_last_with([](auto& c) { c.train.lambda = 0; });
  const double lp1 = mean_last_with([](auto& c) { c.train.prompt_len = 1; });
  std::map<std::string, double> fusion;
  for (auto f : {prop::Fusion::sum, prop::Fusion::average, prop::Fusion::max_pool}) {
    fusion[prop::to_string(f)] = mean_last_with([f](auto& c) { c.fusion = f; });
  }
  const bool l2_ok = base >= ce_only;
  const bool lp_ok = lp1 < base;
  bool fusion_ok = true;
  std::string fusion_detail;
  for (const auto& [name, v] : fusion) {
    fusion_ok = fusion_ok && base >= v;
    fusion_detail += " " + name + "=" + fmt(v);
  }
  auto mark = [](bool b) { return b ? "ok" : "warn"; };
  return {l2_ok && lp_ok && fusion_ok,
          std::string("CE+L2 ") + fmt(base) + " vs CE-only " + fmt(ce_only) + " [" + mark(l2_ok) + "]; L_p=1 " +
              fmt(lp1) + " vs L_p=5 " + fmt(base) + " [" + mark(lp_ok) + "]; Concatenate " + fmt(base) + " vs" +
              fusion_detail + " [" + mark(fusion_ok) + "]"};
}

// --- 8 ------------------------------------------------------------------------

Outcome cost_model() {
  const auto e = prop::flop_estimate({1, 1, 8, 5, 16, 1, 1});
  const bool hand = e.prop_similarity == 80 && e.prop_forward == 2704 && e.prop_total == 2784;
  double worst = 0;
  for (const auto& [wb, run] : default_runs()) {
    for (const auto& row : prop::profile_run(wb, run)) {
      const double f = double(row.formula.prop_forward);
      worst = std::max(worst, std::abs(double(row.measured.prompted_score) - f) / f);
    }
  }
  bool linear = true;
  prop::CostModel m{1, 12, 197, 5, 768, 10, 5};
  const auto one = prop::flop_estimate(m).prop_total;
  for (std::uint64_t t = 1; t <= 50; ++t) {
    m.tasks = t;
    linear = linear && prop::flop_estimate(m).prop_total == t * one;
  }
  return {hand && worst <= kMacRelTol && linear,
          std::string("T=1,L=1,L_h=8,L_p=5,D=16 -> ") + std::to_string(e.prop_total) +
              ", worst measured/formula rel diff " + std::to_string(worst) + ", linear in T: " +
              (linear ? "yes" : "no")};
}

// --- 9 ------------------------------------------------------------------------

Outcome reproducibility() {
  const prop::ExperimentConfig cfg;
  const auto a = prop::run_experiment(cfg);
  const auto b = prop::run_experiment(cfg);
  const bool bytes = a.artifacts.metrics_csv == b.artifacts.metrics_csv &&
                     a.artifacts.checkpoint == b.artifacts.checkpoint && a.artifacts.manifest == b.artifacts.manifest;
  // save -> load -> evaluate
  const auto ck = prop::parse_checkpoint(a.artifacts.checkpoint);
  const auto bb = prop::params_from_checkpoint(ck);
  const auto model = prop::model_from_checkpoint(ck);
  const auto& ref = default_runs().front();
  std::size_t same = 0, total = 0;
  for (const auto& t : ref.wb.stream.tasks)
    for (const auto& s : t.test) {
      same += prop::predict(s.x, bb, model).class_id == prop::predict(s.x, ref.wb.backbone, ref.run.model).class_id;
      ++total;
    }
  return {bytes && same == total, std::string("byte-identical artifacts: ") + (bytes ? "yes" : "no") +
                                      ", predictions unchanged after round trip: " + std::to_string(same) + "/" +
                                      std::to_string(total)};
}

// --- 10 -----------------------------------------------------------------------

Outcome cosine_properties() {
  const auto& [wb, run] = default_runs().front();
  std::size_t n = 0;
  bool bounded = true, invariant = true;
  prop::PropModel scaled(run.model.bank.fusion(), run.model.bank.model_dim());
  scaled.prompts = run.model.prompts;
  for (const auto& [c, e] : run.model.bank.entries()) scaled.bank.insert(c, e.task_id, prop::scaled(e.vector, real(13)));
  for (const auto& t : wb.stream.tasks)
    for (const auto& s : t.test) {
      auto f = prop::extract_features(s.x, wb.backbone, run.model);
      for (const auto& cs : prop::score_classes(f, run.model)) bounded = bounded && cs.score >= -1 && cs.score <= 1;
      const auto base = prop::predict_from_features(f, run.model).class_id;
      f.frozen = prop::scaled(f.frozen, real(0.003));
      for (auto& p : f.prompted) p = prop::scaled(p, real(0.003));
      invariant = invariant && prop::predict_from_features(f, scaled).class_id == base;
      ++n;
    }
  bool typed = false;
  try {
    prop::InputFeatures zero;
    zero.frozen = Tensor({wb.backbone.config.model_dim});
    zero.prompted.assign(run.model.prompts.size(), Tensor({wb.backbone.config.model_dim}));
    (void)prop::predict_from_features(zero, run.model);
  } catch (const prop::ZeroNormError&) {
    typed = true;
  }
  return {bounded && invariant && typed, std::to_string(n) + " inputs, scores in [-1,1]: " + (bounded ? "yes" : "no") +
                                             ", argmax scale-invariant: " + (invariant ? "yes" : "no") +
                                             ", zero-norm rejected with ZeroNormError: " + (typed ? "yes" : "no")};
}

}  // namespace

int main() {
  guarded(1, "gradient suite", gradient_suite);
  {
    const auto t0 = Clock::now();
    try {
      (void)default_runs();
    } catch (const std::exception& e) {
      std::printf("shared setup failed: %s\n", e.what());
    }
    shared_setup_seconds = seconds_since(t0);
  }
  guarded(2, "prototype oracle", prototype_oracle);
  guarded(3, "shape/frozen invariants", shape_and_frozen_invariants);
  guarded(4, "metric identity", metric_identity);
  guarded(5, "forgetting ordering", forgetting_ordering);
  guarded(6, "retrieval interference", retrieval_interference);
  guarded(7, "ablation directionality (soft)", ablation_directionality, true);
  guarded(8, "cost model", cost_model);
  guarded(9, "reproducibility", reproducibility);
  guarded(10, "cosine classifier properties", cosine_properties);
  std::printf("%s: %d hard criteria failed\n", hard_failures ? "FAILED" : "OK", hard_failures);
  return hard_failures ? 1 : 0;
}
