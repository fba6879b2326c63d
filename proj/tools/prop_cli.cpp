// Command-line front end: pretraining, incremental runs, baselines, ablations,
// profiling and embedding export.
//
// Exit codes: 0 success, 2 configuration error, 3 protocol violation, 1 other failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "prop/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::string checkpoint;
  std::string data_dir;
  bool synthetic = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "flat key=value configuration file");
  cmd->add_option("--seed", o.seed, "random seed (overrides the config)");
  cmd->add_option("--out-dir", o.out_dir, "directory for outputs")->capture_default_str();
  cmd->add_option("--checkpoint", o.checkpoint, "PROPCKPT file with a frozen backbone (and optionally learner state)");
  cmd->add_option("--data-dir", o.data_dir, "dataset directory (manifest.tsv or data.csv)");
  cmd->add_flag("--synthetic", o.synthetic, "use the synthetic Gaussian stream");
}

prop::ExperimentConfig resolve(const CommonOptions& o) {
  prop::ExperimentConfig cfg;
  if (!o.config.empty()) cfg = prop::load_config(o.config);
  if (o.seed) cfg = cfg.with_seed(*o.seed);
  if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
  if (!o.data_dir.empty()) {
    cfg.data_dir = o.data_dir;
    cfg.synthetic = false;
  }
  if (o.synthetic) cfg.synthetic = true;
  return cfg;
}

prop::Workbench prepare_logged(const prop::ExperimentConfig& cfg) {
  prop::Workbench wb = prop::prepare(cfg);
  for (const auto& w : wb.stream.warnings) std::cerr << "warning: " << w << '\n';
  return wb;
}

// Learner state from the checkpoint when it carries one, otherwise a fresh run.
prop::PropRun learner_for(const prop::Workbench& wb, const prop::ExperimentConfig& cfg) {
  if (!cfg.checkpoint.empty()) {
    const auto ck = prop::load_checkpoint(cfg.checkpoint);
    if (ck.find("meta.fusion")) {
      prop::PropRun run;
      run.model = prop::model_from_checkpoint(ck);
      return run;
    }
  }
  return prop::run_prop(wb, cfg);
}

void print_summary(const std::string& what, const prop::AccuracyRecord& rec) {
  std::cout << what << ": final last=" << prop::format_real(rec.final_last())
            << " avg=" << prop::format_real(rec.final_avg()) << '\n';
}

int cmd_pretrain(const CommonOptions& o) {
  auto cfg = resolve(o);
  cfg.checkpoint.clear();
  const auto wb = prepare_logged(cfg);
  const fs::path out(o.out_dir);
  fs::create_directories(out);
  const std::string ck = prop::serialize_checkpoint(prop::to_checkpoint(wb.backbone));
  prop::write_file_atomic(out / "backbone.ckpt", ck);
  std::ostringstream m;
  m << "# prop run manifest\nkind=pretrain\n" << prop::config_echo(cfg);
  m << "base_train_accuracy=" << prop::format_real(wb.base_train_accuracy) << '\n';
  m << "backbone_hash=" << prop::hex64(wb.backbone.hash()) << '\n';
  m << "checkpoint_fnv1a=" << prop::hex64(prop::fnv1a(ck)) << '\n';
  prop::write_file_atomic(out / "manifest.txt", m.str());
  std::cout << "pretrain: base train accuracy=" << prop::format_real(wb.base_train_accuracy) << '\n';
  return 0;
}

int cmd_run(const CommonOptions& o) {
  const auto cfg = resolve(o);
  const auto res = prop::run_experiment(cfg, fs::path(o.out_dir));
  print_summary("prop", res.record);
  return 0;
}

int cmd_baseline(const CommonOptions& o, const std::string& which) {
  const auto cfg = resolve(o);
  const auto wb = prepare_logged(cfg);
  prop::RunArtifacts art;
  if (which == "finetune") {
    const auto res = prop::run_finetune(wb, cfg);
    auto ck = prop::to_checkpoint(res.params);
    ck.tensors.emplace_back("head.weight", res.head_weight);
    ck.tensors.emplace_back("head.bias", res.head_bias);
    std::vector<prop::real> classes(res.head_classes.begin(), res.head_classes.end());
    if (!classes.empty()) ck.tensors.emplace_back("head.classes", prop::Tensor::vector(classes));
    art = prop::make_artifacts("baseline_finetune", cfg, wb, res.record, ck);
    print_summary("finetune", res.record);
  } else if (which == "kv") {
    const auto prop_run = prop::run_prop(wb, cfg);
    const auto kv = prop::run_kv(wb, cfg, prop_run);
    art = prop::make_artifacts("baseline_kv", cfg, wb, kv.record,
                               prop::to_checkpoint(wb.backbone, &prop_run.model, &kv.keys));
    std::ostringstream extra;
    for (std::size_t t = 0; t < kv.retrieval_accuracy.size(); ++t) {
      extra << "retrieval_accuracy_step" << t << '=' << prop::format_real(kv.retrieval_accuracy[t]) << '\n';
    }
    extra << "agreement_with_prop=" << kv.agreements << '/' << kv.evaluated << '\n';
    art.manifest += extra.str();
    print_summary("kv", kv.record);
    std::cout << "kv: final retrieval accuracy=" << prop::format_real(kv.retrieval_accuracy.back()) << '\n';
  } else {
    const auto rec = prop::run_ncm(wb);
    art = prop::make_artifacts("baseline_ncm", cfg, wb, rec, prop::to_checkpoint(wb.backbone));
    print_summary("ncm", rec);
  }
  prop::write_artifacts(o.out_dir, art);
  return 0;
}

int cmd_ablate(const CommonOptions& o, const std::string& axis_name) {
  const auto cfg = resolve(o);
  const auto axis = prop::parse_axis(axis_name);
  const auto rows = prop::ablation_sweep(cfg, axis);
  const std::string csv = prop::ablation_csv(axis, rows);
  const fs::path out(o.out_dir);
  fs::create_directories(out);
  prop::write_file_atomic(out / "ablation.csv", csv);
  std::ostringstream m;
  m << "# prop run manifest\nkind=ablate_" << axis_name << '\n' << prop::config_echo(cfg);
  m << "ablation_fnv1a=" << prop::hex64(prop::fnv1a(csv)) << '\n';
  prop::write_file_atomic(out / "manifest.txt", m.str());
  std::cout << csv;
  return 0;
}

int cmd_profile(const CommonOptions& o) {
  const auto cfg = resolve(o);
  const auto wb = prepare_logged(cfg);
  const auto run = learner_for(wb, cfg);
  const auto rows = prop::profile_run(wb, run);
  const std::size_t lp = run.model.prompts.empty() ? 0 : run.model.prompts.front().length();
  const std::string csv = prop::profile_csv(rows, wb.backbone, lp);
  fs::create_directories(o.out_dir);
  prop::write_file_atomic(fs::path(o.out_dir) / "profile.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_export(const CommonOptions& o) {
  const auto cfg = resolve(o);
  const auto wb = prepare_logged(cfg);
  const auto run = learner_for(wb, cfg);
  const auto [samples, protos] = prop::embedding_inputs(wb, run.model);
  const auto points = prop::export_embeddings(samples, protos, fs::path(o.out_dir) / "embeddings.csv");
  std::cout << "export-embeddings: wrote " << points.size() << " points\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-prototype continual learning toolkit"};
  app.require_subcommand(1);

  CommonOptions opts;
  std::string baseline_kind, ablate_axis;

  auto* pretrain = app.add_subcommand("pretrain", "pretrain and freeze the backbone on the base classes");
  auto* run = app.add_subcommand("run", "run the prompt-prototype learner over the task stream");
  auto* baseline = app.add_subcommand("baseline", "run a comparison baseline");
  auto* ablate = app.add_subcommand("ablate", "sweep one setting over the configured seeds");
  auto* profile = app.add_subcommand("profile", "compare measured attention MACs with the cost model");
  auto* exportc = app.add_subcommand("export-embeddings", "write a 2-D PCA projection of features and prototypes");
  for (auto* c : {pretrain, run, baseline, ablate, profile, exportc}) add_common(c, opts);
  baseline->add_option("kind", baseline_kind, "finetune | kv | ncm")
      ->required()
      ->check(CLI::IsMember({"finetune", "kv", "ncm"}));
  ablate->add_option("axis", ablate_axis, "lambda | prompt_len | loss_components | fusion")
      ->required()
      ->check(CLI::IsMember({"lambda", "prompt_len", "loss_components", "fusion"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(opts);
    if (run->parsed()) return cmd_run(opts);
    if (baseline->parsed()) return cmd_baseline(opts, baseline_kind);
    if (ablate->parsed()) return cmd_ablate(opts, ablate_axis);
    if (profile->parsed()) return cmd_profile(opts);
    if (exportc->parsed()) return cmd_export(opts);
  } catch (const prop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const prop::ProtocolError& e) {
    std::cerr << "protocol violation: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
