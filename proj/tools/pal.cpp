// pal: few-shot action recognition pipeline over pre-extracted frame features.
//
// Subcommands: gen-data (synthetic benchmark), pretrain (stage 1),
// meta-train (stage 2), eval (episodic test report), ablate (component grid).
// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pal/config.hpp"
#include "pal/data.hpp"
#include "pal/error.hpp"
#include "pal/rng.hpp"
#include "pal/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

// Fixed derivation of per-purpose random streams from the root seed, shared
// by all commands so that e.g. ablate's internal pretraining replays exactly
// what `pal pretrain` would do with the same seed.
constexpr std::uint64_t kStreamModelInit = 1;
constexpr std::uint64_t kStreamPretrain = 2;
constexpr std::uint64_t kStreamMetaTrain = 3;
constexpr std::uint64_t kStreamEval = 4;
constexpr std::uint64_t kStreamGenData = 5;  // + split index

const char* kTrainFile = "train.fsfe";
const char* kValFile = "val.fsfe";
const char* kTestFile = "test.fsfe";
const char* kPretrainedFile = "pretrained.fsck";
const char* kMetaTrainedFile = "metatrained.fsck";

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string data_dir;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_data) {
  cmd->add_option("--config", a.config_path, "run configuration file (sectioned key = value)");
  cmd->add_option("--seed", a.seed, "root seed; all randomness derives from it (default 0)");
  cmd->add_option("--out", a.out_dir, "output directory, created if missing")->required();
  if (with_data)
    cmd->add_option("--data", a.data_dir,
                    "directory holding train/val/test feature files (default: --out)");
}

pal::AppConfig load_config(const CommonArgs& a) {
  return a.config_path.empty() ? pal::AppConfig{} : pal::AppConfig::load(a.config_path);
}

std::string data_dir(const CommonArgs& a) { return a.data_dir.empty() ? a.out_dir : a.data_dir; }

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

pal::Dataset load_split(const std::string& dir, const char* name) {
  const std::string path = join(dir, name);
  if (!fs::exists(path))
    throw pal::ConfigError("missing feature file '" + path + "' (run gen-data first?)");
  return pal::load_features(path);
}

void write_manifest(const std::string& command, const CommonArgs& a,
                    const std::vector<std::uint64_t>& seeds, const pal::AppConfig& cfg,
                    std::vector<std::string> outputs) {
  fs::create_directories(a.out_dir);
  pal::RunManifest m;
  m.command = command;
  m.seeds = seeds;
  m.config = cfg;
  m.outputs = std::move(outputs);
  pal::write_json(m.to_json(), join(a.out_dir, command + "-manifest.json"));
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016" PRIx64, v);
  return buf;
}

// Config/checkpoint coherence: the fingerprint stored at save time must match
// the one the current config would produce for this model's architecture.
void check_fingerprint(const pal::LoadedCheckpoint& ckpt, const pal::TrainConfig& cfg,
                       const std::string& path) {
  const std::uint64_t expected =
      pal::model_fingerprint(ckpt.model.d_raw, ckpt.model.clf.class_count(), cfg);
  if (ckpt.fingerprint != expected)
    throw pal::ConfigError("checkpoint '" + path + "' carries fingerprint " +
                           hex64(ckpt.fingerprint) + " but the current config implies " +
                           hex64(expected) + "; model settings differ");
}

void check_feature_dim(const pal::PalModel& model, const pal::Dataset& ds) {
  if (model.d_raw != ds.feature_dim())
    throw pal::ConfigError("model expects " + std::to_string(model.d_raw) +
                           "-dim features but dataset '" + std::string(pal::split_name(ds.split())) +
                           "' provides " + std::to_string(ds.feature_dim()));
}

pal::EvalOptions eval_options(const pal::AppConfig& cfg) {
  pal::EvalOptions opt;
  opt.way = cfg.train.way;
  opt.shot = cfg.train.shot;
  opt.query = cfg.train.query;
  opt.segments = cfg.train.segments;
  opt.episodes = cfg.eval_episodes;
  opt.hal = cfg.train.hal;
  opt.lambda = cfg.train.lambda;
  opt.mode = cfg.train.pcc_mode;
  opt.scale = cfg.train.scale;
  return opt;
}

json report_json(const pal::EvalReport& r, const pal::EvalOptions& opt) {
  json j;
  j["episodes"] = r.episodes;
  j["way"] = opt.way;
  j["shot"] = opt.shot;
  j["query_per_class"] = opt.query;
  j["accuracy"] = r.accuracy;
  j["ci95"] = r.ci_half_width;
  j["loss_meta"] = r.loss_meta;
  j["loss_pcc"] = r.loss_pcc;
  j["separation"] = {{"intra_spread_pre", r.intra_spread_pre},
                     {"intra_spread_post", r.intra_spread_post},
                     {"inter_proto_cos_pre", r.inter_proto_cos_pre},
                     {"inter_proto_cos_post", r.inter_proto_cos_post}};
  return j;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonArgs& args) {
  const pal::AppConfig cfg = load_config(args);
  write_manifest("gen-data", args, {args.seed}, cfg, {kTrainFile, kValFile, kTestFile});

  const pal::Rng root(args.seed);
  const pal::Split splits[] = {pal::Split::MetaTrain, pal::Split::MetaVal, pal::Split::MetaTest};
  const char* names[] = {kTrainFile, kValFile, kTestFile};

  json summary;
  std::vector<pal::Dataset> produced;
  for (std::size_t i = 0; i < 3; ++i) {
    pal::Rng rng = root.child(kStreamGenData + i);
    const pal::SyntheticSpec spec = cfg.split_spec(splits[i]);
    pal::SyntheticResult res = pal::generate_synthetic(spec, rng);
    for (const auto& prev : produced) pal::ensure_disjoint_classes(prev, res.dataset);
    const std::string path = join(args.out_dir, names[i]);
    pal::save_features(res.dataset, path);
    summary[pal::split_name(splits[i])] = {{"file", names[i]},
                                           {"classes", res.dataset.classes().size()},
                                           {"samples", res.dataset.samples().size()},
                                           {"outlier_ids", res.outlier_ids}};
    produced.push_back(std::move(res.dataset));
  }
  pal::write_json(summary, join(args.out_dir, "gen-data-summary.json"));
  std::cout << "wrote " << kTrainFile << ", " << kValFile << ", " << kTestFile << " to "
            << args.out_dir << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

int cmd_pretrain(const CommonArgs& args) {
  const pal::AppConfig cfg = load_config(args);
  write_manifest("pretrain", args, {args.seed}, cfg, {kPretrainedFile, "pretrain-log.csv"});

  const pal::Dataset ds = load_split(data_dir(args), kTrainFile);
  const pal::Rng root(args.seed);
  pal::Rng init = root.child(kStreamModelInit);
  pal::PalModel model = pal::create_model(ds.feature_dim(), ds.classes().size(), cfg.train, init);
  pal::Rng loop = root.child(kStreamPretrain);
  const auto log = pal::pretrain(model, ds, cfg.train, loop);
  pal::write_training_log(log, join(args.out_dir, "pretrain-log.csv"));

  const std::uint64_t fp =
      pal::model_fingerprint(model.d_raw, model.clf.class_count(), cfg.train);
  pal::save_checkpoint(model, join(args.out_dir, kPretrainedFile), pal::kStagePretrained, fp);

  json summary;
  summary["checkpoint"] = kPretrainedFile;
  summary["fingerprint"] = hex64(fp);
  summary["model_hash"] = hex64(pal::model_hash(model));
  summary["epochs"] = log.size();
  if (!log.empty()) {
    summary["final_loss"] = log.back().loss_total;
    summary["final_train_accuracy"] = log.back().val_acc;
  }
  pal::write_json(summary, join(args.out_dir, "pretrain-summary.json"));
  std::cout << "pretrained " << log.size() << " epochs -> " << join(args.out_dir, kPretrainedFile)
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// meta-train
// ---------------------------------------------------------------------------

struct MetaArgs {
  std::string checkpoint;
  bool from_scratch = false;
  std::optional<std::size_t> epochs;
};

int cmd_meta_train(const CommonArgs& args, const MetaArgs& meta) {
  pal::AppConfig cfg = load_config(args);
  if (meta.epochs) {
    cfg.train.stage2.epochs = *meta.epochs;
    // a shorter run may orphan configured decay points; drop the ones beyond it
    auto& pts = cfg.train.stage2.decay_epochs;
    std::erase_if(pts, [&](std::size_t p) { return p >= cfg.train.stage2.epochs; });
  }
  write_manifest("meta-train", args, {args.seed}, cfg, {kMetaTrainedFile, "metatrain-log.csv"});

  const pal::Dataset ds_train = load_split(data_dir(args), kTrainFile);
  std::optional<pal::Dataset> ds_val;
  if (fs::exists(join(data_dir(args), kValFile)))
    ds_val = pal::load_features(join(data_dir(args), kValFile));

  const pal::Rng root(args.seed);
  pal::PalModel model;
  if (meta.from_scratch) {
    pal::Rng init = root.child(kStreamModelInit);
    model = pal::create_model(ds_train.feature_dim(), ds_train.classes().size(), cfg.train, init);
  } else {
    const std::string ckpt_path =
        meta.checkpoint.empty() ? join(data_dir(args), kPretrainedFile) : meta.checkpoint;
    if (!fs::exists(ckpt_path))
      throw pal::ConfigError("checkpoint '" + ckpt_path +
                             "' not found (pretrain first, or pass --from-scratch)");
    pal::LoadedCheckpoint ckpt = pal::load_checkpoint(ckpt_path);
    check_fingerprint(ckpt, cfg.train, ckpt_path);
    model = std::move(ckpt.model);
  }
  check_feature_dim(model, ds_train);

  pal::Rng loop = root.child(kStreamMetaTrain);
  const auto log = pal::meta_train(model, ds_train, ds_val ? &*ds_val : nullptr, cfg.train, loop,
                                   /*train_hal=*/cfg.train.hal);
  pal::write_training_log(log, join(args.out_dir, "metatrain-log.csv"));

  const std::uint64_t fp =
      pal::model_fingerprint(model.d_raw, model.clf.class_count(), cfg.train);
  pal::save_checkpoint(model, join(args.out_dir, kMetaTrainedFile), pal::kStageMetaTrained, fp);

  json summary;
  summary["checkpoint"] = kMetaTrainedFile;
  summary["fingerprint"] = hex64(fp);
  summary["model_hash"] = hex64(pal::model_hash(model));
  summary["epochs"] = log.size();
  double best_val = -1.0;
  for (const auto& row : log) best_val = std::max(best_val, row.val_acc);
  if (best_val >= 0.0) summary["best_val_accuracy"] = best_val;
  if (!log.empty()) summary["final_loss"] = log.back().loss_total;
  pal::write_json(summary, join(args.out_dir, "metatrain-summary.json"));
  std::cout << "meta-trained " << log.size() << " epochs -> "
            << join(args.out_dir, kMetaTrainedFile) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::size_t> shots, ways, episodes;
};

int cmd_eval(const CommonArgs& args, const EvalArgs& ev) {
  const pal::AppConfig cfg = load_config(args);
  write_manifest("eval", args, {args.seed}, cfg, {"eval.json"});

  const pal::Dataset ds = load_split(data_dir(args), kTestFile);
  if (ds.split() != pal::Split::MetaTest)
    throw pal::ConfigError(std::string("evaluation expects the meta-test split, got ") +
                           pal::split_name(ds.split()));

  const std::string ckpt_path =
      ev.checkpoint.empty() ? join(data_dir(args), kMetaTrainedFile) : ev.checkpoint;
  if (!fs::exists(ckpt_path))
    throw pal::ConfigError("checkpoint '" + ckpt_path + "' not found");
  pal::LoadedCheckpoint ckpt = pal::load_checkpoint(ckpt_path);
  check_fingerprint(ckpt, cfg.train, ckpt_path);
  check_feature_dim(ckpt.model, ds);

  pal::EvalOptions opt = eval_options(cfg);
  if (ev.shots) opt.shot = *ev.shots;
  if (ev.ways) opt.way = *ev.ways;
  if (ev.episodes) opt.episodes = *ev.episodes;

  const pal::Rng root(args.seed);
  const pal::EvalReport report = pal::evaluate(ckpt.model, ds, opt, root.child(kStreamEval));

  json j = report_json(report, opt);
  j["checkpoint"] = ckpt_path;
  j["checkpoint_stage"] = ckpt.stage;
  pal::write_json(j, join(args.out_dir, "eval.json"));
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct CellResult {
  std::vector<double> accs;  // one per seed
};

struct CellStats {
  double mean = 0.0, ci = 0.0;
};

CellStats cell_stats(const std::vector<double>& accs) {
  CellStats st;
  for (double a : accs) st.mean += a;
  st.mean /= static_cast<double>(accs.size());
  if (accs.size() > 1) {
    double var = 0.0;
    for (double a : accs) var += (a - st.mean) * (a - st.mean);
    var /= static_cast<double>(accs.size() - 1);
    st.ci = 1.96 * std::sqrt(var / static_cast<double>(accs.size()));
  }
  return st;
}

int cmd_ablate(const CommonArgs& args) {
  const pal::AppConfig cfg = load_config(args);
  write_manifest("ablate", args, [&] {
    std::vector<std::uint64_t> seeds;
    for (std::size_t s = 0; s < cfg.ablate_seeds; ++s) seeds.push_back(args.seed + s);
    return seeds;
  }(), cfg, {"ablation.csv"});

  const pal::Dataset ds_train = load_split(data_dir(args), kTrainFile);
  std::optional<pal::Dataset> ds_val;
  if (fs::exists(join(data_dir(args), kValFile)))
    ds_val = pal::load_features(join(data_dir(args), kValFile));
  const pal::Dataset ds_test = load_split(data_dir(args), kTestFile);
  if (ds_test.split() != pal::Split::MetaTest)
    throw pal::ConfigError("ablation expects a meta-test split in test.fsfe");

  const char* cell_names[] = {"pretrained", "hal", "pcl", "hal_pcl"};
  const std::size_t shots[] = {1, 5};
  // results[cell][shot_index] -> per-seed accuracies
  CellResult results[4][2];

  for (std::size_t s = 0; s < cfg.ablate_seeds; ++s) {
    const pal::Rng root(args.seed + s);

    // one pretrained starting point shared by every cell of this seed
    pal::Rng init = root.child(kStreamModelInit);
    pal::PalModel pre =
        pal::create_model(ds_train.feature_dim(), ds_train.classes().size(), cfg.train, init);
    pal::Rng loop = root.child(kStreamPretrain);
    pal::pretrain(pre, ds_train, cfg.train, loop);

    for (std::size_t si = 0; si < 2; ++si) {
      pal::EvalOptions opt = eval_options(cfg);
      opt.shot = shots[si];
      opt.episodes = cfg.ablate_episodes;

      auto run_cell = [&](bool hal, double lambda) {
        pal::TrainConfig tc = cfg.train;
        tc.shot = shots[si];
        tc.hal = hal;
        tc.lambda = lambda;
        pal::PalModel m = pre;
        pal::Rng mt = root.child(kStreamMetaTrain);
        pal::meta_train(m, ds_train, ds_val ? &*ds_val : nullptr, tc, mt, /*train_hal=*/hal);
        pal::EvalOptions o = opt;
        o.hal = hal;
        return pal::evaluate(m, ds_test, o, root.child(kStreamEval)).accuracy;
      };

      pal::EvalOptions base_opt = opt;
      base_opt.hal = false;  // attention is untrained at this point
      results[0][si].accs.push_back(
          pal::evaluate(pre, ds_test, base_opt, root.child(kStreamEval)).accuracy);
      results[1][si].accs.push_back(run_cell(/*hal=*/true, /*lambda=*/0.0));
      results[2][si].accs.push_back(run_cell(/*hal=*/false, cfg.train.lambda));
      results[3][si].accs.push_back(run_cell(/*hal=*/true, cfg.train.lambda));
    }
    std::cout << "seed " << args.seed + s << " done\n";
  }

  std::ofstream csv(join(args.out_dir, "ablation.csv"));
  if (!csv) throw pal::Error("cannot open ablation.csv for writing");
  csv << "cell,shot,seeds,mean_accuracy,ci95\n";
  json summary;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t si = 0; si < 2; ++si) {
      const CellStats st = cell_stats(results[c][si].accs);
      char line[160];
      std::snprintf(line, sizeof(line), "%s,%zu,%zu,%.10g,%.10g\n", cell_names[c], shots[si],
                    cfg.ablate_seeds, st.mean, st.ci);
      csv << line;
      summary[cell_names[c]][si == 0 ? "1-shot" : "5-shot"] = {
          {"per_seed", results[c][si].accs}, {"mean", st.mean}, {"ci95", st.ci}};
    }
  csv.close();
  pal::write_json(summary, join(args.out_dir, "ablate-summary.json"));
  std::cout << "ablation grid written to " << join(args.out_dir, "ablation.csv") << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot action recognition over pre-extracted features"};
  app.require_subcommand(1);

  CommonArgs gen_args, pre_args, meta_args_c, eval_args_c, abl_args;
  MetaArgs meta_extra;
  EvalArgs eval_extra;

  CLI::App* gen = app.add_subcommand("gen-data", "synthesize train/val/test feature files");
  add_common(gen, gen_args, /*with_data=*/false);

  CLI::App* pre = app.add_subcommand("pretrain", "stage 1: whole-classifier pretraining");
  add_common(pre, pre_args, /*with_data=*/true);

  CLI::App* meta = app.add_subcommand("meta-train", "stage 2: episodic meta-training");
  add_common(meta, meta_args_c, /*with_data=*/true);
  meta->add_option("--checkpoint", meta_extra.checkpoint,
                   "pretrained checkpoint (default: <data>/pretrained.fsck)");
  meta->add_flag("--from-scratch", meta_extra.from_scratch,
                 "skip the pretrained checkpoint and start from random weights");
  meta->add_option("--epochs", meta_extra.epochs, "override stage-2 epoch count");

  CLI::App* eval = app.add_subcommand("eval", "episodic evaluation on the meta-test split");
  add_common(eval, eval_args_c, /*with_data=*/true);
  eval->add_option("--checkpoint", eval_extra.checkpoint,
                   "checkpoint to evaluate (default: <data>/metatrained.fsck)");
  eval->add_option("--shots", eval_extra.shots, "support examples per class (typically 1 or 5)");
  eval->add_option("--ways", eval_extra.ways, "classes per episode");
  eval->add_option("--episodes", eval_extra.episodes, "number of test episodes");

  CLI::App* abl = app.add_subcommand("ablate", "component grid: {none, HAL, PCL, HAL+PCL} x {1,5}-shot");
  add_common(abl, abl_args, /*with_data=*/true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or error text
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto guarded = [](auto&& body) -> int {
    try {
      return body();
    } catch (const pal::NumericError& e) {
      std::cerr << "numerical failure: " << e.what() << "\n";
      return kExitNumeric;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitUsage;
    }
  };

  if (gen->parsed()) return guarded([&] { return cmd_gen_data(gen_args); });
  if (pre->parsed()) return guarded([&] { return cmd_pretrain(pre_args); });
  if (meta->parsed()) return guarded([&] { return cmd_meta_train(meta_args_c, meta_extra); });
  if (eval->parsed()) return guarded([&] { return cmd_eval(eval_args_c, eval_extra); });
  if (abl->parsed()) return guarded([&] { return cmd_ablate(abl_args); });
  return kExitUsage;  // unreachable: require_subcommand(1)
}
