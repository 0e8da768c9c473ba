// fsct: train, evaluate, and inspect few-shot cosine-transformer classifiers.
//
// Subcommands:
//   train      fit a model episodically and write a checkpoint
//   eval       report mean accuracy +- CI on the test split of a checkpoint
//   heatmap    export the category-aggregated attention map of one episode
//   gradcheck  compare reverse-mode gradients against finite differences
//   compare    train both attention modes over paired seeds and tabulate
//
// Everything printed to stdout is deterministic for a given command line;
// wall-clock timings go to stderr.

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fsct/checkpoint.hpp"
#include "fsct/dataset_io.hpp"
#include "fsct/export.hpp"
#include "fsct/gradcheck.hpp"
#include "fsct/harness.hpp"
#include "fsct/model.hpp"

namespace {

using namespace fsct;

struct DataFlags {
  std::string manifest;
  std::string synthetic_spec;
};

void add_data_flags(CLI::App* cmd, DataFlags& flags) {
  auto* dataset = cmd->add_option("--dataset", flags.manifest, "Dataset manifest (JSON)");
  auto* spec = cmd->add_option("--synthetic-spec", flags.synthetic_spec,
                               "Synthetic generator parameters (JSON)");
  dataset->excludes(spec);
  spec->excludes(dataset);
}

// Loads the dataset and returns a JSON record of where it came from, so a
// checkpoint can later rebuild the same data for eval/heatmap.
SplitDataset load_from_flags(const DataFlags& flags, json& source) {
  if (!flags.manifest.empty()) {
    source["kind"] = "manifest";
    source["path"] = std::filesystem::absolute(flags.manifest).string();
    return load_dataset(flags.manifest);
  }
  if (!flags.synthetic_spec.empty()) {
    SyntheticSpec spec = synthetic_spec_from_json(read_json_file(flags.synthetic_spec));
    source["kind"] = "synthetic";
    source["spec"] = synthetic_spec_to_json(spec);
    return generate_synthetic(spec);
  }
  throw CLI::ValidationError("either --dataset or --synthetic-spec is required");
}

SplitDataset load_from_metadata(const json& metadata) {
  if (!metadata.contains("dataset"))
    throw std::runtime_error("checkpoint metadata carries no dataset source");
  const json& src = metadata.at("dataset");
  const std::string kind = src.at("kind").get<std::string>();
  if (kind == "manifest") return load_dataset(src.at("path").get<std::string>());
  if (kind == "synthetic")
    return generate_synthetic(synthetic_spec_from_json(src.at("spec")));
  throw std::runtime_error("unknown dataset source kind '" + kind + "'");
}

struct TrainFlags {
  DataFlags data;
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 16;
  std::size_t epochs = 5;
  std::size_t episodes = 50;
  std::string attention = "cosine";
  std::string prototype = "learnable";
  std::string backbone = "identity";
  std::uint64_t seed = 0;
  std::string out = "model.ckpt";
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  add_data_flags(cmd, f.data);
  cmd->add_option("--ways", f.ways, "Categories per episode");
  cmd->add_option("--shots", f.shots, "Support samples per category");
  cmd->add_option("--queries-per-class", f.queries, "Query samples per category");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--episodes-per-epoch", f.episodes, "Episodes per epoch");
  cmd->add_option("--attention", f.attention, "Attention map: cosine or softmax")
      ->check(CLI::IsMember({"cosine", "softmax"}));
  cmd->add_option("--prototype", f.prototype, "Prototype weighting: learnable or uniform")
      ->check(CLI::IsMember({"learnable", "uniform"}));
  cmd->add_option("--backbone", f.backbone, "Feature extractor: identity, conv4, or conv6")
      ->check(CLI::IsMember({"identity", "conv4", "conv6"}));
  cmd->add_option("--seed", f.seed, "Seed for init, episodes, and validation");
}

ModelConfig model_config_from_flags(const TrainFlags& f, const SampleDims& dims) {
  ModelConfig cfg;
  cfg.ways = f.ways;
  cfg.shots = f.shots;
  cfg.queries_per_cat = f.queries;
  cfg.input = dims;
  cfg.backbone = parse_backbone_kind(f.backbone);
  cfg.attention = parse_attention_mode(f.attention);
  cfg.prototype = parse_prototype_mode(f.prototype);
  if (cfg.backbone == BackboneKind::kIdentity && dims.numel() % cfg.num_heads != 0)
    cfg.num_heads = 1;  // keep odd feature widths usable out of the box
  return cfg;
}

TrainResult run_training(const TrainFlags& f, const SplitDataset& ds, ModelState& state,
                         AdamW& opt) {
  TrainConfig tc;
  tc.epochs = f.epochs;
  tc.episodes_per_epoch = f.episodes;
  tc.seed = f.seed;
  TrainResult res = train(ds, tc, state, opt);
  for (const EpochLog& log : res.log) {
    std::printf("epoch %zu train_loss %.6f val_acc %.2f\n", log.epoch, log.train_loss_mean,
                log.val_accuracy_mean);
    std::fprintf(stderr, "epoch %zu wall_ms %.1f\n", log.epoch, log.wall_ms);
  }
  return res;
}

int cmd_train(const TrainFlags& f) {
  json source;
  SplitDataset ds = load_from_flags(f.data, source);
  Rng init(derive_seed(f.seed, Stream::kInit));
  ModelConfig cfg = model_config_from_flags(f, ds.dims);
  ModelState state(cfg, init);
  AdamW opt;
  TrainResult res = run_training(f, ds, state, opt);
  if (res.best_epoch > 0)
    std::printf("best epoch %zu val_acc %.2f\n", res.best_epoch, res.best_val_accuracy);
  json meta;
  meta["dataset"] = source;
  meta["train"] = {{"epochs", f.epochs},
                   {"episodes_per_epoch", f.episodes},
                   {"seed", f.seed}};
  save_checkpoint(f.out, res.best, &opt, meta);
  std::printf("saved %s\n", f.out.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, std::size_t episodes, std::uint64_t seed) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  SplitDataset ds = load_from_metadata(ckpt.metadata);
  EvalResult res = evaluate(ds.test, ds.dims, ckpt.state, episodes, seed);
  std::printf("accuracy %.4f +- %.4f over %zu episodes\n", res.mean_accuracy, res.ci95,
              res.episodes.size());
  return 0;
}

int cmd_heatmap(const std::string& ckpt_path, std::uint64_t seed, const std::string& format,
                const std::string& out) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  SplitDataset ds = load_from_metadata(ckpt.metadata);
  const ModelConfig& cfg = ckpt.state.config;
  Rng rng(derive_seed(seed, Stream::kEvalEpisode));
  Episode ep = sample_episode(ds.test, ds.dims, cfg.ways, cfg.shots, cfg.queries_per_cat, rng);
  HeatmapResult hm = attention_heatmap(ep, ckpt.state);
  const std::size_t n = cfg.ways;
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t j = 0; j < n; ++j)
      std::printf(j + 1 == n ? "%.6f" : "%.6f ", hm.aggregated.at({c, j}));
    std::printf("\n");
  }
  if (format == "csv")
    export_csv(hm.aggregated, out);
  else
    export_pgm(hm.aggregated, out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_gradcheck() {
  // Flat-feature model: every parameter group, attention, prototypes, FFN.
  int failures = 0;
  auto run = [&](const char* label, ModelConfig cfg, const SampleDims& dims,
                 std::size_t probes) {
    SyntheticSpec spec;
    spec.train_categories = 4;
    spec.val_categories = 2;
    spec.test_categories = 2;
    spec.samples_per_category = cfg.shots + cfg.queries_per_cat;
    spec.dims = dims;
    spec.separation = 2.0;
    spec.seed = 17;
    SplitDataset ds = generate_synthetic(spec);
    Rng init(derive_seed(17, Stream::kInit));
    cfg.input = dims;
    ModelState state(cfg, init);
    state.set_requires_grad(true);
    Rng ep_rng(derive_seed(17, Stream::kTrainEpisode, 0, 0));
    Episode ep = sample_episode(ds.train, ds.dims, cfg.ways, cfg.shots, cfg.queries_per_cat,
                                ep_rng);
    std::vector<std::pair<std::string, Tensor>> params;
    state.for_each_param([&](const std::string& n, Tensor& t) { params.emplace_back(n, t); });
    Rng probe_rng(18);
    GradCheckReport rep = gradient_check(
        params, [&]() { return episode_loss(forward_probs(ep, state), ep.query_labels); }, 1e-5,
        probes, &probe_rng);
    const bool ok = rep.max_rel_err < 1e-4;
    std::printf("%s: max_rel_err %.3e over %zu probes (%s)%s%s\n", label, rep.max_rel_err,
                rep.probes, ok ? "ok" : "FAIL", ok ? "" : " worst ",
                ok ? "" : rep.worst.c_str());
    if (!ok) ++failures;
  };
  ModelConfig flat;
  flat.ways = 3;
  flat.shots = 2;
  flat.queries_per_cat = 2;
  flat.num_heads = 2;
  run("flat-cosine", flat, SampleDims{.features = 8}, 8);
  flat.attention = AttentionMode::kSoftmax;
  run("flat-softmax", flat, SampleDims{.features = 8}, 8);
  ModelConfig conv;
  conv.ways = 2;
  conv.shots = 1;
  conv.queries_per_cat = 2;
  conv.backbone = BackboneKind::kConv4;
  conv.conv_channels = 2;
  conv.num_heads = 1;
  run("conv4-cosine", conv, SampleDims{.channels = 1, .height = 16, .width = 16}, 3);
  return failures == 0 ? 0 : 1;
}

int cmd_compare(const TrainFlags& f, std::size_t seeds, std::size_t eval_episodes) {
  json source;
  SplitDataset ds = load_from_flags(f.data, source);
  double sum_cos = 0.0, sum_soft = 0.0;
  std::printf("seed  cosine  softmax\n");
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = f.seed + s;
    double acc[2] = {0.0, 0.0};
    for (int mode = 0; mode < 2; ++mode) {
      TrainFlags run = f;
      run.seed = seed;
      run.attention = mode == 0 ? "cosine" : "softmax";
      Rng init(derive_seed(seed, Stream::kInit));
      ModelConfig cfg = model_config_from_flags(run, ds.dims);
      ModelState state(cfg, init);
      AdamW opt;
      TrainConfig tc;
      tc.epochs = run.epochs;
      tc.episodes_per_epoch = run.episodes;
      tc.seed = seed;
      TrainResult res = train(ds, tc, state, opt);
      acc[mode] = evaluate(ds.test, ds.dims, res.best, eval_episodes, seed).mean_accuracy;
    }
    std::printf("%4zu  %6.2f  %7.2f\n", seed, acc[0], acc[1]);
    sum_cos += acc[0];
    sum_soft += acc[1];
  }
  std::printf("mean  %6.2f  %7.2f\n", sum_cos / double(seeds), sum_soft / double(seeds));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot cosine transformer"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model and save a checkpoint");
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--out", train_flags.out, "Checkpoint output path");

  std::string eval_ckpt;
  std::size_t eval_episodes = 100;
  std::uint64_t eval_seed = 0;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on its test split");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--episodes", eval_episodes, "Evaluation episodes");
  eval_cmd->add_option("--seed", eval_seed, "Episode seed");

  std::string hm_ckpt, hm_format = "csv", hm_out;
  std::uint64_t hm_seed = 0;
  CLI::App* hm_cmd = app.add_subcommand("heatmap", "Export an attention heatmap");
  hm_cmd->add_option("--checkpoint", hm_ckpt, "Checkpoint path")->required();
  hm_cmd->add_option("--seed", hm_seed, "Episode seed");
  hm_cmd->add_option("--format", hm_format, "Output format: csv or pgm")
      ->check(CLI::IsMember({"csv", "pgm"}));
  hm_cmd->add_option("--out", hm_out, "Output path (default heatmap.<format>)");

  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient audit");

  TrainFlags cmp_flags;
  cmp_flags.epochs = 5;
  std::size_t cmp_seeds = 3;
  std::size_t cmp_eval_episodes = 100;
  CLI::App* cmp_cmd =
      app.add_subcommand("compare", "Train cosine vs softmax attention over paired seeds");
  add_train_flags(cmp_cmd, cmp_flags);
  cmp_cmd->add_option("--seeds", cmp_seeds, "Number of paired seeds");
  cmp_cmd->add_option("--eval-episodes", cmp_eval_episodes, "Test episodes per run");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags);
    if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_episodes, eval_seed);
    if (hm_cmd->parsed()) {
      if (hm_out.empty()) hm_out = "heatmap." + hm_format;
      return cmd_heatmap(hm_ckpt, hm_seed, hm_format, hm_out);
    }
    if (gc_cmd->parsed()) return cmd_gradcheck();
    if (cmp_cmd->parsed()) return cmd_compare(cmp_flags, cmp_seeds, cmp_eval_episodes);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
