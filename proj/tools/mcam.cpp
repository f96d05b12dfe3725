// Command-line front end: dataset generation, training, evaluation,
// interpretability reports, mask-grid export, and gradient validation.
//
// Exit codes: 0 success, 1 usage error (bad flags, bad values, bad config
// keys), 2 runtime error (I/O failures, corrupt or incompatible files,
// non-finite training losses, failed gradient checks).

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mcam/analysis.hpp"
#include "mcam/grad_check.hpp"
#include "mcam/trainer.hpp"

namespace {

using namespace mcam;

int64_t parameter_count(const Network& net) {
  int64_t n = 0;
  for (const Tensor& t : net.parameters()) n += t.numel();
  return n;
}

std::string checksum_hex(const Network& net) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(net.parameter_checksum()));
  return buf;
}

std::string fixed4(double v) { return detail::four_decimals(v); }

struct GenDataOptions {
  std::string out;
  int64_t samples = 2000;
  int64_t image_size = 32;
  int64_t attributes = 6;
  double noise = 0.05;
  uint64_t seed = 0;
  std::string split = "train";
};

int run_gen_data(const GenDataOptions& opt) {
  DatasetSpec spec;
  spec.num_samples = opt.samples;
  spec.image_size = opt.image_size;
  spec.num_attributes = opt.attributes;
  spec.noise_stddev = opt.noise;
  spec.seed = opt.seed;
  spec.validate();

  std::cout << "gen-data configuration:\n"
            << "  out=" << opt.out << "\n"
            << "  samples=" << spec.num_samples << "\n"
            << "  image_size=" << spec.image_size << "\n"
            << "  attributes=" << spec.num_attributes << "\n"
            << "  noise_stddev=" << format_double(spec.noise_stddev) << "\n"
            << "  seed=" << spec.seed << "\n"
            << "  split=" << opt.split << "\n";

  const Dataset ds = generate_dataset(spec, opt.split == "train" ? Split::train : Split::test);
  save_dataset(ds, opt.out);
  std::cout << "wrote " << opt.out << " (" << ds.size() << " samples, " << spec.image_size << "x"
            << spec.image_size << ", " << spec.num_attributes << " attributes)\n";
  return 0;
}

struct TrainOptions {
  std::string config_path, data, eval_data, out, log, resume;
  uint64_t seed = 0;
  int64_t epochs = 0, batch_size = 0;
  double learning_rate = 0.0;
  CLI::Option *seed_opt = nullptr, *epochs_opt = nullptr, *batch_opt = nullptr, *lr_opt = nullptr;
};

int run_train(const TrainOptions& opt) {
  TrainConfig cfg;
  if (!opt.config_path.empty()) cfg = load_train_config(opt.config_path);
  // Flags win over config-file keys.
  if (!opt.data.empty()) cfg.train_data = opt.data;
  if (!opt.eval_data.empty()) cfg.eval_data = opt.eval_data;
  if (!opt.out.empty()) cfg.checkpoint_out = opt.out;
  if (!opt.log.empty()) cfg.metrics_out = opt.log;
  if (!opt.resume.empty()) cfg.resume = opt.resume;
  if (opt.seed_opt->count() > 0) cfg.seed = opt.seed;
  if (opt.epochs_opt->count() > 0) cfg.epochs = opt.epochs;
  if (opt.batch_opt->count() > 0) cfg.batch_size = opt.batch_size;
  if (opt.lr_opt->count() > 0) cfg.learning_rate = opt.learning_rate;
  cfg.validate();
  if (cfg.train_data.empty())
    throw std::invalid_argument("train: no training data (give --data or a train_data config key)");

  std::cout << "resolved training configuration:\n" << describe_config(cfg) << std::flush;

  const TrainResult result = train(cfg, [&](const EpochMetrics& row) {
    char line[160];
    std::snprintf(line, sizeof line,
                  "epoch %3lld/%lld  total=%.4f  binary=%.4f  multilabel=%.4f  recon=%.4f  "
                  "mask_l1=%.4f  acc=%.4f  (%.1fs)",
                  static_cast<long long>(row.epoch), static_cast<long long>(cfg.epochs),
                  row.total, row.binary, row.multilabel, row.reconstruction, row.mask_l1,
                  row.accuracy_mean, row.seconds);
    std::cout << line << "\n" << std::flush;
  });

  std::cout << "final eval: binary accuracy mean " << fixed4(result.final_eval.binary_accuracy_mean)
            << ", multilabel accuracy mean " << fixed4(result.final_eval.multilabel_accuracy_mean)
            << "\n";
  std::cout << "network checksum " << checksum_hex(result.network) << " ("
            << parameter_count(result.network) << " parameters)\n";
  if (!cfg.checkpoint_out.empty()) std::cout << "wrote checkpoint " << cfg.checkpoint_out << "\n";
  if (!cfg.metrics_out.empty())
    std::cout << "wrote metrics " << cfg.metrics_out << " (+ .timing sidecar)\n";
  return 0;
}

struct EvalOptions {
  std::string checkpoint, data;
  int64_t batch_size = 64;
};

int run_eval(const EvalOptions& opt) {
  std::cout << "eval configuration:\n"
            << "  checkpoint=" << opt.checkpoint << "\n"
            << "  data=" << opt.data << "\n"
            << "  batch_size=" << opt.batch_size << "\n";
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Dataset ds = load_dataset(opt.data);
  std::cout << "loaded checkpoint: " << ck.epochs_completed << " epochs completed, seed "
            << ck.seed << ", " << parameter_count(ck.network) << " parameters, checksum "
            << checksum_hex(ck.network) << "\n";
  std::cout << "loaded dataset: " << ds.size() << " samples (" << split_name(ds.split)
            << " split, seed " << ds.spec.seed << ")\n";

  const EvalResult result = evaluate(ck.network, ds, opt.batch_size);
  std::cout << "binary head accuracy:\n";
  for (size_t k = 0; k < result.binary_accuracy.size(); ++k)
    std::cout << "  " << attribute::name(static_cast<int64_t>(k)) << ": "
              << fixed4(result.binary_accuracy[k]) << "\n";
  std::cout << "  mean: " << fixed4(result.binary_accuracy_mean) << "\n";
  std::cout << "multilabel head accuracy mean: " << fixed4(result.multilabel_accuracy_mean)
            << "\n";
  return 0;
}

struct AnalyzeOptions {
  std::string checkpoint, data, out;
  std::string signal = "mask_mean";
  int64_t batch_size = 32;
};

int run_analyze(const AnalyzeOptions& opt) {
  std::cout << "analyze configuration:\n"
            << "  checkpoint=" << opt.checkpoint << "\n"
            << "  data=" << opt.data << "\n"
            << "  out=" << opt.out << "\n"
            << "  signal=" << opt.signal << "\n"
            << "  batch_size=" << opt.batch_size << "\n";
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Dataset ds = load_dataset(opt.data);
  const CorrelationSignal signal = opt.signal == "mask_mean"
                                       ? CorrelationSignal::mask_mean
                                       : CorrelationSignal::masked_feature_mean;

  const AnalysisReport report = analyze(ck.network, ds, signal, opt.batch_size);
  export_report(report, opt.out);

  std::cout << "top channels per attribute:\n";
  for (int64_t k = 0; k < report.stats.num_attributes; ++k)
    std::cout << "  " << attribute::name(k) << ": "
              << ranked_ids_line(report.top_channels[static_cast<size_t>(k)]) << "\n";
  if (!report.localization.empty()) {
    std::cout << "localization (ratio threshold "
              << format_double(kLocalizationRatioThreshold) << "):\n";
    for (const LocalizationScore& s : report.localization)
      std::cout << "  " << attribute::name(s.attribute) << ": ratio=" << fixed4(s.ratio)
                << " pass_fraction=" << fixed4(s.pass_fraction) << " (positives=" << s.positives
                << ")\n";
  }
  for (const std::string& w : report.warnings) std::cout << "warning: " << w << "\n";

  size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(opt.out)) {
    (void)entry;
    ++files;
  }
  std::cout << "wrote " << files << " files to " << opt.out << "\n";
  return 0;
}

struct ExportMasksOptions {
  std::string checkpoint, data, out;
  int64_t attribute = -1;  // -1 = all
  int64_t batch_size = 32;
};

int run_export_masks(const ExportMasksOptions& opt) {
  std::cout << "export-masks configuration:\n"
            << "  checkpoint=" << opt.checkpoint << "\n"
            << "  data=" << opt.data << "\n"
            << "  out=" << opt.out << "\n"
            << "  attribute=" << (opt.attribute < 0 ? "all" : std::to_string(opt.attribute))
            << "\n"
            << "  batch_size=" << opt.batch_size << "\n";
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const Dataset ds = load_dataset(opt.data);
  const int64_t k_count = ck.network.config.num_attributes;
  if (opt.attribute >= k_count)
    throw std::invalid_argument("export-masks: --attribute " + std::to_string(opt.attribute) +
                                " out of range (network has " + std::to_string(k_count) +
                                " attributes)");

  const ChannelMaskStats stats = compute_channel_mask_stats(ck.network, ds, opt.batch_size);
  std::filesystem::create_directories(opt.out);
  const std::filesystem::path dir(opt.out);
  for (int64_t k = 0; k < k_count; ++k) {
    if (opt.attribute >= 0 && k != opt.attribute) continue;
    const MeanMaskGrid grid = mean_mask_grid(stats, k);
    const std::string stem = "mask_grid_" + std::to_string(k) + "_" + attribute::name(k);
    write_pgm(dir / (stem + ".pgm"), grid.cols * kGridCellPixels, grid.rows * kGridCellPixels,
              render_mask_grid(grid));
    write_text_file(dir / (stem + ".txt"), mask_grid_sidecar(grid));
    std::cout << "wrote " << (dir / (stem + ".pgm")).string() << "\n";
  }
  return 0;
}

int run_grad_check(uint64_t seed) {
  std::cout << "grad-check configuration:\n"
            << "  seed=" << seed << "\n"
            << "  tolerance=" << format_double(kGradCheckTolerance) << "\n";
  const std::vector<GradCheckCase> results = run_gradient_battery(seed);
  bool all_ok = true;
  for (const GradCheckCase& c : results) {
    const bool ok = c.max_rel_error < kGradCheckTolerance;
    all_ok = all_ok && ok;
    char line[120];
    std::snprintf(line, sizeof line, "%s  %-24s max rel error %.3e", ok ? "PASS" : "FAIL",
                  c.name.c_str(), c.max_rel_error);
    std::cout << line << "\n";
  }
  if (!all_ok) {
    std::cout << "gradient check FAILED\n";
    return 2;
  }
  std::cout << "all " << results.size() << " gradient checks passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mcam::tune_allocator_for_large_tensors();
  CLI::App app{"Multi-channel attention-mask network toolkit: synthetic attribute data, "
               "training, evaluation, and interpretability reports."};
  app.require_subcommand(1);

  GenDataOptions gen_opt;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic attribute dataset file");
  gen->add_option("--out", gen_opt.out, "Output dataset path")->required();
  gen->add_option("--samples", gen_opt.samples, "Number of samples (default 2000)");
  gen->add_option("--image-size", gen_opt.image_size, "Square image size (default 32)");
  gen->add_option("--attributes", gen_opt.attributes, "Number of attributes, 1-6 (default 6)");
  gen->add_option("--noise", gen_opt.noise, "Gaussian pixel noise stddev (default 0.05)");
  gen->add_option("--seed", gen_opt.seed, "Generator seed (default 0)");
  gen->add_option("--split", gen_opt.split, "Which split to draw: train or test (default train)")
      ->check(CLI::IsMember({"train", "test"}));

  TrainOptions train_opt;
  CLI::App* tr = app.add_subcommand("train", "Train a network; write checkpoint and metrics CSV");
  tr->add_option("--config", train_opt.config_path, "Config file of key=value lines");
  tr->add_option("--data", train_opt.data, "Training dataset path (overrides train_data)");
  tr->add_option("--eval-data", train_opt.eval_data, "Held-out dataset path (overrides eval_data)");
  tr->add_option("--out", train_opt.out, "Checkpoint output path (overrides checkpoint_out)");
  tr->add_option("--log", train_opt.log, "Metrics CSV output path (overrides metrics_out)");
  tr->add_option("--resume", train_opt.resume, "Checkpoint to resume from (overrides resume)");
  train_opt.seed_opt = tr->add_option("--seed", train_opt.seed, "Master seed (overrides seed)");
  train_opt.epochs_opt = tr->add_option("--epochs", train_opt.epochs, "Epoch count (overrides epochs)");
  train_opt.batch_opt =
      tr->add_option("--batch-size", train_opt.batch_size, "Batch size (overrides batch_size)");
  train_opt.lr_opt = tr->add_option("--learning-rate", train_opt.learning_rate,
                                    "Adam learning rate (overrides learning_rate)");

  EvalOptions eval_opt;
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--checkpoint", eval_opt.checkpoint, "Checkpoint path")->required();
  ev->add_option("--data", eval_opt.data, "Dataset path")->required();
  ev->add_option("--batch-size", eval_opt.batch_size, "Evaluation batch size (default 64)");

  AnalyzeOptions an_opt;
  CLI::App* an = app.add_subcommand(
      "analyze", "Write mask grids, correlation matrices, rankings, and localization scores");
  an->add_option("--checkpoint", an_opt.checkpoint, "Checkpoint path")->required();
  an->add_option("--data", an_opt.data, "Dataset path")->required();
  an->add_option("--out", an_opt.out, "Report output directory")->required();
  an->add_option("--signal", an_opt.signal,
                 "Correlation signal: mask_mean or masked_feature_mean (default mask_mean)")
      ->check(CLI::IsMember({"mask_mean", "masked_feature_mean"}));
  an->add_option("--batch-size", an_opt.batch_size, "Survey batch size (default 32)");

  ExportMasksOptions ex_opt;
  CLI::App* ex = app.add_subcommand("export-masks", "Write mean-mask grid images only");
  ex->add_option("--checkpoint", ex_opt.checkpoint, "Checkpoint path")->required();
  ex->add_option("--data", ex_opt.data, "Dataset path")->required();
  ex->add_option("--out", ex_opt.out, "Output directory")->required();
  ex->add_option("--attribute", ex_opt.attribute, "Single attribute index (default: all)");
  ex->add_option("--batch-size", ex_opt.batch_size, "Survey batch size (default 32)");

  uint64_t grad_seed = 0;
  CLI::App* gc = app.add_subcommand(
      "grad-check", "Validate every op's backward pass against central finite differences");
  gc->add_option("--seed", grad_seed, "Seed for the checked values (default 0)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_opt);
    if (tr->parsed()) return run_train(train_opt);
    if (ev->parsed()) return run_eval(eval_opt);
    if (an->parsed()) return run_analyze(an_opt);
    if (ex->parsed()) return run_export_masks(ex_opt);
    if (gc->parsed()) return run_grad_check(grad_seed);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
