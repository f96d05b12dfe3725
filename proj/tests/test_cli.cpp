// Drives the installed command-line binary end-to-end: flag parsing, exit
// codes, config echo, artifact files, and byte-reproducibility of the whole
// gen-data -> train -> analyze pipeline.

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "mcam/data.hpp"

namespace {

namespace fs = std::filesystem;

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

CommandResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MCAM_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  EXPECT_NE(pipe, nullptr) << cmd;
  CommandResult result;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) result.output.append(buf, n);
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXPECT_TRUE(in.good()) << p;
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t count_lines(const std::string& text) {
  size_t n = 0;
  for (char c : text) n += (c == '\n');
  return n;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("mcam_cli_" + name);
}

// Shared tiny-pipeline fixture: datasets, a config file, and one trained
// checkpoint, built once because training dominates the suite's runtime.
class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_data = temp_path("train.bin").string();
    eval_data = temp_path("test.bin").string();
    config = temp_path("train.cfg").string();
    checkpoint = temp_path("ckpt.bin").string();
    metrics = temp_path("metrics.csv").string();

    ASSERT_EQ(run_cli("gen-data --out " + train_data +
                      " --samples 120 --image-size 16 --seed 5")
                  .exit_code,
              0);
    ASSERT_EQ(run_cli("gen-data --out " + eval_data +
                      " --samples 40 --image-size 16 --seed 5 --split test")
                  .exit_code,
              0);
    std::ofstream cfg(config);
    cfg << "epochs=2\nbatch_size=16\nfeature_channels=16\nextractor_channels=6,8\n"
           "dilation_schedule=1,2,4\nmask_hidden=4\nhead_hidden=8\nrecon_hidden=4\n";
    cfg.close();

    const CommandResult train = run_cli("train --config " + config + " --data " + train_data +
                                        " --eval-data " + eval_data + " --out " + checkpoint +
                                        " --log " + metrics + " --seed 5");
    ASSERT_EQ(train.exit_code, 0) << train.output;
    train_output = train.output;
  }

  static std::string train_data, eval_data, config, checkpoint, metrics, train_output;
};

std::string PipelineTest::train_data, PipelineTest::eval_data, PipelineTest::config,
    PipelineTest::checkpoint, PipelineTest::metrics, PipelineTest::train_output;

// --------------------------------------------------------------------------

TEST(CliUsageTest, BadInvocationsExitOneAndHelpExitsZero) {
  EXPECT_EQ(run_cli("").exit_code, 1);                       // subcommand required
  EXPECT_EQ(run_cli("frobnicate").exit_code, 1);             // unknown subcommand
  EXPECT_EQ(run_cli("--help").exit_code, 0);
  EXPECT_EQ(run_cli("grad-check --help").exit_code, 0);
  EXPECT_EQ(run_cli("eval").exit_code, 1);                   // missing required flags
  const CommandResult unknown = run_cli("gen-data --out /tmp/x.bin --bogus 1");
  EXPECT_EQ(unknown.exit_code, 1);
  EXPECT_NE(unknown.output.find("--bogus"), std::string::npos);
  EXPECT_EQ(run_cli("gen-data --out /tmp/x.bin --split weird").exit_code, 1);
  EXPECT_EQ(run_cli("gen-data --out /tmp/x.bin --samples 0").exit_code, 1);
}

TEST(CliGenDataTest, ReproducibleSeedSensitiveAndLoadable) {
  const std::string a = temp_path("gen_a.bin").string();
  const std::string b = temp_path("gen_b.bin").string();
  const std::string c = temp_path("gen_c.bin").string();
  const CommandResult first =
      run_cli("gen-data --out " + a + " --samples 30 --image-size 16 --seed 7 --noise 0.1");
  ASSERT_EQ(first.exit_code, 0) << first.output;
  EXPECT_NE(first.output.find("noise_stddev=0.1"), std::string::npos);
  ASSERT_EQ(run_cli("gen-data --out " + b + " --samples 30 --image-size 16 --seed 7 --noise 0.1")
                .exit_code,
            0);
  ASSERT_EQ(run_cli("gen-data --out " + c + " --samples 30 --image-size 16 --seed 8 --noise 0.1")
                .exit_code,
            0);
  EXPECT_EQ(read_bytes(a), read_bytes(b));
  EXPECT_NE(read_bytes(a), read_bytes(c));

  const mcam::Dataset ds = mcam::load_dataset(a);
  EXPECT_EQ(ds.size(), 30);
  EXPECT_EQ(ds.spec.image_size, 16);
  EXPECT_EQ(ds.spec.seed, 7u);
  EXPECT_DOUBLE_EQ(ds.spec.noise_stddev, 0.1);
  EXPECT_EQ(ds.split, mcam::Split::train);
}

TEST_F(PipelineTest, TrainEchoesResolvedConfigAndReportsProgress) {
  EXPECT_NE(train_output.find("resolved training configuration:"), std::string::npos);
  EXPECT_NE(train_output.find("epochs=2\n"), std::string::npos);
  EXPECT_NE(train_output.find("seed=5\n"), std::string::npos);
  EXPECT_NE(train_output.find("feature_channels=16\n"), std::string::npos);
  EXPECT_NE(train_output.find("train_data=" + train_data), std::string::npos);
  EXPECT_NE(train_output.find("epoch   1/2"), std::string::npos);
  EXPECT_NE(train_output.find("epoch   2/2"), std::string::npos);
  EXPECT_NE(train_output.find("final eval: binary accuracy mean"), std::string::npos);

  const std::string csv = read_bytes(metrics);
  EXPECT_EQ(count_lines(csv), 3u);  // header + one row per epoch
  EXPECT_EQ(csv.rfind("epoch,total,binary,multilabel,reconstruction,mask_l1", 0), 0u);
  EXPECT_TRUE(fs::exists(metrics + ".timing"));
  EXPECT_TRUE(fs::exists(checkpoint));
}

TEST_F(PipelineTest, FlagsOverrideConfigFileKeys) {
  // The config says epochs=2; the flag wins and the echo shows the merge.
  const std::string ckpt = temp_path("override_ckpt.bin").string();
  const CommandResult r = run_cli("train --config " + config + " --data " + train_data +
                                  " --eval-data " + eval_data + " --out " + ckpt +
                                  " --epochs 1 --seed 9 --batch-size 8 --learning-rate 0.002");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("epochs=1\n"), std::string::npos);
  EXPECT_NE(r.output.find("seed=9\n"), std::string::npos);
  EXPECT_NE(r.output.find("batch_size=8\n"), std::string::npos);
  EXPECT_NE(r.output.find("learning_rate=0.002\n"), std::string::npos);
  EXPECT_EQ(r.output.find("epoch   2/"), std::string::npos);
}

TEST_F(PipelineTest, TrainWithoutDataIsUsageError) {
  EXPECT_EQ(run_cli("train --config " + config).exit_code, 1);
}

TEST_F(PipelineTest, EvalPrintsPerAttributeAccuracy) {
  const CommandResult r = run_cli("eval --checkpoint " + checkpoint + " --data " + eval_data);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("binary head accuracy:"), std::string::npos);
  EXPECT_NE(r.output.find("circle:"), std::string::npos);
  EXPECT_NE(r.output.find("inverted_contrast:"), std::string::npos);
  EXPECT_NE(r.output.find("mean:"), std::string::npos);
  EXPECT_NE(r.output.find("multilabel head accuracy mean:"), std::string::npos);
}

TEST_F(PipelineTest, EvalBadFilesMapToDocumentedExitCodes) {
  // Missing file: runtime error.
  EXPECT_EQ(run_cli("eval --checkpoint /tmp/mcam_cli_nonexistent.bin --data " + eval_data)
                .exit_code,
            2);
  // Corrupt checkpoint: checksum failure, runtime error.
  const std::string bad = temp_path("bad_ckpt.bin").string();
  std::string bytes = read_bytes(checkpoint);
  bytes[bytes.size() / 2] ^= 0x40;
  std::ofstream(bad, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  EXPECT_EQ(run_cli("eval --checkpoint " + bad + " --data " + eval_data).exit_code, 2);
  // Dataset incompatible with the network: usage error.
  const std::string small = temp_path("three_attr.bin").string();
  ASSERT_EQ(run_cli("gen-data --out " + small +
                    " --samples 10 --image-size 16 --attributes 3 --seed 1")
                .exit_code,
            0);
  EXPECT_EQ(run_cli("eval --checkpoint " + checkpoint + " --data " + small).exit_code, 1);
}

TEST_F(PipelineTest, AnalyzeWritesReportAndSummarizes) {
  const std::string dir = temp_path("report").string();
  fs::remove_all(dir);
  const CommandResult r =
      run_cli("analyze --checkpoint " + checkpoint + " --data " + eval_data + " --out " + dir);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("top channels per attribute:"), std::string::npos);
  EXPECT_NE(r.output.find("localization (ratio threshold 1.3):"), std::string::npos);
  EXPECT_NE(r.output.find("wrote 22 files to " + dir), std::string::npos);
  for (const char* name :
       {"mask_grid_0_circle.pgm", "mask_means.csv", "feature_correlation.csv",
        "feature_correlation.pgm", "attribute_correlation.csv", "channel_importance.txt",
        "top_features.txt", "top_attributes.txt", "localization.csv", "warnings.txt",
        "provenance.txt"})
    EXPECT_TRUE(fs::exists(fs::path(dir) / name)) << name;
  EXPECT_EQ(run_cli("analyze --checkpoint " + checkpoint + " --data " + eval_data + " --out " +
                    dir + " --signal bogus")
                .exit_code,
            1);
}

TEST_F(PipelineTest, PipelineRerunIsByteIdentical) {
  // Second full train + analyze with the same seeds must reproduce every
  // artifact byte for byte.
  const std::string ckpt2 = temp_path("ckpt2.bin").string();
  const std::string metrics2 = temp_path("metrics2.csv").string();
  const CommandResult r = run_cli("train --config " + config + " --data " + train_data +
                                  " --eval-data " + eval_data + " --out " + ckpt2 + " --log " +
                                  metrics2 + " --seed 5");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(read_bytes(checkpoint), read_bytes(ckpt2));
  EXPECT_EQ(read_bytes(metrics), read_bytes(metrics2));

  const std::string dir1 = temp_path("report_r1").string();
  const std::string dir2 = temp_path("report_r2").string();
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  ASSERT_EQ(
      run_cli("analyze --checkpoint " + checkpoint + " --data " + eval_data + " --out " + dir1)
          .exit_code,
      0);
  ASSERT_EQ(run_cli("analyze --checkpoint " + ckpt2 + " --data " + eval_data + " --out " + dir2)
                .exit_code,
            0);
  size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(dir1)) {
    const fs::path other = fs::path(dir2) / entry.path().filename();
    ASSERT_TRUE(fs::exists(other)) << other;
    EXPECT_EQ(read_bytes(entry.path()), read_bytes(other)) << entry.path().filename();
    ++compared;
  }
  EXPECT_EQ(compared, 22u);
}

TEST_F(PipelineTest, ResumeViaFlagsMatchesStraightRun) {
  // Train 1 epoch, resume to 2: the checkpoint must equal the fixture's
  // straight 2-epoch run bit for bit.
  const std::string half = temp_path("resume_half.bin").string();
  const std::string full = temp_path("resume_full.bin").string();
  ASSERT_EQ(run_cli("train --config " + config + " --data " + train_data + " --eval-data " +
                    eval_data + " --out " + half + " --seed 5 --epochs 1")
                .exit_code,
            0);
  const CommandResult r =
      run_cli("train --config " + config + " --data " + train_data + " --eval-data " + eval_data +
              " --out " + full + " --seed 5 --resume " + half);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(r.output.find("epoch   1/2"), std::string::npos);  // starts at epoch 2
  EXPECT_NE(r.output.find("epoch   2/2"), std::string::npos);
  EXPECT_EQ(read_bytes(full), read_bytes(checkpoint));
  // Wrong seed for the checkpoint: usage error.
  EXPECT_EQ(run_cli("train --config " + config + " --data " + train_data + " --eval-data " +
                    eval_data + " --out /tmp/mcam_cli_wontwrite.bin --seed 6 --resume " + half)
                .exit_code,
            1);
}

TEST_F(PipelineTest, ExportMasksSelectsAttributes) {
  const std::string dir = temp_path("masks_all").string();
  fs::remove_all(dir);
  ASSERT_EQ(run_cli("export-masks --checkpoint " + checkpoint + " --data " + eval_data +
                    " --out " + dir)
                .exit_code,
            0);
  size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    (void)entry;
    ++files;
  }
  EXPECT_EQ(files, 12u);  // 6 attributes x (pgm + sidecar)

  const std::string one = temp_path("masks_one").string();
  fs::remove_all(one);
  const CommandResult r = run_cli("export-masks --checkpoint " + checkpoint + " --data " +
                                  eval_data + " --out " + one + " --attribute 2");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_TRUE(fs::exists(fs::path(one) / "mask_grid_2_horizontal_bar.pgm"));
  EXPECT_TRUE(fs::exists(fs::path(one) / "mask_grid_2_horizontal_bar.txt"));
  EXPECT_FALSE(fs::exists(fs::path(one) / "mask_grid_0_circle.pgm"));
  EXPECT_EQ(run_cli("export-masks --checkpoint " + checkpoint + " --data " + eval_data +
                    " --out " + one + " --attribute 9")
                .exit_code,
            1);
}

TEST(CliGradCheckTest, PassesAndPrintsPerOpLines) {
  const CommandResult r = run_cli("grad-check");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_NE(r.output.find("PASS  conv2d dilation 1"), std::string::npos);
  EXPECT_NE(r.output.find("PASS  composite loss"), std::string::npos);
  EXPECT_NE(r.output.find("gradient checks passed"), std::string::npos);
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}

}  // namespace
