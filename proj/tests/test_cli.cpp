#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "specmc/dataset.hpp"
#include "specmc/spectral.hpp"

namespace {

namespace fs = std::filesystem;
using namespace specmc;

std::string cli_path() {
  const char* p = std::getenv("SPECMC_CLI");
  if (p == nullptr) {
    ADD_FAILURE() << "SPECMC_CLI environment variable not set";
    return {};
  }
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

struct TempTree {
  fs::path root;
  TempTree() {
    root = fs::temp_directory_path() /
           ("specmc_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()));
    fs::create_directories(root);
  }
  ~TempTree() { fs::remove_all(root); }
  static int counter() {
    static int n = 0;
    return n++;
  }
};

const char* kTinyGenConfig = R"(
[grid]
points = 64
min_nm = 400
max_nm = 850
[profiles.IC]
peak_nm = 608
peak_eps = 20000
width_nm = 45
[profiles.NR]
peak_nm = 496
peak_eps = 11000
width_nm = 50
[plan]
n_total = 30
c_max = [7e-5, 2.5e-4]
seed = 5
[noise]
e_max = 0.02
e_min = 0.005
[output]
dataset = tiny.spcd
)";

TEST(CliGenDataset, DeterministicAndCounted) {
  TempTree tmp;
  write_file(tmp.root / "gen.cfg", kTinyGenConfig);
  ASSERT_EQ(run_cli("gen-dataset --config " + (tmp.root / "gen.cfg").string() +
                    " --out " + (tmp.root / "a").string()),
            0);
  ASSERT_EQ(run_cli("gen-dataset --config " + (tmp.root / "gen.cfg").string() +
                    " --out " + (tmp.root / "b").string()),
            0);
  const auto bytes_a = slurp(tmp.root / "a" / "tiny.spcd");
  const auto bytes_b = slurp(tmp.root / "b" / "tiny.spcd");
  ASSERT_FALSE(bytes_a.empty());
  EXPECT_EQ(bytes_a, bytes_b);

  auto ds = load_dataset(tmp.root / "a" / "tiny.spcd");
  EXPECT_EQ(ds.size(), 30u);
  EXPECT_EQ(ds.provenance, Provenance::sim_noisy);
  EXPECT_TRUE(fs::exists(tmp.root / "a" / "resolved_config.cfg"));
}

TEST(CliGenDataset, SeedOverrideChangesOutput) {
  TempTree tmp;
  write_file(tmp.root / "gen.cfg", kTinyGenConfig);
  ASSERT_EQ(run_cli("gen-dataset --config " + (tmp.root / "gen.cfg").string() +
                    " --out " + (tmp.root / "a").string()),
            0);
  ASSERT_EQ(run_cli("gen-dataset --config " + (tmp.root / "gen.cfg").string() +
                    " --seed 99 --out " + (tmp.root / "c").string()),
            0);
  EXPECT_NE(slurp(tmp.root / "a" / "tiny.spcd"), slurp(tmp.root / "c" / "tiny.spcd"));
}

TEST(CliFitExtinction, SucceedsOnWellPosedData) {
  TempTree tmp;
  write_file(tmp.root / "gen.cfg", kTinyGenConfig);
  ASSERT_EQ(run_cli("gen-dataset --config " + (tmp.root / "gen.cfg").string() +
                    " --out " + (tmp.root / "data").string()),
            0);
  write_file(tmp.root / "fit.cfg",
             "[fit]\ndataset = " + (tmp.root / "data" / "tiny.spcd").string() +
                 "\npath_length_cm = 0.25\n");
  ASSERT_EQ(run_cli("fit-extinction --config " + (tmp.root / "fit.cfg").string() +
                    " --out " + (tmp.root / "fit").string()),
            0);
  EXPECT_TRUE(fs::exists(tmp.root / "fit" / "extinction.csv"));
  EXPECT_TRUE(fs::exists(tmp.root / "fit" / "condition.json"));
  auto fitted = read_extinction_csv(tmp.root / "fit" / "extinction.csv");
  EXPECT_EQ(fitted.species, (std::vector<std::string>{"IC", "NR"}));
}

TEST(CliFitExtinction, RankDeficientExitsThree) {
  TempTree tmp;
  // NR never present: its column cannot be identified
  auto grid = make_uniform_grid(400.0, 850.0, 64);
  auto ic = synthetic_extinction_profile(grid, "IC", 608.0, 2.0e4, 45.0);
  auto nr = synthetic_extinction_profile(grid, "NR", 496.0, 1.1e4, 50.0);
  auto eps = join_profiles({ic, nr});
  Dataset ds;
  ds.grid = grid;
  ds.species = eps.species;
  ds.provenance = Provenance::sim_clean;
  for (int k = 1; k <= 5; ++k) {
    ConcentrationVector c({k * 1e-5, 0.0});
    ds.samples.push_back(LabeledSample{c, absorbance_mix(eps, c)});
  }
  save_dataset(ds, tmp.root / "deficient.spcd");
  write_file(tmp.root / "fit.cfg",
             "[fit]\ndataset = " + (tmp.root / "deficient.spcd").string() + "\n");
  EXPECT_EQ(run_cli("fit-extinction --config " + (tmp.root / "fit.cfg").string() +
                    " --out " + (tmp.root / "fit").string()),
            3);
  EXPECT_FALSE(fs::exists(tmp.root / "fit" / "extinction.csv"));
}

TEST(CliExitCodes, MissingInputAndBadConfig) {
  TempTree tmp;
  write_file(tmp.root / "fit.cfg", "[fit]\ndataset = /nonexistent/x.spcd\n");
  EXPECT_EQ(run_cli("fit-extinction --config " + (tmp.root / "fit.cfg").string() +
                    " --out " + (tmp.root / "o").string()),
            1);
  write_file(tmp.root / "broken.cfg", "[fit\nnot a header\n");
  EXPECT_EQ(run_cli("fit-extinction --config " + (tmp.root / "broken.cfg").string() +
                    " --out " + (tmp.root / "o").string()),
            2);
  // config parses but lacks required keys
  write_file(tmp.root / "empty.cfg", "[fit]\n");
  EXPECT_EQ(run_cli("fit-extinction --config " + (tmp.root / "empty.cfg").string() +
                    " --out " + (tmp.root / "o").string()),
            2);
  EXPECT_EQ(run_cli("no-such-command --out x"), 2);
}

std::string tiny_train_config(const fs::path& dataset, int epochs) {
  std::ostringstream cfg;
  cfg << "[train]\ndataset = " << dataset.string()
      << "\nsplit_fraction = 0.8\nsplit_seed = 3\n"
      << "[model]\nblock_filters = [2, 2, 2, 2]\n"
      << "[plan]\nlrs = [0.001, 0.0001, 0.00001]\nepochs_per_phase = " << epochs
      << "\nsteps_per_epoch = 2\nbatch_size = 2\nseed = 11\n";
  return cfg.str();
}

TEST(CliTrainAndEval, PipelineWithDeterministicRerun) {
  TempTree tmp;
  write_file(tmp.root / "gen.cfg", kTinyGenConfig);
  ASSERT_EQ(run_cli("gen-dataset --config " + (tmp.root / "gen.cfg").string() +
                    " --out " + (tmp.root / "data").string()),
            0);
  const auto dataset = tmp.root / "data" / "tiny.spcd";

  write_file(tmp.root / "train.cfg", tiny_train_config(dataset, 1));
  ASSERT_EQ(run_cli("train --config " + (tmp.root / "train.cfg").string() +
                    " --out " + (tmp.root / "t1").string()),
            0);
  ASSERT_EQ(run_cli("train --config " + (tmp.root / "train.cfg").string() +
                    " --out " + (tmp.root / "t2").string()),
            0);
  EXPECT_TRUE(fs::exists(tmp.root / "t1" / "model.fcnn"));
  EXPECT_EQ(slurp(tmp.root / "t1" / "model.fcnn"), slurp(tmp.root / "t2" / "model.fcnn"));
  EXPECT_EQ(slurp(tmp.root / "t1" / "history.csv"), slurp(tmp.root / "t2" / "history.csv"));

  // history rows = phases x epochs
  std::ifstream hist(tmp.root / "t1" / "history.csv");
  std::string line;
  int rows = -1;  // skip header
  while (std::getline(hist, line)) {
    if (!line.empty()) ++rows;
  }
  EXPECT_EQ(rows, 3);

  ASSERT_EQ(run_cli("eval --model " + (tmp.root / "t1" / "model.fcnn").string() +
                    " --data " + dataset.string() + " --out " +
                    (tmp.root / "eval").string()),
            0);
  auto metrics = nlohmann::json::parse(slurp(tmp.root / "eval" / "metrics.json"));
  for (const char* field :
       {"mse", "rmse", "d", "min_detectable", "detection_error"}) {
    EXPECT_TRUE(metrics.contains(field)) << field;
  }

  // evaluating against a dataset on a different grid is a usage error
  auto bigger = kTinyGenConfig;
  std::string cfg2(bigger);
  cfg2.replace(cfg2.find("points = 64"), 11, "points = 128");
  write_file(tmp.root / "gen2.cfg", cfg2);
  ASSERT_EQ(run_cli("gen-dataset --config " + (tmp.root / "gen2.cfg").string() +
                    " --out " + (tmp.root / "data2").string()),
            0);
  EXPECT_EQ(run_cli("eval --model " + (tmp.root / "t1" / "model.fcnn").string() +
                    " --data " + (tmp.root / "data2" / "tiny.spcd").string() +
                    " --out " + (tmp.root / "eval2").string()),
            2);
}

TEST(CliSimulateLink, OracleLinkDecodesHi) {
  TempTree tmp;
  std::ostringstream cfg;
  cfg << R"([grid]
points = 64
min_nm = 400
max_nm = 850
[profiles.IC]
peak_nm = 608
peak_eps = 20000
width_nm = 45
[profiles.NR]
peak_nm = 496
peak_eps = 11000
width_nm = 50
[link]
sampling_period_s = 10
seed = 7
predictor = oracle
[tx.1]
species = IC
stock = 2.18e-5
scheme = bcsk
flow = 40
bit_interval_s = 60
message = H
[tx.2]
species = NR
stock = 1.15e-4
scheme = bcsk
flow = 40
bit_interval_s = 60
message = i
)";
  write_file(tmp.root / "link.cfg", cfg.str());
  ASSERT_EQ(run_cli("simulate-link --config " + (tmp.root / "link.cfg").string() +
                    " --out " + (tmp.root / "link").string()),
            0);
  auto summary = nlohmann::json::parse(slurp(tmp.root / "link" / "summary.json"));
  EXPECT_EQ(summary["message_decoded"], "Hi");
  const double overall = summary["ber_overall"];
  EXPECT_GE(overall, 0.0);
  EXPECT_LE(overall, 1.0);
  EXPECT_EQ(overall, 0.0);
  EXPECT_EQ(summary["transmitters"][0]["bits_decoded"], "1001000");
  EXPECT_EQ(summary["transmitters"][1]["bits_decoded"], "1101001");
  EXPECT_TRUE(fs::exists(tmp.root / "link" / "trace.csv"));
  EXPECT_TRUE(fs::exists(tmp.root / "link" / "decisions.csv"));
}

}  // namespace
