// End-to-end contracts of the command-line binary, exercised through
// subprocesses: exit codes, run directory layout, and byte-level rerun
// determinism.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "sscvae/core/image.hpp"
#include "sscvae/data/pipeline.hpp"

using namespace sscvae;
namespace fs = std::filesystem;

namespace {

fs::path work_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "sscvae_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr combined
};

CliResult run_cli(const std::string& args, const fs::path& runs_dir) {
  const fs::path log = work_root() / "last_output.txt";
  std::string cmd = "SSCVAE_RUNS_DIR='" + runs_dir.string() + "' '" +
                    SSCVAE_CLI_PATH + "' " + args + " > '" + log.string() +
                    "' 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(log);
  std::ostringstream ss;
  ss << is.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int count_files(const fs::path& dir) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    (void)e;
    ++n;
  }
  return n;
}

// Small-architecture overrides so training subcommands finish in seconds.
const std::string kSmall =
    " --set epochs_stage1=1 --set epochs_stage2=1 --set epochs_stage3=1"
    " --set batch_size=8 --set latent_dim_s=6 --set latent_dim_z=5"
    " --set arch.stem_channels=4 --set arch.stem_stride=2"
    " --set arch.block_channels=4,6 --set arch.classifier_hidden=8";

// One toy dataset and one fully trained run shared by the read-only tests.
// Seed 7 is pinned because its test split keeps at least 5 patches per probe
// class, which the 5-fold evaluation requires.
struct SharedRuns {
  fs::path data;
  fs::path runs;
};

const SharedRuns& shared() {
  static const SharedRuns s = [] {
    SharedRuns r;
    r.data = work_root() / "toy";
    r.runs = work_root() / "runs";
    auto gen = run_cli("toy-gen --out '" + r.data.string() +
                           "' --seed 7 --n-background 100 --n-low 50"
                           " --n-high 50 --downstream-per-class 12",
                       r.runs);
    REQUIRE(gen.exit_code == 0);
    auto train = run_cli(
        "train --data '" + r.data.string() + "' --seed 7" + kSmall, r.runs);
    REQUIRE(train.exit_code == 0);
    return r;
  }();
  return s;
}

// Raw-layout fixture for `prepare`: one 256x256 tile with four dark disks,
// an instance label map, and a class table.
fs::path make_raw_dataset() {
  const fs::path dir = work_root() / "raw";
  if (fs::exists(dir)) return dir;
  fs::create_directories(dir / "tiles");
  fs::create_directories(dir / "annotations");

  ImageU8 tile(256, 256, 3);
  ImageU16 map(256, 256);
  const int centers[4][2] = {{64, 64}, {192, 64}, {64, 192}, {192, 192}};
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x) {
      for (int ch = 0; ch < 3; ++ch) tile.at(y, x, ch) = 220;
      for (int i = 0; i < 4; ++i) {
        const int dy = y - centers[i][1], dx = x - centers[i][0];
        if (dy * dy + dx * dx <= 15 * 15) {
          for (int ch = 0; ch < 3; ++ch) tile.at(y, x, ch) = 60;
          map.at(y, x) = static_cast<std::uint16_t>(i + 1);
        }
      }
    }
  save_image((dir / "tiles" / "t0.png").string(), tile);
  save_label_map((dir / "annotations" / "t0_mask.png").string(), map);
  std::ofstream cls(dir / "annotations" / "t0_classes.csv");
  cls << "instance_id,cell_class\n1,TIL\n2,TIL\n3,OTHER\n4,OTHER\n";
  return dir;
}

}  // namespace

TEST_CASE("toy-gen is idempotent and reports the manifest hash") {
  const fs::path runs = work_root() / "runs_toygen";
  const fs::path out = work_root() / "toy_small";
  const std::string cmd = "toy-gen --out '" + out.string() +
                          "' --seed 11 --n-background 8 --n-low 4 --n-high 4"
                          " --downstream-per-class 2";
  auto first = run_cli(cmd, runs);
  REQUIRE(first.exit_code == 0);
  CHECK(first.output.find("manifest_hash: ") != std::string::npos);
  const std::string manifest = slurp(out / "manifest.csv");

  auto second = run_cli(cmd, runs);
  REQUIRE(second.exit_code == 0);
  CHECK(second.output == first.output);
  CHECK(slurp(out / "manifest.csv") == manifest);

  CHECK(slurp(runs / "run-11" / "run.txt").find("command: toy-gen") !=
        std::string::npos);
}

TEST_CASE("toy-gen rejects an infeasible configuration") {
  auto r = run_cli("toy-gen --out '" + (work_root() / "toy_bad").string() +
                       "' --n-background 0",
                   work_root() / "runs_bad");
  CHECK(r.exit_code == 2);
}

TEST_CASE("prepare labels a raw dataset and reruns to the same manifest") {
  const fs::path raw = make_raw_dataset();
  const fs::path out = work_root() / "prepared";
  const fs::path runs = work_root() / "runs_prepare";
  auto r = run_cli(
      "prepare --data '" + raw.string() + "' --out '" + out.string() + "' --seed 3",
      runs);
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("tiles: 1") != std::string::npos);
  CHECK(r.output.find("patches: 64") != std::string::npos);

  auto manifest = data::DatasetManifest::load((out / "manifest.csv").string());
  int cells = 0, background = 0;
  for (const auto& e : manifest.entries) {
    (e.label.group == data::Group::kCells ? cells : background) += 1;
    if (e.label.group == data::Group::kCells)
      CHECK(e.label.cell_area_ratio > data::kCellAreaThreshold);
  }
  CHECK(cells > 0);
  CHECK(cells == background);  // balanced splits discard the surplus

  const std::string bytes = slurp(out / "manifest.csv");
  auto again = run_cli(
      "prepare --data '" + raw.string() + "' --out '" + out.string() + "' --seed 3",
      runs);
  REQUIRE(again.exit_code == 0);
  CHECK(slurp(out / "manifest.csv") == bytes);

  auto pairs = run_cli("synth-pairs --data '" + out.string() + "' --seed 3", runs);
  REQUIRE(pairs.exit_code == 0);
  CHECK(fs::exists(out / "pairs.csv"));
}

TEST_CASE("prepare exits 2 naming a missing class table") {
  const fs::path raw = make_raw_dataset();
  const fs::path broken = work_root() / "raw_broken";
  fs::remove_all(broken);
  fs::create_directories(broken);
  fs::copy(raw, broken, fs::copy_options::recursive);
  fs::remove(broken / "annotations" / "t0_classes.csv");

  auto r = run_cli("prepare --data '" + broken.string() + "' --out '" +
                       (work_root() / "prepared_broken").string() + "'",
                   work_root() / "runs_broken");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("t0_classes.csv") != std::string::npos);
}

TEST_CASE("train all writes config, checkpoints, metrics, and a run record") {
  const auto& s = shared();
  const fs::path dir = s.runs / "run-7";
  CHECK(fs::exists(dir / "config"));
  CHECK(fs::exists(dir / "checkpoints" / "stage1.ckpt"));
  CHECK(fs::exists(dir / "checkpoints" / "stage2.ckpt"));
  CHECK(fs::exists(dir / "checkpoints" / "stage3.ckpt"));
  CHECK(fs::exists(dir / "metrics.log"));

  const std::string record = slurp(dir / "run.txt");
  CHECK(record.find("run_id: run-7") != std::string::npos);
  CHECK(record.find("command: train --stage all") != std::string::npos);
  CHECK(record.find("manifest_hash: ") != std::string::npos);
  CHECK(record.find("output: checkpoints/stage3.ckpt") != std::string::npos);

  const std::string config = slurp(dir / "config");
  CHECK(config.find("epochs_stage1=1") != std::string::npos);
  CHECK(config.find("seed=7") != std::string::npos);

  const std::string log = slurp(dir / "metrics.log");
  CHECK(log.find(",1,val_total_init,") != std::string::npos);
  CHECK(log.find(",2,info_nce,") != std::string::npos);
  CHECK(log.find(",3,loss_g,") != std::string::npos);
}

TEST_CASE("train rerun with the same seed reproduces checkpoints byte for byte") {
  const auto& s = shared();
  const std::string before =
      slurp(s.runs / "run-7" / "checkpoints" / "stage3.ckpt");
  auto r = run_cli("train --data '" + s.data.string() + "' --seed 7" + kSmall,
                   s.runs);
  REQUIRE(r.exit_code == 0);
  CHECK(slurp(s.runs / "run-7" / "checkpoints" / "stage3.ckpt") == before);
}

TEST_CASE("train stage 2 without a stage-1 checkpoint exits 3") {
  const auto& s = shared();
  auto r = run_cli("train --data '" + s.data.string() +
                       "' --seed 7 --run-id empty --stage 2" + kSmall,
                   s.runs);
  CHECK(r.exit_code == 3);
  CHECK(r.output.find("stage1.ckpt") != std::string::npos);
}

TEST_CASE("train exits 4 when the loss diverges") {
  const auto& s = shared();
  auto r = run_cli("train --data '" + s.data.string() +
                       "' --seed 7 --run-id diverge --stage 1" + kSmall +
                       " --set learning_rate=1e30",
                   s.runs);
  CHECK(r.exit_code == 4);
  CHECK(r.output.find("diverged") != std::string::npos);
  // The run directory still holds the restored checkpoint and the log.
  CHECK(fs::exists(s.runs / "diverge" / "checkpoints" / "stage1.ckpt"));
  CHECK(fs::exists(s.runs / "diverge" / "metrics.log"));
}

TEST_CASE("train sweep writes the lambda table") {
  const auto& s = shared();
  auto r = run_cli("train --data '" + s.data.string() +
                       "' --seed 7 --run-id sweep --stage sweep" + kSmall,
                   s.runs);
  REQUIRE(r.exit_code == 0);
  const std::string table = slurp(s.runs / "sweep" / "sweep.csv");
  CHECK(table.rfind("lambda,val_ss_salient,completed\n", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 9);  // header + 7 + best
  CHECK(table.find("best_lambda: ") != std::string::npos);
}

TEST_CASE("eval writes a parseable report and 2 figures per pair") {
  const auto& s = shared();
  auto r = run_cli(
      "eval --data '" + s.data.string() + "' --seed 7 --pairs 3", s.runs);
  REQUIRE(r.exit_code == 0);

  const fs::path dir = s.runs / "run-7";
  const std::string report = slurp(dir / "report");
  for (const char* key : {"ss_salient: ", "clf_density: ", "fid_vae: ",
                          "fid_gan: ", "downstream_accuracy: "})
    CHECK(report.find(key) != std::string::npos);
  CHECK(count_files(dir / "figures") == 6);

  auto again = run_cli(
      "eval --data '" + s.data.string() + "' --seed 7 --pairs 3", s.runs);
  REQUIRE(again.exit_code == 0);
  CHECK(slurp(dir / "report") == report);
}

TEST_CASE("eval without a checkpoint exits 3") {
  const auto& s = shared();
  auto r = run_cli("eval --data '" + s.data.string() + "' --run-id nothing",
                   s.runs);
  CHECK(r.exit_code == 3);
  CHECK(r.output.find("stage1.ckpt") != std::string::npos);
}

TEST_CASE("usage errors exit 2") {
  const auto& s = shared();
  CHECK(run_cli("train --stage 7 --data '" + s.data.string() + "'", s.runs)
            .exit_code == 2);
  CHECK(run_cli("train --data '" + s.data.string() + "' --set mystery=1" + kSmall,
                s.runs)
            .exit_code == 2);
  CHECK(run_cli("definitely-not-a-subcommand", s.runs).exit_code == 2);
}
