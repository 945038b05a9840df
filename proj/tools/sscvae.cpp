// Single entry point wiring the pipeline end to end: dataset preparation,
// pair synthesis, the toy benchmark generator, the three training stages,
// the lambda sweep, and evaluation with figure emission.
//
// Exit codes: 0 success, 2 input error, 3 ordering/prerequisite error,
// 4 numerical divergence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sscvae/data/dataset_io.hpp"
#include "sscvae/data/pipeline.hpp"
#include "sscvae/data/toy.hpp"
#include "sscvae/eval/features.hpp"
#include "sscvae/eval/qualitative.hpp"
#include "sscvae/eval/report.hpp"
#include "sscvae/model/checkpoint.hpp"
#include "sscvae/train/cascade.hpp"
#include "sscvae/train/config.hpp"

namespace fs = std::filesystem;
using namespace sscvae;

namespace {

constexpr const char* kSourceTag = "sscvae 0.1.0";
constexpr int kInterpSteps = 7;

struct PrereqError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path runs_root() {
  const char* env = std::getenv("SSCVAE_RUNS_DIR");
  return (env && *env) ? fs::path(env) : fs::path("runs");
}

std::string hash_hex(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Flags beat the config file, which beats the defaults. --set key=value goes
// through the same key space as the config file, so every hyperparameter is
// reachable from the command line.
struct CommonArgs {
  std::string config_path;
  std::string data_dir;
  std::string run_id;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string kl_sign;
};

train::TrainConfig resolve_config(const CommonArgs& a) {
  KvText kv;
  if (!a.config_path.empty()) {
    std::ifstream is(a.config_path);
    if (!is) throw std::runtime_error("cannot open config: " + a.config_path);
    std::ostringstream ss;
    ss << is.rdbuf();
    kv = KvText::parse(ss.str());
  }
  for (const std::string& kvpair : a.overrides) {
    const auto eq = kvpair.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("--set expects key=value, got '" + kvpair + "'");
    kv.set(kvpair.substr(0, eq), kvpair.substr(eq + 1));
  }
  train::TrainConfig cfg = train::TrainConfig::from_kv(kv);
  if (a.seed_given) cfg.seed = a.seed;
  if (!a.kl_sign.empty()) cfg.kl_sign = model::parse_kl_sign(a.kl_sign);
  return cfg;
}

std::string default_run_id(const train::TrainConfig& cfg) {
  return "run-" + std::to_string(cfg.seed);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

struct RunRecord {
  std::string run_id;
  std::string command;
  std::string data_dir;
  std::uint64_t manifest_hash = 0;
  std::vector<std::string> outputs;

  void save(const fs::path& run_dir) const {
    std::ostringstream os;
    os << "run_id: " << run_id << "\n";
    os << "source: " << kSourceTag << "\n";
    os << "command: " << command << "\n";
    os << "data: " << data_dir << "\n";
    os << "manifest_hash: " << hash_hex(manifest_hash) << "\n";
    for (const auto& o : outputs) os << "output: " << o << "\n";
    write_text(run_dir / "run.txt", os.str());
  }
};

fs::path make_run_dir(const std::string& run_id) {
  const fs::path dir = runs_root() / run_id;
  fs::create_directories(dir);
  return dir;
}

data::PatchStore open_store(const std::string& data_dir) {
  if (data_dir.empty()) throw std::invalid_argument("--data is required");
  return data::load_patch_store(data_dir);
}

// ---------------------------------------------------------------------------
// prepare / synth-pairs / toy-gen
// ---------------------------------------------------------------------------

int cmd_prepare(const CommonArgs& a, const std::string& out_dir,
                const std::vector<double>& ratios) {
  if (a.data_dir.empty()) throw std::invalid_argument("--data is required");
  if (out_dir.empty()) throw std::invalid_argument("--out is required");
  const train::TrainConfig cfg = resolve_config(a);
  const std::array<double, 3> r{ratios.at(0), ratios.at(1), ratios.at(2)};
  data::PrepareStats stats = data::prepare_dataset(a.data_dir, out_dir, r, cfg.seed);
  auto manifest = data::DatasetManifest::load(
      (fs::path(out_dir) / "manifest.csv").string());

  std::printf("tiles: %d\npatches: %d\ncells: %d (high %d, low %d)\n"
              "background: %d\nmanifest: %s\nmanifest_hash: %s\n",
              stats.tiles, stats.patches, stats.cells, stats.high, stats.low,
              stats.background, (fs::path(out_dir) / "manifest.csv").c_str(),
              hash_hex(manifest.hash()).c_str());

  const std::string run_id = a.run_id.empty() ? default_run_id(cfg) : a.run_id;
  RunRecord rec{run_id, "prepare", a.data_dir, manifest.hash(),
                {(fs::path(out_dir) / "manifest.csv").string()}};
  rec.save(make_run_dir(run_id));
  return 0;
}

int cmd_synth_pairs(const CommonArgs& a) {
  if (a.data_dir.empty()) throw std::invalid_argument("--data is required");
  const train::TrainConfig cfg = resolve_config(a);
  const int n = data::synthesize_pairs(a.data_dir, cfg.seed);
  auto manifest = data::DatasetManifest::load(
      (fs::path(a.data_dir) / "manifest.csv").string());
  std::printf("pairs: %d\nseed: %llu\n", n,
              static_cast<unsigned long long>(cfg.seed));

  const std::string run_id = a.run_id.empty() ? default_run_id(cfg) : a.run_id;
  RunRecord rec{run_id, "synth-pairs", a.data_dir, manifest.hash(),
                {(fs::path(a.data_dir) / "pairs.csv").string()}};
  rec.save(make_run_dir(run_id));
  return 0;
}

int cmd_toy_gen(const CommonArgs& a, const std::string& out_dir,
                const data::ToyConfig& toy) {
  if (out_dir.empty()) throw std::invalid_argument("--out is required");
  const train::TrainConfig cfg = resolve_config(a);
  data::ToyDataset ds = data::write_toy_dataset(out_dir, toy, cfg.seed);

  using data::Density;
  using data::Group;
  using data::Split;
  std::printf("seed: %llu\n", static_cast<unsigned long long>(cfg.seed));
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
    std::printf("%s: %d CELLS (%d HIGH, %d LOW), %d BACKGROUND\n",
                data::split_name(s), ds.manifest.count(s, Group::kCells),
                ds.manifest.count(s, Density::kHigh),
                ds.manifest.count(s, Density::kLow),
                ds.manifest.count(s, Group::kBackground));
  std::printf("pairs: %zu\ndownstream: %zu\nmanifest_hash: %s\n",
              ds.pairs.size(), ds.downstream.images.size(),
              hash_hex(ds.manifest.hash()).c_str());

  const std::string run_id = a.run_id.empty() ? default_run_id(cfg) : a.run_id;
  RunRecord rec{run_id, "toy-gen", out_dir, ds.manifest.hash(),
                {(fs::path(out_dir) / "manifest.csv").string(),
                 (fs::path(out_dir) / "pairs.csv").string()}};
  rec.save(make_run_dir(run_id));
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fs::path checkpoint_path(const fs::path& run_dir, int stage) {
  return run_dir / "checkpoints" / ("stage" + std::to_string(stage) + ".ckpt");
}

data::PairSet require_pairs(const std::string& data_dir,
                            const data::PatchStore& store) {
  if (!fs::exists(fs::path(data_dir) / "pairs.csv"))
    throw PrereqError("missing pairs.csv under " + data_dir +
                      " (run synth-pairs or toy-gen first)");
  return data::load_pairs(data_dir, store);
}

std::optional<eval::FidFeatures> try_fid_features(const std::string& data_dir) {
  if (!fs::exists(fs::path(data_dir) / "fid_features.bin") &&
      !fs::exists(fs::path(data_dir) / "downstream.csv"))
    return std::nullopt;
  return eval::ensure_fid_features(data_dir);
}

void print_stage(const train::StageResult& r) {
  std::printf("stage %d: best validation %.6g (epoch %d), %.1fs\n", r.stage,
              r.best_validation, r.best_epoch, r.wall_seconds);
  if (r.collapse_warning) std::printf("stage %d: %s\n", r.stage, r.note.c_str());
}

int cmd_train(const CommonArgs& a, const std::string& stage) {
  data::PatchStore store = open_store(a.data_dir);
  train::TrainConfig cfg = resolve_config(a);
  const std::string run_id = a.run_id.empty() ? default_run_id(cfg) : a.run_id;
  const fs::path run_dir = make_run_dir(run_id);
  fs::create_directories(run_dir / "checkpoints");

  RunRecord rec{run_id, "train --stage " + stage, a.data_dir,
                store.manifest.hash(), {}};

  if (stage == "sweep") {
    data::PairSet pairs = require_pairs(a.data_dir, store);
    train::Stage1Data s1 = train::stage1_data(store, pairs);
    std::vector<const ImageU8*> val_images;
    std::vector<int> val_groups;
    for (int i : store.indices(data::Split::kVal)) {
      val_images.push_back(&store.image(i));
      val_groups.push_back(
          store.entry(i).label.group == data::Group::kCells ? 1 : 0);
    }
    train::SweepResult sweep = train::sweep_lambda<float>(
        cfg, train::default_lambda_grid(), s1, val_images, val_groups);
    cfg.save((run_dir / "config").string());
    write_text(run_dir / "sweep.csv", sweep.to_text());
    std::fputs(sweep.to_text().c_str(), stdout);
    rec.outputs = {"config", "sweep.csv"};
    rec.save(run_dir);
    return 0;
  }

  std::vector<int> stages;
  if (stage == "all") stages = {1, 2, 3};
  else stages = {std::stoi(stage)};

  // Later stages resume from the previous stage's checkpoint; the checkpoint
  // defines the architecture.
  model::NetworkBundle<float> net = [&] {
    if (stages.front() == 1)
      return model::NetworkBundle<float>::build(cfg.arch,
                                                derive_seed(cfg.seed, "init"));
    const fs::path prev = checkpoint_path(run_dir, stages.front() - 1);
    if (!fs::exists(prev))
      throw PrereqError("missing checkpoint: " + prev.string() +
                        " (train stage " + std::to_string(stages.front() - 1) +
                        " first)");
    return model::load_checkpoint<float>(prev.string()).bundle;
  }();
  cfg.arch = net.arch;
  cfg.save((run_dir / "config").string());
  rec.outputs.push_back("config");

  train::MetricsLog log;
  std::optional<data::PairSet> pairs;
  std::optional<train::Stage1Data> s1;
  auto load_stage1_inputs = [&] {
    if (!pairs) {
      pairs = require_pairs(a.data_dir, store);
      s1 = train::stage1_data(store, *pairs);
    }
  };

  std::string divergence_note;
  for (int s : stages) {
    train::StageResult r;
    if (s == 1) {
      load_stage1_inputs();
      r = train::train_stage1(net, *s1, cfg, log);
    } else if (s == 2) {
      train::Stage2Data d = train::stage2_data(store);
      const train::Stage1Data* drift = nullptr;
      if (fs::exists(fs::path(a.data_dir) / "pairs.csv")) {
        load_stage1_inputs();
        drift = &*s1;
      }
      r = train::train_stage2(net, d, cfg, log, drift);
    } else {
      train::Stage3Data d = train::stage3_data(store);
      std::optional<eval::FidFeatures> features = try_fid_features(a.data_dir);
      if (!features)
        std::printf("stage 3: no downstream.csv; selecting on distillation "
                    "loss instead of FID\n");
      r = train::train_stage3(net, d, cfg, log, features ? &*features : nullptr);
    }

    const fs::path ckpt = checkpoint_path(run_dir, s);
    model::save_checkpoint(ckpt.string(), net, cfg.to_kv().to_text());
    rec.outputs.push_back("checkpoints/stage" + std::to_string(s) + ".ckpt");
    print_stage(r);
    if (r.diverged) {
      divergence_note = r.note;
      break;
    }
  }

  log.save((run_dir / "metrics.log").string());
  rec.outputs.push_back("metrics.log");
  rec.save(run_dir);
  if (!divergence_note.empty()) throw DivergedError(divergence_note);
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CommonArgs& a, int n_pairs) {
  data::PatchStore store = open_store(a.data_dir);
  train::TrainConfig cfg = resolve_config(a);
  const std::string run_id = a.run_id.empty() ? default_run_id(cfg) : a.run_id;
  const fs::path run_dir = make_run_dir(run_id);

  int loaded_stage = 0;
  for (int s : {3, 2, 1})
    if (fs::exists(checkpoint_path(run_dir, s))) {
      loaded_stage = s;
      break;
    }
  if (loaded_stage == 0)
    throw PrereqError("missing checkpoint: " +
                      checkpoint_path(run_dir, 1).string() + " (train first)");
  model::Checkpoint<float> ckpt =
      model::load_checkpoint<float>(checkpoint_path(run_dir, loaded_stage).string());
  model::NetworkBundle<float>& net = ckpt.bundle;
  if (!fs::exists(run_dir / "config"))
    write_text(run_dir / "config", ckpt.config_echo);

  eval::FidFeatures features = eval::ensure_fid_features(a.data_dir);
  data::DownstreamSet downstream = data::load_downstream(a.data_dir);
  eval::MetricsReport report =
      eval::evaluate_all(net, store, downstream, features, cfg.seed);
  report.save((run_dir / "report").string());
  std::fputs(report.to_text().c_str(), stdout);

  RunRecord rec{run_id, "eval --pairs " + std::to_string(n_pairs), a.data_dir,
                store.manifest.hash(), {"report"}};

  if (n_pairs > 0) {
    std::vector<int> cells =
        store.indices(data::Split::kTest, data::Group::kCells);
    std::vector<int> bgs =
        store.indices(data::Split::kTest, data::Group::kBackground);
    if (static_cast<int>(cells.size()) < n_pairs ||
        static_cast<int>(bgs.size()) < n_pairs)
      throw std::invalid_argument(
          "--pairs " + std::to_string(n_pairs) + " exceeds the test split (" +
          std::to_string(cells.size()) + " CELLS, " + std::to_string(bgs.size()) +
          " BACKGROUND)");
    Rng rng(derive_seed(cfg.seed, "eval_pairs"));
    rng.shuffle(cells.begin(), cells.end());
    rng.shuffle(bgs.begin(), bgs.end());

    fs::create_directories(run_dir / "figures");
    const bool use_gan = loaded_stage == 3;
    for (int k = 0; k < n_pairs; ++k) {
      const int ia = cells[static_cast<std::size_t>(k)];
      const int ib = bgs[static_cast<std::size_t>(k)];
      const std::string id_a = fs::path(store.entry(ia).path).stem().string();
      const std::string id_b = fs::path(store.entry(ib).path).stem().string();
      eval::SwapGrid grid =
          eval::latent_swap(net, store.image(ia), store.image(ib), use_gan);
      std::string p = eval::write_swap_figure((run_dir / "figures").string(),
                                              id_a, id_b, grid);
      rec.outputs.push_back("figures/" + fs::path(p).filename().string());
      auto frames = eval::interpolate(net, store.image(ia), store.image(ib),
                                      kInterpSteps, eval::LatentSpace::kSalient,
                                      use_gan);
      p = eval::write_interp_figure((run_dir / "figures").string(), id_a, id_b,
                                    eval::LatentSpace::kSalient, frames);
      rec.outputs.push_back("figures/" + fs::path(p).filename().string());
    }
    std::printf("figures: %d under %s\n", 2 * n_pairs,
                (run_dir / "figures").c_str());
  }

  rec.save(run_dir);
  return 0;
}

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config_path, "key=value config file");
  sub->add_option("--seed", a.seed, "RNG seed (overrides config)");
  sub->add_option("--data", a.data_dir, "dataset directory");
  sub->add_option("--run-id", a.run_id, "run directory name (default run-<seed>)");
  sub->add_option("--kl-sign", a.kl_sign, "salient KL sign in stage 2")
      ->check(CLI::IsMember({"plus", "minus"}));
  sub->add_option("--set", a.overrides,
                  "override any config key, e.g. --set epochs_stage1=5")
      ->take_all();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cascaded contrastive disentanglement pipeline"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string out_dir;
  std::string stage = "all";
  int n_pairs = 5;
  std::vector<double> ratios{0.7, 0.15, 0.15};
  data::ToyConfig toy;

  CLI::App* prepare = app.add_subcommand(
      "prepare", "tile, label, and split a raw dataset into patches");
  add_common(prepare, args);
  prepare->add_option("--out", out_dir, "output dataset directory");
  prepare->add_option("--ratios", ratios, "train/val/test fractions")
      ->expected(3);

  CLI::App* synth = app.add_subcommand(
      "synth-pairs", "compose cell/background training pairs for a prepared dataset");
  add_common(synth, args);

  CLI::App* toy_gen =
      app.add_subcommand("toy-gen", "render the synthetic toy benchmark");
  add_common(toy_gen, args);
  toy_gen->add_option("--out", out_dir, "output dataset directory");
  toy_gen->add_option("--n-background", toy.n_background, "BACKGROUND patch count");
  toy_gen->add_option("--n-low", toy.n_low, "LOW density patch count");
  toy_gen->add_option("--n-high", toy.n_high, "HIGH density patch count");
  toy_gen->add_option("--downstream-per-class", toy.n_downstream_per_class,
                      "held-out patches per class for transfer evaluation");

  CLI::App* train_cmd = app.add_subcommand("train", "run the training cascade");
  add_common(train_cmd, args);
  train_cmd->add_option("--stage", stage, "1, 2, 3, all, or sweep")
      ->check(CLI::IsMember({"1", "2", "3", "all", "sweep"}));

  CLI::App* eval_cmd =
      app.add_subcommand("eval", "write the metrics report and figure grids");
  add_common(eval_cmd, args);
  eval_cmd->add_option("--pairs", n_pairs, "swap/interpolation pair count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  args.seed_given = app.get_subcommands().front()->count("--seed") > 0;

  try {
    if (prepare->parsed()) return cmd_prepare(args, out_dir, ratios);
    if (synth->parsed()) return cmd_synth_pairs(args);
    if (toy_gen->parsed()) return cmd_toy_gen(args, out_dir, toy);
    if (train_cmd->parsed()) return cmd_train(args, stage);
    if (eval_cmd->parsed()) return cmd_eval(args, n_pairs);
  } catch (const PrereqError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DivergedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
