#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sscvae/data/dataset_io.hpp"
#include "sscvae/data/toy.hpp"
#include "sscvae/model/checkpoint.hpp"
#include "sscvae/train/cascade.hpp"
#include "sscvae/train/config.hpp"

using namespace sscvae;
using namespace sscvae::train;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sscvae_train_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

model::ArchConfig small_arch() {
  model::ArchConfig a;
  a.image_size = 128;
  a.in_channels = 3;
  a.stem_channels = 4;
  a.stem_stride = 2;
  a.block_channels = {4, 6};
  a.latent_dim_s = 6;
  a.latent_dim_z = 5;
  a.classifier_hidden = 8;
  return a;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.arch = small_arch();
  cfg.batch_size = 8;
  cfg.epochs_stage1 = 1;
  cfg.epochs_stage2 = 1;
  cfg.epochs_stage3 = 1;
  cfg.seed = 9;
  return cfg;
}

// One toy dataset on disk for every training test.
struct Fixture {
  std::filesystem::path dir;
  data::PatchStore store;
  data::PairSet pairs;
  Stage1Data s1;
  Stage2Data s2;
  Stage3Data s3;

  Fixture() : dir(fresh_dir("fixture")) {
    data::ToyConfig c;
    c.n_background = 24;
    c.n_low = 12;
    c.n_high = 12;
    c.split_ratios = {0.5, 0.25, 0.25};
    c.n_downstream_per_class = 6;
    data::write_toy_dataset(dir.string(), c, 810);
    store = data::load_patch_store(dir.string());
    pairs = data::load_pairs(dir.string(), store);
    s1 = stage1_data(store, pairs);
    s2 = stage2_data(store);
    s3 = stage3_data(store);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

std::map<std::string, std::uint64_t> all_hashes(model::NetworkBundle<float>& net) {
  std::map<std::string, std::uint64_t> out;
  for (auto [name, comp] : net.components()) out[name] = net.component_hash(name);
  return out;
}

}  // namespace

TEST_CASE("train config round-trips and rejects unknown keys") {
  TrainConfig cfg = small_config();
  cfg.lambda1 = 0.5;
  cfg.kl_sign = model::KlSign::kMinus;
  cfg.branch_classifier = false;
  TrainConfig back = TrainConfig::from_kv(cfg.to_kv());
  CHECK(back.to_kv().to_text() == cfg.to_kv().to_text());
  CHECK(back.lambda1 == 0.5);
  CHECK(back.kl_sign == model::KlSign::kMinus);
  CHECK_FALSE(back.branch_classifier);
  CHECK(back.arch.latent_dim_s == 6);

  KvText kv = cfg.to_kv();
  kv.set_double("mystery_knob", 1.0);
  CHECK_THROWS_WITH(TrainConfig::from_kv(kv),
                    Catch::Matchers::ContainsSubstring("mystery_knob"));

  TrainConfig bad = small_config();
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("metrics log emits one parseable record per term") {
  MetricsLog log;
  log.record(12, 1, "total", 0.5);
  log.record(24, 1, "total", 0.25);
  log.record(24, 2, "info_nce", 1.0 / 3.0);
  REQUIRE(log.lines().size() == 3);
  CHECK(log.lines()[0] == "12,1,total,0.5");
  CHECK(log.lines()[2] == "24,2,info_nce,0.333333333");
  CHECK(log.count(1, "total") == 2);
  CHECK(log.count(2, "total") == 0);

  auto dir = fresh_dir("log");
  log.save((dir / "metrics.log").string());
  std::ifstream is(dir / "metrics.log");
  std::string first;
  std::getline(is, first);
  CHECK(first == "12,1,total,0.5");
  std::filesystem::remove_all(dir);
}

TEST_CASE("stage data views partition the store by split and label") {
  auto& f = fixture();
  CHECK(f.s1.train_pairs.size() == 12);
  CHECK(f.s1.val_pairs.size() == 6);
  CHECK(f.s1.train_bg.size() == 12);
  CHECK(f.s1.val_bg.size() == 6);
  CHECK(f.s2.train_high.size() + f.s2.train_low.size() == 12);
  REQUIRE(f.s2.train_high.size() >= 2);
  REQUIRE(f.s2.val_high.size() >= 2);
  REQUIRE(f.s2.val_low.size() >= 2);
  CHECK(f.s3.train.size() == 24);
  CHECK(f.s3.val.size() == 12);
}

TEST_CASE("stage 1 with zero epochs returns the initialization") {
  auto& f = fixture();
  TrainConfig cfg = small_config();
  cfg.epochs_stage1 = 0;
  auto net = model::NetworkBundle<float>::build(cfg.arch, 41);
  const auto before = all_hashes(net);
  MetricsLog log;
  StageResult r = train_stage1(net, f.s1, cfg, log);
  CHECK(all_hashes(net) == before);
  CHECK(r.epoch_trail.empty());
  CHECK(r.best_epoch == -1);
  CHECK(r.best_validation == r.initial_validation);
  CHECK(std::isfinite(r.initial_validation));
  CHECK(log.count(1, "val_total_init") == 1);
  CHECK(log.count(1, "val_total") == 0);
}

TEST_CASE("stage 1 training is deterministic and leaves the GAN untouched") {
  auto& f = fixture();
  TrainConfig cfg = small_config();
  cfg.epochs_stage1 = 2;

  auto net_a = model::NetworkBundle<float>::build(cfg.arch, 41);
  const auto init = all_hashes(net_a);
  MetricsLog log_a;
  StageResult ra = train_stage1(net_a, f.s1, cfg, log_a);
  const auto after_a = all_hashes(net_a);

  auto net_b = model::NetworkBundle<float>::build(cfg.arch, 41);
  MetricsLog log_b;
  StageResult rb = train_stage1(net_b, f.s1, cfg, log_b);
  CHECK(after_a == all_hashes(net_b));
  CHECK(log_a.to_text() == log_b.to_text());
  CHECK(ra.best_validation == rb.best_validation);

  CHECK(after_a.at("gan_generator") == init.at("gan_generator"));
  CHECK(after_a.at("gan_discriminator") == init.at("gan_discriminator"));
  CHECK(after_a.at("salient_encoder") != init.at("salient_encoder"));

  REQUIRE(ra.epoch_trail.size() == 2);
  for (const char* term : {"elbo_c", "elbo_b", "salient_map_mse", "background_mse",
                           "bce", "total", "val_total"})
    CHECK(log_a.count(1, term) == 2);
  CHECK(ra.best_validation <= ra.initial_validation);
  CHECK(ra.final_terms.count("val_total") == 1);
  CHECK(ra.wall_seconds > 0.0);

  SECTION("a different seed gives different parameters") {
    TrainConfig other = cfg;
    other.seed = 10;
    auto net_c = model::NetworkBundle<float>::build(cfg.arch, 41);
    MetricsLog log_c;
    train_stage1(net_c, f.s1, other, log_c);
    CHECK(all_hashes(net_c).at("salient_encoder") != after_a.at("salient_encoder"));
  }
}

TEST_CASE("stage 1 aborts on numerical divergence and restores the best state") {
  auto& f = fixture();
  TrainConfig cfg = small_config();
  cfg.learning_rate = 1e30;
  cfg.epochs_stage1 = 4;
  auto net = model::NetworkBundle<float>::build(cfg.arch, 41);
  const auto init = all_hashes(net);
  MetricsLog log;
  StageResult r = train_stage1(net, f.s1, cfg, log);
  REQUIRE(r.diverged);
  CHECK(r.note.find("diverged") != std::string::npos);
  CHECK(r.epoch_trail.size() < 4);
  CHECK(all_hashes(net) == init);  // nothing beat the initial validation
}

TEST_CASE("stage 2 updates only the salient encoder") {
  auto& f = fixture();
  TrainConfig cfg = small_config();
  auto net = model::NetworkBundle<float>::build(cfg.arch, 42);
  const auto before = all_hashes(net);
  MetricsLog log;
  StageResult r = train_stage2(net, f.s2, cfg, log, &f.s1);
  const auto after = all_hashes(net);
  for (const auto& [name, h] : before)
    if (name != "salient_encoder") CHECK(after.at(name) == h);

  REQUIRE(r.epoch_trail.size() == 1);
  for (const char* term : {"info_nce", "kl_s", "total", "val_silhouette"})
    CHECK(log.count(2, term) == 1);
  CHECK(log.count(2, "val_silhouette_init") == 1);
  CHECK(log.count(2, "stage1_val_total") == 1);
  CHECK(r.final_terms.count("stage1_val_total") == 1);
  CHECK(r.best_validation >= r.initial_validation);

  SECTION("zero epochs is the identity") {
    TrainConfig none = cfg;
    none.epochs_stage2 = 0;
    auto net2 = model::NetworkBundle<float>::build(cfg.arch, 42);
    const auto h0 = all_hashes(net2);
    MetricsLog l2;
    StageResult r0 = train_stage2(net2, f.s2, none, l2);
    CHECK(all_hashes(net2) == h0);
    CHECK(r0.best_epoch == -1);
  }

  SECTION("determinism given the seed") {
    auto net2 = model::NetworkBundle<float>::build(cfg.arch, 42);
    MetricsLog l2;
    train_stage2(net2, f.s2, cfg, l2, &f.s1);
    CHECK(all_hashes(net2) == after);
    CHECK(l2.to_text() == log.to_text());
  }
}

TEST_CASE("stage 3 trains the GAN against frozen codes") {
  auto& f = fixture();
  TrainConfig cfg = small_config();
  auto net = model::NetworkBundle<float>::build(cfg.arch, 43);
  const auto before = all_hashes(net);
  MetricsLog log;
  StageResult r = train_stage3(net, f.s3, cfg, log);  // distill fallback metric
  const auto after = all_hashes(net);
  for (const auto& [name, h] : before)
    if (name != "gan_generator" && name != "gan_discriminator")
      CHECK(after.at(name) == h);

  REQUIRE(r.epoch_trail.size() == 1);
  for (const char* term :
       {"loss_d", "loss_g", "adv_g", "distill", "d_collapse_steps", "val_distill"})
    CHECK(log.count(3, term) == 1);
  CHECK(log.count(3, "val_distill_init") == 1);
  CHECK_FALSE(r.diverged);

  SECTION("determinism given the seed") {
    auto net2 = model::NetworkBundle<float>::build(cfg.arch, 43);
    MetricsLog l2;
    train_stage3(net2, f.s3, cfg, l2);
    CHECK(all_hashes(net2) == after);
  }

  SECTION("zero epochs is the identity") {
    TrainConfig none = cfg;
    none.epochs_stage3 = 0;
    auto net2 = model::NetworkBundle<float>::build(cfg.arch, 43);
    const auto h0 = all_hashes(net2);
    MetricsLog l2;
    train_stage3(net2, f.s3, none, l2);
    CHECK(all_hashes(net2) == h0);
  }
}

TEST_CASE("checkpoints round-trip the trained bundle") {
  auto& f = fixture();
  TrainConfig cfg = small_config();
  auto net = model::NetworkBundle<float>::build(cfg.arch, 44);
  MetricsLog log;
  train_stage1(net, f.s1, cfg, log);

  auto dir = fresh_dir("ckpt");
  const std::string path = (dir / "stage1.ckpt").string();
  model::save_checkpoint(path, net, cfg.to_kv().to_text());
  auto loaded = model::load_checkpoint<float>(path);
  CHECK(all_hashes(loaded.bundle) == all_hashes(net));
  CHECK(loaded.config_echo == cfg.to_kv().to_text());
  std::filesystem::remove_all(dir);
}

TEST_CASE("lambda sweep scores each run and selects the argmax") {
  auto& f = fixture();
  TrainConfig cfg = small_config();

  std::vector<const ImageU8*> val_images;
  std::vector<int> val_groups;
  for (int i : f.store.indices(data::Split::kVal)) {
    val_images.push_back(&f.store.image(i));
    val_groups.push_back(
        f.store.entry(i).label.group == data::Group::kCells ? 1 : 0);
  }

  SweepResult sweep =
      sweep_lambda<float>(cfg, {0.1, 10.0}, f.s1, val_images, val_groups);
  REQUIRE(sweep.rows.size() == 2);
  CHECK(sweep.rows[0].lambda == 0.1);
  CHECK(sweep.rows[1].lambda == 10.0);
  REQUIRE(sweep.rows[0].completed);
  REQUIRE(sweep.rows[1].completed);
  const int expect =
      sweep.rows[0].validation_score >= sweep.rows[1].validation_score ? 0 : 1;
  CHECK(sweep.best_index == expect);
  CHECK(sweep.best_lambda() == sweep.rows[static_cast<std::size_t>(expect)].lambda);

  const std::string text = sweep.to_text();
  CHECK(text.rfind("lambda,val_ss_salient,completed\n", 0) == 0);
  CHECK(text.find("best_lambda: ") != std::string::npos);

  SECTION("grid defaults span seven decades") {
    auto grid = default_lambda_grid();
    REQUIRE(grid.size() == 7);
    CHECK(grid.front() == 1e-3);
    CHECK(grid.back() == 1e3);
  }

  SECTION("singleton grid yields one completed row") {
    SweepResult one = sweep_lambda<float>(cfg, {1.0}, f.s1, val_images, val_groups);
    REQUIRE(one.rows.size() == 1);
    CHECK(one.best_index == 0);
  }

  SECTION("empty grid is rejected") {
    CHECK_THROWS_AS(sweep_lambda<float>(cfg, {}, f.s1, val_images, val_groups),
                    std::invalid_argument);
  }
}
