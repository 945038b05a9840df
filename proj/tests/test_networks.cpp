#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sscvae/core/rng.hpp"
#include "sscvae/model/bundle.hpp"
#include "sscvae/model/checkpoint.hpp"

using namespace sscvae;
using namespace sscvae::model;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.image_size = 16;
  a.in_channels = 3;
  a.stem_channels = 4;
  a.stem_stride = 1;
  a.block_channels = {4, 6};
  a.latent_dim_s = 5;
  a.latent_dim_z = 4;
  a.classifier_hidden = 8;
  return a;
}

Tensor<double> rand_images(int n, const ArchConfig& a, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x({n, a.in_channels, a.image_size, a.image_size});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform();
  return x;
}

}  // namespace

TEST_CASE("arch validation catches bad geometry") {
  ArchConfig a = tiny_arch();
  REQUIRE_NOTHROW(a.validate());
  REQUIRE(a.final_res() == 4);
  a.block_channels = {4, 6, 8, 8, 8};  // 16 / 2^5 < 1
  REQUIRE_THROWS_AS(a.validate(), std::invalid_argument);
  a = tiny_arch();
  a.stem_stride = 3;
  REQUIRE_THROWS_AS(a.validate(), std::invalid_argument);
  a = tiny_arch();
  a.latent_dim_s = 0;
  REQUIRE_THROWS_AS(a.validate(), std::invalid_argument);
}

TEST_CASE("arch round-trips through key-value text") {
  ArchConfig a = tiny_arch();
  a.stem_stride = 2;
  a.image_size = 32;
  ArchConfig b = ArchConfig::from_kv(KvText::parse(a.to_kv().to_text()));
  REQUIRE(b.image_size == 32);
  REQUIRE(b.stem_stride == 2);
  REQUIRE(b.block_channels == a.block_channels);
  REQUIRE(b.latent_dim_z == a.latent_dim_z);
}

TEST_CASE("bundle ops honor shape and codomain contracts") {
  ArchConfig a = tiny_arch();
  auto net = NetworkBundle<double>::build(a, 1234);
  Tensor<double> x = rand_images(2, a, 7);

  auto g_s = net.encode_salient(x);
  REQUIRE(g_s.mean.shape() == std::vector<int>{2, 5});
  REQUIRE(g_s.log_var.shape() == std::vector<int>{2, 5});
  for (std::int64_t i = 0; i < g_s.log_var.numel(); ++i) {
    REQUIRE(g_s.log_var[i] >= -10.0);
    REQUIRE(g_s.log_var[i] <= 10.0);
    REQUIRE(std::isfinite(g_s.mean[i]));
  }
  auto g_z = net.encode_background(x);
  REQUIRE(g_z.mean.shape() == std::vector<int>{2, 4});

  Tensor<double> code = concat_codes(g_s.mean, g_z.mean);
  Tensor<double> img = net.decode_image(code);
  REQUIRE(img.shape() == std::vector<int>{2, 3, 16, 16});
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    REQUIRE(img[i] >= 0.0);
    REQUIRE(img[i] <= 1.0);
  }
  Tensor<double> m = net.decode_salient_map(g_s.mean);
  REQUIRE(m.shape() == std::vector<int>{2, 1, 16, 16});
  Tensor<double> bg = net.decode_background(g_z.mean);
  REQUIRE(bg.shape() == std::vector<int>{2, 3, 16, 16});
  Tensor<double> p = net.classify_cells(g_s.mean);
  REQUIRE(p.shape() == std::vector<int>{2, 1});
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    REQUIRE(p[i] >= 0.0);
    REQUIRE(p[i] <= 1.0);
  }
  Tensor<double> fake = net.gan_generate(code);
  REQUIRE(fake.shape() == std::vector<int>{2, 3, 16, 16});
  Tensor<double> logit = net.gan_discriminate(x);
  REQUIRE(logit.shape() == std::vector<int>{2, 1});
  REQUIRE(std::isfinite(logit[0]));

  // determinism: same input, same weights, same outputs
  auto g2 = net.encode_salient(x);
  REQUIRE(g2.mean.byte_hash() == g_s.mean.byte_hash());
  REQUIRE(net.decode_image(code).byte_hash() == img.byte_hash());
  REQUIRE(net.gan_generate(code).byte_hash() == fake.byte_hash());
}

TEST_CASE("bundle ops reject wrong shapes") {
  ArchConfig a = tiny_arch();
  auto net = NetworkBundle<double>::build(a, 1);
  REQUIRE_THROWS_AS(net.encode_salient(Tensor<double>({1, 3, 8, 8})),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(net.decode_image(Tensor<double>({1, 7})), std::invalid_argument);
  REQUIRE_THROWS_AS(net.decode_salient_map(Tensor<double>({1, 4})),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(net.gan_discriminate(Tensor<double>({1, 1, 16, 16})),
                    std::invalid_argument);
}

TEST_CASE("log_var clamp saturates extreme encoder outputs") {
  ArchConfig a = tiny_arch();
  auto net = NetworkBundle<double>::build(a, 5);
  // Blow up the encoder head bias so raw log_var values exceed the clamp.
  auto params = net.salient_encoder.params();
  auto* head_bias = params.back();
  REQUIRE(head_bias->name == std::string("salient_encoder.head.bias"));
  for (std::int64_t i = 0; i < head_bias->value.numel(); ++i)
    head_bias->value[i] = (i % 2 == 0) ? 500.0 : -500.0;
  auto g = net.encode_salient(rand_images(1, a, 3));
  bool saturated = false;
  for (std::int64_t i = 0; i < g.log_var.numel(); ++i) {
    REQUIRE(g.log_var[i] >= -10.0);
    REQUIRE(g.log_var[i] <= 10.0);
    if (g.clamp_mask[i] == 0.0) saturated = true;
  }
  REQUIRE(saturated);
}

TEST_CASE("reparameterize behaves like the Gaussian it parameterizes") {
  GaussianLatent<double> g{Tensor<double>({1, 4}), Tensor<double>({1, 4}),
                           Tensor<double>::full({1, 4}, 1.0)};

  SECTION("clamp-floor variance collapses to the mean") {
    for (int j = 0; j < 4; ++j) {
      g.mean[j] = j + 1.0;
      g.log_var[j] = -10.0;
    }
    auto s = reparameterize(g, 99);
    for (int j = 0; j < 4; ++j)
      REQUIRE(std::abs(s.z[j] - g.mean[j]) < std::exp(-5.0) * 6.0);
  }

  SECTION("standard normal moments over many seeds") {
    g.mean.fill(0.0);
    g.log_var.fill(0.0);
    double sum = 0.0, sum2 = 0.0;
    const int n = 10000;
    for (int seed = 0; seed < n; ++seed) {
      auto s = reparameterize(g, static_cast<std::uint64_t>(seed));
      sum += s.z[0];
      sum2 += s.z[0] * s.z[0];
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    REQUIRE(std::abs(mean) < 3e-2);
    REQUIRE(std::abs(var - 1.0) < 0.05);
  }

  SECTION("same seed, same sample") {
    g.mean.fill(0.3);
    g.log_var.fill(0.1);
    auto s1 = reparameterize(g, 1234);
    auto s2 = reparameterize(g, 1234);
    REQUIRE(s1.z.byte_hash() == s2.z.byte_hash());
    auto s3 = reparameterize(g, 1235);
    REQUIRE(s1.z.byte_hash() != s3.z.byte_hash());
  }
}

TEST_CASE("initialization is seed- and name-keyed") {
  ArchConfig a = tiny_arch();
  auto n1 = NetworkBundle<float>::build(a, 77);
  auto n2 = NetworkBundle<float>::build(a, 77);
  auto n3 = NetworkBundle<float>::build(a, 78);
  for (auto [name, net] : n1.components()) {
    REQUIRE(n1.component_hash(name) == n2.component_hash(name));
    REQUIRE(n1.component_hash(name) != n3.component_hash(name));
  }
  // biases start at zero
  for (auto* p : n1.classifier.params())
    if (p->name.find(".bias") != std::string::npos)
      for (std::int64_t i = 0; i < p->value.numel(); ++i) REQUIRE(p->value[i] == 0.0f);
}

TEST_CASE("checkpoints round-trip byte-identically") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "sscvae_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "bundle.ckpt").string();

  ArchConfig a = tiny_arch();
  a.stem_stride = 2;
  a.image_size = 32;
  auto net = NetworkBundle<float>::build(a, 31415);
  net.parameter_version = 3;
  save_checkpoint(path, net, "seed=31415\nnote=roundtrip\n");

  auto loaded = load_checkpoint<float>(path);
  REQUIRE(loaded.bundle.parameter_version == 3);
  REQUIRE(loaded.config_echo == "seed=31415\nnote=roundtrip\n");
  REQUIRE(loaded.bundle.arch.stem_stride == 2);
  for (auto [name, ptr] : net.components())
    REQUIRE(net.component_hash(name) == loaded.bundle.component_hash(name));

  // same bytes when saved again
  const std::string path2 = (dir / "bundle2.ckpt").string();
  save_checkpoint(path2, loaded.bundle, "seed=31415\nnote=roundtrip\n");
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);

  SECTION("corrupt magic is rejected") {
    const std::string bad = (dir / "bad.ckpt").string();
    std::ofstream os(bad, std::ios::binary);
    os << "NOTACKPT" << b1.substr(8);
    os.close();
    REQUIRE_THROWS_AS(load_checkpoint<float>(bad), std::runtime_error);
  }
  SECTION("scalar width mismatch is rejected") {
    REQUIRE_THROWS_AS(load_checkpoint<double>(path), std::runtime_error);
  }
  SECTION("truncated file is rejected") {
    const std::string cut = (dir / "cut.ckpt").string();
    std::ofstream os(cut, std::ios::binary);
    os << b1.substr(0, b1.size() / 2);
    os.close();
    REQUIRE_THROWS_AS(load_checkpoint<float>(cut), std::runtime_error);
  }
}
