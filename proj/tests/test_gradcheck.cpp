#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "sscvae/core/rng.hpp"
#include "sscvae/model/objectives.hpp"

using namespace sscvae;
using namespace sscvae::model;

namespace {

// Miniature geometry keeps every finite-difference evaluation cheap.
ArchConfig mini_arch() {
  ArchConfig a;
  a.image_size = 8;
  a.in_channels = 3;
  a.stem_channels = 3;
  a.stem_stride = 1;
  a.block_channels = {4};
  a.latent_dim_s = 3;
  a.latent_dim_z = 3;
  a.classifier_hidden = 4;
  return a;
}

Tensor<double> rand01(std::vector<int> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

struct GradcheckResult {
  int checked = 0;
  int failed = 0;
  double max_err = 0.0;
};

// Samples `n_coords` parameter coordinates and compares the already-computed
// analytic gradients against central finite differences of `loss_fn`.
// Relative error uses a 1e-5 floor so coordinates with near-zero gradients
// are not dominated by finite-difference noise.
GradcheckResult fd_check(std::vector<nn::Parameter<double>*> params,
                         const std::function<double()>& loss_fn, int n_coords,
                         std::uint64_t seed, double tol = 1e-3) {
  std::int64_t total = 0;
  for (auto* p : params) total += p->value.numel();
  Rng rng(seed);
  GradcheckResult res;
  const double h = 1e-4;
  for (int c = 0; c < n_coords; ++c) {
    std::int64_t flat = rng.uniform_int(total);
    nn::Parameter<double>* target = nullptr;
    for (auto* p : params) {
      if (flat < p->value.numel()) {
        target = p;
        break;
      }
      flat -= p->value.numel();
    }
    const double analytic = target->grad[flat];
    const double orig = target->value[flat];
    target->value[flat] = orig + h;
    const double lp = loss_fn();
    target->value[flat] = orig - h;
    const double lm = loss_fn();
    target->value[flat] = orig;
    const double fd = (lp - lm) / (2 * h);
    const double err = std::abs(analytic - fd) /
                       std::max({std::abs(analytic), std::abs(fd), 1e-5});
    res.max_err = std::max(res.max_err, err);
    ++res.checked;
    if (err > tol) ++res.failed;
  }
  return res;
}

std::vector<nn::Parameter<double>*> collect(
    NetworkBundle<double>& net, const std::vector<std::string>& names) {
  std::vector<nn::Parameter<double>*> out;
  for (const auto& n : names)
    for (auto* p : net.component(n)->params()) out.push_back(p);
  return out;
}

}  // namespace

TEST_CASE("stage1 gradients match finite differences") {
  auto net = NetworkBundle<double>::build(mini_arch(), 11);
  Stage1Batch<double> batch;
  batch.x_c = rand01({2, 3, 8, 8}, 1);
  batch.mask = rand01({2, 1, 8, 8}, 2);
  for (std::int64_t i = 0; i < batch.mask.numel(); ++i)
    batch.mask[i] = batch.mask[i] > 0.5 ? 1.0 : 0.0;
  batch.bg = rand01({2, 3, 8, 8}, 3);
  batch.x_b = rand01({2, 3, 8, 8}, 4);
  Stage1LossConfig<double> cfg;
  cfg.lambda1 = 2.0;
  cfg.lambda2 = 3.0;
  cfg.noise_seed = 77;

  auto params = collect(net, {"salient_encoder", "background_encoder", "image_decoder",
                              "salient_map_decoder", "background_decoder", "classifier"});
  for (auto* p : params) p->zero_grad();
  stage1_loss(net, batch, cfg, true);
  auto res = fd_check(params, [&] { return stage1_loss(net, batch, cfg, false).total; },
                      200, 999);
  INFO("max relative error " << res.max_err << ", failed " << res.failed << "/200");
  REQUIRE(res.failed <= 2);
}

TEST_CASE("stage2 gradients match finite differences") {
  auto net = NetworkBundle<double>::build(mini_arch(), 22);
  Tensor<double> high = rand01({3, 3, 8, 8}, 5);
  Tensor<double> low = rand01({2, 3, 8, 8}, 6);
  Stage2LossConfig<double> cfg;
  cfg.temperature = 0.1;

  for (auto sign : {KlSign::kPlus, KlSign::kMinus}) {
    cfg.kl_sign = sign;
    auto params = collect(net, {"salient_encoder"});
    for (auto* p : params) p->zero_grad();
    stage2_loss(net, high, low, cfg, true);
    auto res = fd_check(params, [&] { return stage2_loss(net, high, low, cfg, false).total; },
                        200, 1000 + static_cast<std::uint64_t>(sign == KlSign::kMinus));
    INFO("kl_sign " << kl_sign_name(sign) << ": max err " << res.max_err
                    << ", failed " << res.failed << "/200");
    REQUIRE(res.failed <= 2);
  }
}

TEST_CASE("gan discriminator gradients match finite differences") {
  auto net = NetworkBundle<double>::build(mini_arch(), 33);
  Tensor<double> real = rand01({2, 3, 8, 8}, 7);
  Tensor<double> codes = rand01({2, 6}, 8);

  auto params = collect(net, {"gan_discriminator"});
  for (auto* p : params) p->zero_grad();
  gan_loss_d(net, real, codes, true);
  auto res = fd_check(params, [&] { return gan_loss_d(net, real, codes, false); },
                      200, 2000);
  INFO("max relative error " << res.max_err << ", failed " << res.failed << "/200");
  REQUIRE(res.failed <= 2);
}

TEST_CASE("gan generator gradients match finite differences") {
  auto net = NetworkBundle<double>::build(mini_arch(), 44);
  Tensor<double> codes = rand01({2, 6}, 9);
  Tensor<double> targets = rand01({2, 3, 8, 8}, 10);

  auto params = collect(net, {"gan_generator"});
  for (auto* p : params) p->zero_grad();
  gan_loss_g(net, codes, targets, 0.1, true);
  auto res = fd_check(params,
                      [&] { return gan_loss_g(net, codes, targets, 0.1, false).loss_g; },
                      200, 3000);
  INFO("max relative error " << res.max_err << ", failed " << res.failed << "/200");
  REQUIRE(res.failed <= 2);

  // the generator phase must leave discriminator gradients untouched
  for (auto* p : collect(net, {"gan_discriminator"}))
    for (std::int64_t i = 0; i < p->grad.numel(); ++i) REQUIRE(p->grad[i] == 0.0);
}
