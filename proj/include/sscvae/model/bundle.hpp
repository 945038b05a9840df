#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sscvae/core/rng.hpp"
#include "sscvae/core/tensor.hpp"
#include "sscvae/model/arch.hpp"
#include "sscvae/nn/sequential.hpp"

namespace sscvae::model {

// Diagonal Gaussian over a latent code. log_var is clamped to [-10, 10];
// clamp_mask is 1 where the raw value passed through, so backward can zero
// the gradient on saturated entries.
template <typename T>
struct GaussianLatent {
  Tensor<T> mean;      // (N, d)
  Tensor<T> log_var;   // (N, d), clamped
  Tensor<T> clamp_mask;

  int batch() const { return mean.dim(0); }
  int dim() const { return mean.dim(1); }
};

template <typename T>
struct ReparamSample {
  Tensor<T> z;    // mean + exp(log_var / 2) * eps
  Tensor<T> eps;  // kept for the backward pass
};

namespace detail {

template <typename T>
GaussianLatent<T> split_gaussian(const Tensor<T>& h, int d) {
  const int n = h.dim(0);
  if (h.ndim() != 2 || h.dim(1) != 2 * d)
    throw std::invalid_argument("encoder head: expected (N, 2d), got " + h.shape_str());
  GaussianLatent<T> g{Tensor<T>({n, d}), Tensor<T>({n, d}), Tensor<T>({n, d})};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const std::int64_t src = static_cast<std::int64_t>(i) * 2 * d;
      const std::int64_t dst = static_cast<std::int64_t>(i) * d + j;
      g.mean[dst] = h[src + j];
      const T raw = h[src + d + j];
      const bool inside = raw > T(-10) && raw < T(10);
      g.log_var[dst] = inside ? raw : (raw <= T(-10) ? T(-10) : T(10));
      g.clamp_mask[dst] = inside ? T(1) : T(0);
    }
  return g;
}

template <typename T>
Tensor<T> merge_gaussian_grad(const GaussianLatent<T>& g, const Tensor<T>& dmean,
                              const Tensor<T>& dlog_var) {
  const int n = g.batch(), d = g.dim();
  Tensor<T> dh({n, 2 * d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const std::int64_t src = static_cast<std::int64_t>(i) * d + j;
      const std::int64_t dst = static_cast<std::int64_t>(i) * 2 * d;
      dh[dst + j] = dmean[src];
      dh[dst + d + j] = dlog_var[src] * g.clamp_mask[src];
    }
  return dh;
}

}  // namespace detail

template <typename T>
ReparamSample<T> reparameterize(const GaussianLatent<T>& g, std::uint64_t seed) {
  Rng rng(seed);
  ReparamSample<T> s{Tensor<T>(g.mean.shape()), Tensor<T>(g.mean.shape())};
  for (std::int64_t i = 0; i < g.mean.numel(); ++i) {
    s.eps[i] = static_cast<T>(rng.normal());
    s.z[i] = g.mean[i] + std::exp(g.log_var[i] / T(2)) * s.eps[i];
  }
  return s;
}

// Gradient of the sample w.r.t. (mean, log_var): dz/dmean = 1,
// dz/dlog_var = eps * exp(log_var/2) / 2.
template <typename T>
void reparameterize_backward(const GaussianLatent<T>& g, const ReparamSample<T>& s,
                             const Tensor<T>& dz, Tensor<T>& dmean,
                             Tensor<T>& dlog_var) {
  for (std::int64_t i = 0; i < dz.numel(); ++i) {
    dmean[i] += dz[i];
    dlog_var[i] += dz[i] * s.eps[i] * std::exp(g.log_var[i] / T(2)) / T(2);
  }
}

// (N, ds) ++ (N, dz) -> (N, ds + dz).
template <typename T>
Tensor<T> concat_codes(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_codes: incompatible shapes " +
                                a.shape_str() + " / " + b.shape_str());
  const int n = a.dim(0), da = a.dim(1), db = b.dim(1);
  Tensor<T> out({n, da + db});
  for (int i = 0; i < n; ++i) {
    const std::int64_t o = static_cast<std::int64_t>(i) * (da + db);
    for (int j = 0; j < da; ++j) out[o + j] = a[static_cast<std::int64_t>(i) * da + j];
    for (int j = 0; j < db; ++j) out[o + da + j] = b[static_cast<std::int64_t>(i) * db + j];
  }
  return out;
}

template <typename T>
void split_code_grad(const Tensor<T>& dcat, int da, Tensor<T>& dfirst,
                     Tensor<T>& dsecond) {
  const int n = dcat.dim(0), db = dcat.dim(1) - da;
  for (int i = 0; i < n; ++i) {
    const std::int64_t o = static_cast<std::int64_t>(i) * (da + db);
    for (int j = 0; j < da; ++j) dfirst[static_cast<std::int64_t>(i) * da + j] += dcat[o + j];
    for (int j = 0; j < db; ++j) dsecond[static_cast<std::int64_t>(i) * db + j] += dcat[o + da + j];
  }
}

// All eight networks of the cascade. Encoders emit (mean, log_var) heads of
// width 2d; decoders produce maps in (0, 1); classifier and discriminator
// emit logits.
template <typename T>
struct NetworkBundle {
  ArchConfig arch;
  int parameter_version = 1;

  nn::Sequential<T> salient_encoder;
  nn::Sequential<T> background_encoder;
  nn::Sequential<T> image_decoder;
  nn::Sequential<T> salient_map_decoder;
  nn::Sequential<T> background_decoder;
  nn::Sequential<T> classifier;
  nn::Sequential<T> gan_generator;
  nn::Sequential<T> gan_discriminator;

  static NetworkBundle build(const ArchConfig& a, std::uint64_t init_seed) {
    a.validate();
    NetworkBundle b;
    b.arch = a;
    b.salient_encoder = make_encoder_trunk<T>(a, "salient_encoder", 2 * a.latent_dim_s);
    b.background_encoder =
        make_encoder_trunk<T>(a, "background_encoder", 2 * a.latent_dim_z);
    b.image_decoder =
        make_decoder<T>(a, "image_decoder", a.latent_dim_s + a.latent_dim_z, a.in_channels);
    b.salient_map_decoder = make_decoder<T>(a, "salient_map_decoder", a.latent_dim_s, 1);
    b.background_decoder =
        make_decoder<T>(a, "background_decoder", a.latent_dim_z, a.in_channels);
    b.classifier = make_classifier<T>(a, "classifier");
    b.gan_generator =
        make_decoder<T>(a, "gan_generator", a.latent_dim_s + a.latent_dim_z, a.in_channels);
    b.gan_discriminator = make_encoder_trunk<T>(a, "gan_discriminator", 1, true);
    for (auto [name, net] : b.components()) init_params<T>(net->params(), init_seed);
    return b;
  }

  std::vector<std::pair<std::string, nn::Sequential<T>*>> components() {
    return {{"salient_encoder", &salient_encoder},
            {"background_encoder", &background_encoder},
            {"image_decoder", &image_decoder},
            {"salient_map_decoder", &salient_map_decoder},
            {"background_decoder", &background_decoder},
            {"classifier", &classifier},
            {"gan_generator", &gan_generator},
            {"gan_discriminator", &gan_discriminator}};
  }

  nn::Sequential<T>* component(const std::string& name) {
    for (auto [n, net] : components())
      if (n == name) return net;
    throw std::invalid_argument("unknown component: " + name);
  }

  std::uint64_t component_hash(const std::string& name) {
    std::uint64_t h = 1469598103934665603ull;
    for (auto* p : component(name)->params())
      h = fnv1a64(p->value.data(), sizeof(T) * p->value.numel(), h);
    return h;
  }

  // --- batched inference ops ---

  GaussianLatent<T> encode_salient(const Tensor<T>& x, bool train = false) {
    check_image(x, "encode_salient");
    return detail::split_gaussian(salient_encoder.forward(x, train), arch.latent_dim_s);
  }

  GaussianLatent<T> encode_background(const Tensor<T>& x, bool train = false) {
    check_image(x, "encode_background");
    return detail::split_gaussian(background_encoder.forward(x, train),
                                  arch.latent_dim_z);
  }

  Tensor<T> decode_image(const Tensor<T>& code, bool train = false) {
    check_code(code, arch.latent_dim_s + arch.latent_dim_z, "decode_image");
    return image_decoder.forward(code, train);
  }

  Tensor<T> decode_salient_map(const Tensor<T>& s, bool train = false) {
    check_code(s, arch.latent_dim_s, "decode_salient_map");
    return salient_map_decoder.forward(s, train);
  }

  Tensor<T> decode_background(const Tensor<T>& z, bool train = false) {
    check_code(z, arch.latent_dim_z, "decode_background");
    return background_decoder.forward(z, train);
  }

  // Cell-presence probability from a salient code.
  Tensor<T> classify_cells(const Tensor<T>& s) {
    Tensor<T> logit = classify_logit(s, false);
    for (std::int64_t i = 0; i < logit.numel(); ++i)
      logit[i] = T(1) / (T(1) + std::exp(-logit[i]));
    return logit;
  }

  Tensor<T> classify_logit(const Tensor<T>& s, bool train) {
    check_code(s, arch.latent_dim_s, "classify_cells");
    return classifier.forward(s, train);
  }

  Tensor<T> gan_generate(const Tensor<T>& code, bool train = false) {
    check_code(code, arch.latent_dim_s + arch.latent_dim_z, "gan_generate");
    return gan_generator.forward(code, train);
  }

  Tensor<T> gan_discriminate(const Tensor<T>& x, bool train = false) {
    check_image(x, "gan_discriminate");
    return gan_discriminator.forward(x, train);
  }

 private:
  void check_image(const Tensor<T>& x, const char* op) const {
    if (x.ndim() != 4 || x.dim(1) != arch.in_channels ||
        x.dim(2) != arch.image_size || x.dim(3) != arch.image_size)
      throw std::invalid_argument(std::string(op) + ": expected (N, " +
                                  std::to_string(arch.in_channels) + ", " +
                                  std::to_string(arch.image_size) + ", " +
                                  std::to_string(arch.image_size) + "), got " +
                                  x.shape_str());
  }
  void check_code(const Tensor<T>& c, int d, const char* op) const {
    if (c.ndim() != 2 || c.dim(1) != d)
      throw std::invalid_argument(std::string(op) + ": expected (N, " +
                                  std::to_string(d) + "), got " + c.shape_str());
  }
};

}  // namespace sscvae::model
