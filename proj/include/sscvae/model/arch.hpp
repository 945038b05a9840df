#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/kv.hpp"
#include "sscvae/core/rng.hpp"
#include "sscvae/nn/sequential.hpp"

namespace sscvae::model {

// Shared shape parameters for every network in the bundle. Encoders map an
// image to a feature vector through a stem convolution and a stack of
// stride-2 residual blocks; decoders mirror that path. With the defaults a
// 128x128 input reaches an 8x8 map before the dense head.
struct ArchConfig {
  int image_size = 128;
  int in_channels = 3;
  int stem_channels = 32;
  int stem_stride = 1;  // 1 or 2; 2 trades resolution for speed
  std::vector<int> block_channels = {32, 64, 128, 128};
  int latent_dim_s = 128;
  int latent_dim_z = 128;
  int classifier_hidden = 64;

  void validate() const {
    if (image_size <= 0 || in_channels <= 0 || stem_channels <= 0 ||
        classifier_hidden <= 0)
      throw std::invalid_argument("arch: sizes must be positive");
    if (stem_stride != 1 && stem_stride != 2)
      throw std::invalid_argument("arch: stem_stride must be 1 or 2");
    if (block_channels.empty())
      throw std::invalid_argument("arch: need at least one residual block");
    if (latent_dim_s <= 0 || latent_dim_z <= 0)
      throw std::invalid_argument("arch: latent dims must be positive");
    int r = image_size;
    if (r % stem_stride != 0) throw std::invalid_argument("arch: bad stem stride");
    r /= stem_stride;
    for (std::size_t i = 0; i < block_channels.size(); ++i) {
      if (block_channels[i] <= 0)
        throw std::invalid_argument("arch: block channels must be positive");
      if (r % 2 != 0)
        throw std::invalid_argument("arch: image size not divisible by block strides");
      r /= 2;
    }
    if (r < 1) throw std::invalid_argument("arch: too many blocks for image size");
  }

  // Spatial side length of the deepest feature map.
  int final_res() const {
    int r = image_size / stem_stride;
    for (std::size_t i = 0; i < block_channels.size(); ++i) r /= 2;
    return r;
  }

  int trunk_feat_dim() const {
    return block_channels.back() * final_res() * final_res();
  }

  KvText to_kv() const {
    KvText kv;
    kv.set_int("arch.image_size", image_size);
    kv.set_int("arch.in_channels", in_channels);
    kv.set_int("arch.stem_channels", stem_channels);
    kv.set_int("arch.stem_stride", stem_stride);
    kv.set_int_list("arch.block_channels", block_channels);
    kv.set_int("arch.latent_dim_s", latent_dim_s);
    kv.set_int("arch.latent_dim_z", latent_dim_z);
    kv.set_int("arch.classifier_hidden", classifier_hidden);
    return kv;
  }

  static ArchConfig from_kv(const KvText& kv) {
    ArchConfig a;
    a.image_size = static_cast<int>(kv.get_int("arch.image_size"));
    a.in_channels = static_cast<int>(kv.get_int("arch.in_channels"));
    a.stem_channels = static_cast<int>(kv.get_int("arch.stem_channels"));
    a.stem_stride = static_cast<int>(kv.get_int("arch.stem_stride"));
    a.block_channels = kv.get_int_list("arch.block_channels");
    a.latent_dim_s = static_cast<int>(kv.get_int("arch.latent_dim_s"));
    a.latent_dim_z = static_cast<int>(kv.get_int("arch.latent_dim_z"));
    a.classifier_hidden = static_cast<int>(kv.get_int("arch.classifier_hidden"));
    a.validate();
    return a;
  }
};

// Image -> out_dim feature vector. `leaky` selects discriminator-style
// activations.
template <typename T>
nn::Sequential<T> make_encoder_trunk(const ArchConfig& a, const std::string& name,
                                     int out_dim, bool leaky = false) {
  nn::Sequential<T> net;
  net.template emplace<nn::Conv2d<T>>(name + ".stem", a.in_channels,
                                      a.stem_channels, 3, a.stem_stride, 1);
  if (leaky)
    net.template emplace<nn::LeakyReLU<T>>(T(0.2));
  else
    net.template emplace<nn::ReLU<T>>();
  int ch = a.stem_channels;
  for (std::size_t i = 0; i < a.block_channels.size(); ++i) {
    net.template emplace<nn::ResidualDown<T>>(
        name + ".down" + std::to_string(i), ch, a.block_channels[i], 2, leaky);
    ch = a.block_channels[i];
  }
  net.template emplace<nn::Flatten<T>>();
  net.template emplace<nn::Linear<T>>(name + ".head", a.trunk_feat_dim(), out_dim);
  return net;
}

// in_dim vector -> (out_channels, image_size, image_size) map in (0, 1).
template <typename T>
nn::Sequential<T> make_decoder(const ArchConfig& a, const std::string& name,
                               int in_dim, int out_channels) {
  nn::Sequential<T> net;
  const int r = a.final_res();
  const int ctop = a.block_channels.back();
  net.template emplace<nn::Linear<T>>(name + ".head", in_dim, ctop * r * r);
  net.template emplace<nn::ReLU<T>>();
  net.template emplace<nn::Unflatten<T>>(ctop, r, r);
  int up = 0;
  for (int i = static_cast<int>(a.block_channels.size()) - 1; i >= 1; --i)
    net.template emplace<nn::ResidualUp<T>>(name + ".up" + std::to_string(up++),
                                            a.block_channels[i],
                                            a.block_channels[i - 1]);
  net.template emplace<nn::ResidualUp<T>>(name + ".up" + std::to_string(up),
                                          a.block_channels[0], a.stem_channels);
  if (a.stem_stride == 2)
    net.template emplace<nn::ConvTranspose2d<T>>(name + ".out", a.stem_channels,
                                                 out_channels, 4, 2, 1, 0);
  else
    net.template emplace<nn::Conv2d<T>>(name + ".out", a.stem_channels,
                                        out_channels, 3, 1, 1);
  net.template emplace<nn::Sigmoid<T>>();
  return net;
}

// Salient code -> cell-presence logit.
template <typename T>
nn::Sequential<T> make_classifier(const ArchConfig& a, const std::string& name) {
  nn::Sequential<T> net;
  net.template emplace<nn::Linear<T>>(name + ".fc1", a.latent_dim_s,
                                      a.classifier_hidden);
  net.template emplace<nn::ReLU<T>>();
  net.template emplace<nn::Linear<T>>(name + ".fc2", a.classifier_hidden, 1);
  return net;
}

// He-style initialization. Each parameter gets its own stream derived from
// (seed, parameter name), so adding or reordering layers elsewhere does not
// shift the values of existing ones.
template <typename T>
void init_params(std::vector<nn::Parameter<T>*> params, std::uint64_t seed) {
  for (auto* p : params) {
    if (p->fan_in <= 0) {
      p->value.fill(T(0));
      continue;
    }
    Rng rng(derive_seed(seed, p->name));
    const double std = std::sqrt(2.0 / p->fan_in);
    for (std::int64_t i = 0; i < p->value.numel(); ++i)
      p->value[i] = static_cast<T>(rng.normal() * std);
  }
}

}  // namespace sscvae::model
