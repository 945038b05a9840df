#pragma once

#include <functional>
#include <vector>

#include "sscvae/core/image.hpp"
#include "sscvae/core/tensor.hpp"
#include "sscvae/model/bundle.hpp"

namespace sscvae::eval {

using ImageGetter = std::function<const ImageU8&(int)>;

struct EncodedMeans {
  std::vector<std::vector<double>> mu_s;
  std::vector<std::vector<double>> mu_z;
};

namespace embed_detail {

template <typename T>
void append_rows(const Tensor<T>& m, std::vector<std::vector<double>>& out) {
  const int n = m.dim(0), d = m.dim(1);
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j)
      row[static_cast<std::size_t>(j)] =
          static_cast<double>(m.data()[static_cast<std::size_t>(i) * d + j]);
    out.push_back(std::move(row));
  }
}

}  // namespace embed_detail

template <typename T>
Tensor<T> images_to_batch(const ImageGetter& image, const std::vector<int>& indices,
                          int channels, int size) {
  Tensor<T> x({static_cast<int>(indices.size()), channels, size, size});
  for (std::size_t j = 0; j < indices.size(); ++j)
    image_into_tensor(image(indices[j]), x, static_cast<int>(j));
  return x;
}

// Latent means of both encoders over an image collection; evaluation always
// works on means, never on sampled codes.
template <typename T>
EncodedMeans encode_means(model::NetworkBundle<T>& net, const ImageGetter& image,
                          int count, int batch_size = 32) {
  EncodedMeans out;
  const int size = net.arch.image_size, ch = net.arch.in_channels;
  for (int ofs = 0; ofs < count; ofs += batch_size) {
    std::vector<int> idx;
    for (int i = ofs; i < std::min(count, ofs + batch_size); ++i) idx.push_back(i);
    Tensor<T> x = images_to_batch<T>(image, idx, ch, size);
    embed_detail::append_rows(net.encode_salient(x).mean, out.mu_s);
    embed_detail::append_rows(net.encode_background(x).mean, out.mu_z);
  }
  return out;
}

template <typename T>
Tensor<T> means_to_codes(const std::vector<std::vector<double>>& mu_s,
                         const std::vector<std::vector<double>>& mu_z,
                         const std::vector<int>& indices) {
  const int ds = static_cast<int>(mu_s.at(0).size());
  const int dz = static_cast<int>(mu_z.at(0).size());
  Tensor<T> codes({static_cast<int>(indices.size()), ds + dz});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    T* row = codes.data() + j * static_cast<std::size_t>(ds + dz);
    for (int d = 0; d < ds; ++d)
      row[d] = static_cast<T>(mu_s[static_cast<std::size_t>(indices[j])][static_cast<std::size_t>(d)]);
    for (int d = 0; d < dz; ++d)
      row[ds + d] = static_cast<T>(mu_z[static_cast<std::size_t>(indices[j])][static_cast<std::size_t>(d)]);
  }
  return codes;
}

// Decode mean codes through the VAE decoder or the GAN generator.
template <typename T>
std::vector<ImageU8> decode_codes(model::NetworkBundle<T>& net,
                                  const std::vector<std::vector<double>>& mu_s,
                                  const std::vector<std::vector<double>>& mu_z,
                                  bool use_gan, int batch_size = 32) {
  std::vector<ImageU8> out;
  const int count = static_cast<int>(mu_s.size());
  for (int ofs = 0; ofs < count; ofs += batch_size) {
    std::vector<int> idx;
    for (int i = ofs; i < std::min(count, ofs + batch_size); ++i) idx.push_back(i);
    Tensor<T> codes = means_to_codes<T>(mu_s, mu_z, idx);
    Tensor<T> recon = use_gan ? net.gan_generate(codes) : net.decode_image(codes);
    for (std::size_t j = 0; j < idx.size(); ++j)
      out.push_back(tensor_to_image(recon, static_cast<int>(j)));
  }
  return out;
}

}  // namespace sscvae::eval
