#pragma once

#include <array>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/image.hpp"
#include "sscvae/eval/embed.hpp"
#include "sscvae/model/bundle.hpp"

namespace sscvae::eval {

enum class LatentSpace { kSalient, kBackground, kBoth };

inline const char* space_name(LatentSpace s) {
  switch (s) {
    case LatentSpace::kSalient: return "SALIENT";
    case LatentSpace::kBackground: return "BACKGROUND";
    default: return "BOTH";
  }
}

inline LatentSpace parse_space(const std::string& s) {
  if (s == "SALIENT") return LatentSpace::kSalient;
  if (s == "BACKGROUND") return LatentSpace::kBackground;
  if (s == "BOTH") return LatentSpace::kBoth;
  throw std::invalid_argument("bad latent space: " + s);
}

struct SwapGrid {
  std::array<ImageU8, 2> originals;
  std::array<ImageU8, 2> reconstructions;
  std::array<ImageU8, 2> swapped;  // salient latents exchanged
};

namespace qual_detail {

template <typename T>
EncodedMeans encode_two(model::NetworkBundle<T>& net, const ImageU8& x_a,
                        const ImageU8& x_b) {
  const std::array<const ImageU8*, 2> imgs{&x_a, &x_b};
  return encode_means(
      net, [&](int i) -> const ImageU8& { return *imgs[static_cast<std::size_t>(i)]; },
      2);
}

}  // namespace qual_detail

// Exchanges the salient means of two images while keeping each background
// mean in place. No sampling is involved, so swapping an image with itself
// reproduces its reconstruction bit for bit.
template <typename T>
SwapGrid latent_swap(model::NetworkBundle<T>& net, const ImageU8& x_a,
                     const ImageU8& x_b, bool use_gan = true) {
  EncodedMeans enc = qual_detail::encode_two(net, x_a, x_b);
  const std::vector<std::vector<double>> mu_s = {enc.mu_s[0], enc.mu_s[1],
                                                 enc.mu_s[1], enc.mu_s[0]};
  const std::vector<std::vector<double>> mu_z = {enc.mu_z[0], enc.mu_z[1],
                                                 enc.mu_z[0], enc.mu_z[1]};
  auto images = decode_codes(net, mu_s, mu_z, use_gan);
  SwapGrid grid;
  grid.originals = {x_a, x_b};
  grid.reconstructions = {images[0], images[1]};
  grid.swapped = {images[2], images[3]};
  return grid;
}

// Frames decode the linear path of the chosen latent(s) from x_a's encoding
// toward x_b's; latents outside the chosen space stay at x_a's encoding.
// Frame i uses interpolation weight i/(steps-1), so the first and last frame
// are exact decodes of the endpoint codes.
template <typename T>
std::vector<ImageU8> interpolate(model::NetworkBundle<T>& net, const ImageU8& x_a,
                                 const ImageU8& x_b, int steps, LatentSpace space,
                                 bool use_gan = true) {
  if (steps < 2) throw std::invalid_argument("interpolate: steps must be >= 2");
  EncodedMeans enc = qual_detail::encode_two(net, x_a, x_b);
  auto lerp = [](const std::vector<double>& a, const std::vector<double>& b,
                 double t) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
    return out;
  };
  std::vector<std::vector<double>> mu_s, mu_z;
  for (int i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / (steps - 1);
    mu_s.push_back(space != LatentSpace::kBackground
                       ? lerp(enc.mu_s[0], enc.mu_s[1], t)
                       : enc.mu_s[0]);
    mu_z.push_back(space != LatentSpace::kSalient ? lerp(enc.mu_z[0], enc.mu_z[1], t)
                                                  : enc.mu_z[0]);
  }
  return decode_codes(net, mu_s, mu_z, use_gan);
}

inline std::string write_swap_figure(const std::string& dir, const std::string& id_a,
                                     const std::string& id_b, const SwapGrid& grid) {
  const std::string path =
      (std::filesystem::path(dir) / ("swap_" + id_a + "_" + id_b + ".png")).string();
  save_image(path, montage({{grid.originals[0], grid.originals[1]},
                            {grid.reconstructions[0], grid.reconstructions[1]},
                            {grid.swapped[0], grid.swapped[1]}}));
  return path;
}

inline std::string write_interp_figure(const std::string& dir, const std::string& id_a,
                                       const std::string& id_b, LatentSpace space,
                                       const std::vector<ImageU8>& frames) {
  const std::string path =
      (std::filesystem::path(dir) /
       ("interp_" + id_a + "_" + id_b + "_" + space_name(space) + ".png"))
          .string();
  save_image(path, montage({frames}));
  return path;
}

}  // namespace sscvae::eval
