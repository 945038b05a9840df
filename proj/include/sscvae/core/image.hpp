#pragma once

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/tensor.hpp"

namespace sscvae {

// Interleaved 8-bit image, RGB or single-channel, row-major HWC.
struct ImageU8 {
  int h = 0, w = 0, c = 0;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(int hh, int ww, int cc)
      : h(hh), w(ww), c(cc),
        data(static_cast<std::size_t>(hh) * ww * cc, 0) {}

  std::uint8_t& at(int y, int x, int ch) {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  std::uint8_t at(int y, int x, int ch) const {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
  bool empty() const { return data.empty(); }
  std::uint64_t byte_hash() const { return fnv1a64(data.data(), data.size()); }
};

// 16-bit single-channel label map (instance ids).
struct ImageU16 {
  int h = 0, w = 0;
  std::vector<std::uint16_t> data;

  ImageU16() = default;
  ImageU16(int hh, int ww) : h(hh), w(ww), data(static_cast<std::size_t>(hh) * ww, 0) {}

  std::uint16_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  std::uint16_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
};

namespace img_detail {

inline cv::Mat to_mat(const ImageU8& img) {
  cv::Mat m(img.h, img.w, img.c == 3 ? CV_8UC3 : CV_8UC1);
  std::copy(img.data.begin(), img.data.end(), m.data);
  if (img.c == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
  return m;
}

inline ImageU8 from_mat(const cv::Mat& m_in) {
  cv::Mat m = m_in;
  if (m.channels() == 3) cv::cvtColor(m_in, m, cv::COLOR_BGR2RGB);
  ImageU8 img(m.rows, m.cols, m.channels());
  if (!m.isContinuous()) m = m.clone();
  std::copy(m.data, m.data + img.data.size(), img.data.begin());
  return img;
}

}  // namespace img_detail

inline ImageU8 load_image(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("cannot read image: " + path);
  return img_detail::from_mat(m);
}

inline ImageU8 load_image_gray(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("cannot read image: " + path);
  return img_detail::from_mat(m);
}

inline void save_image(const std::string& path, const ImageU8& img) {
  if (img.empty()) throw std::invalid_argument("save_image: empty image");
  if (!cv::imwrite(path, img_detail::to_mat(img),
                   {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw std::runtime_error("cannot write image: " + path);
}

inline ImageU16 load_label_map(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("cannot read label map: " + path);
  if (m.type() != CV_16UC1)
    throw std::runtime_error("label map must be single-channel 16-bit: " + path);
  if (!m.isContinuous()) m = m.clone();
  ImageU16 img(m.rows, m.cols);
  const auto* p = reinterpret_cast<const std::uint16_t*>(m.data);
  std::copy(p, p + img.data.size(), img.data.begin());
  return img;
}

inline void save_label_map(const std::string& path, const ImageU16& img) {
  cv::Mat m(img.h, img.w, CV_16UC1);
  std::copy(img.data.begin(), img.data.end(),
            reinterpret_cast<std::uint16_t*>(m.data));
  if (!cv::imwrite(path, m, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw std::runtime_error("cannot write label map: " + path);
}

inline ImageU8 resize_bilinear(const ImageU8& img, int h, int w) {
  cv::Mat m = img_detail::to_mat(img), out;
  cv::resize(m, out, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
  return img_detail::from_mat(out);
}

// Nearest neighbor keeps instance ids intact.
inline ImageU16 resize_nearest(const ImageU16& img, int h, int w) {
  cv::Mat m(img.h, img.w, CV_16UC1), out;
  std::copy(img.data.begin(), img.data.end(),
            reinterpret_cast<std::uint16_t*>(m.data));
  cv::resize(m, out, cv::Size(w, h), 0, 0, cv::INTER_NEAREST);
  if (!out.isContinuous()) out = out.clone();
  ImageU16 r(h, w);
  const auto* p = reinterpret_cast<const std::uint16_t*>(out.data);
  std::copy(p, p + r.data.size(), r.data.begin());
  return r;
}

// u8 [0,255] -> scalar [0,1], written into batch row n of an NCHW tensor.
template <typename T>
void image_into_tensor(const ImageU8& img, Tensor<T>& t, int n) {
  if (t.dim(1) != img.c || t.dim(2) != img.h || t.dim(3) != img.w)
    throw std::invalid_argument("image_into_tensor: shape mismatch");
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        t.at(n, ch, y, x) = static_cast<T>(img.at(y, x, ch)) / T(255);
}

template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  Tensor<T> t({1, img.c, img.h, img.w});
  image_into_tensor(img, t, 0);
  return t;
}

// Batch row n of an NCHW tensor in [0,1] -> u8 image, clamped and rounded.
template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& t, int n) {
  ImageU8 img(t.dim(2), t.dim(3), t.dim(1));
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        T v = t.at(n, ch, y, x);
        v = std::min(T(1), std::max(T(0), v));
        img.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(v * T(255)));
      }
  return img;
}

// Grid montage with a uniform margin; all cells must share one shape.
inline ImageU8 montage(const std::vector<std::vector<ImageU8>>& rows, int margin = 2,
                       std::uint8_t fill = 255) {
  if (rows.empty() || rows[0].empty())
    throw std::invalid_argument("montage: empty grid");
  const int ch = rows[0][0].h, cw = rows[0][0].w, cc = rows[0][0].c;
  const int nr = static_cast<int>(rows.size());
  const int nc = static_cast<int>(rows[0].size());
  ImageU8 out(nr * ch + (nr + 1) * margin, nc * cw + (nc + 1) * margin, cc);
  std::fill(out.data.begin(), out.data.end(), fill);
  for (int r = 0; r < nr; ++r) {
    if (static_cast<int>(rows[static_cast<std::size_t>(r)].size()) != nc)
      throw std::invalid_argument("montage: ragged grid");
    for (int c = 0; c < nc; ++c) {
      const ImageU8& cell = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (cell.h != ch || cell.w != cw || cell.c != cc)
        throw std::invalid_argument("montage: mismatched cell shapes");
      const int y0 = margin + r * (ch + margin);
      const int x0 = margin + c * (cw + margin);
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
          for (int k = 0; k < cc; ++k)
            out.at(y0 + y, x0 + x, k) = cell.at(y, x, k);
    }
  }
  return out;
}

}  // namespace sscvae
