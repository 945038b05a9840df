#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/image.hpp"
#include "sscvae/core/rng.hpp"
#include "sscvae/core/tensor.hpp"
#include "sscvae/data/dataset_io.hpp"
#include "sscvae/model/arch.hpp"
#include "sscvae/nn/adam.hpp"
#include "sscvae/nn/layers.hpp"
#include "sscvae/nn/sequential.hpp"

namespace sscvae::eval {

inline constexpr int kFidFeatureDim = 64;

namespace feat_detail {

// Mean softmax cross-entropy over (N, K) logits; fills dlogits when given.
inline double softmax_ce(const Tensor<float>& logits, const std::vector<int>& y,
                         Tensor<float>* dlogits) {
  const int n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data() + static_cast<std::size_t>(i) * k;
    float m = row[0];
    for (int c = 1; c < k; ++c) m = std::max(m, row[c]);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += std::exp(static_cast<double>(row[c]) - m);
    const double lse = m + std::log(sum);
    total += lse - row[y[static_cast<std::size_t>(i)]];
    if (dlogits) {
      float* drow = dlogits->data() + static_cast<std::size_t>(i) * k;
      for (int c = 0; c < k; ++c) {
        const double p = std::exp(static_cast<double>(row[c]) - lse);
        drow[c] = static_cast<float>(
            (p - (c == y[static_cast<std::size_t>(i)] ? 1.0 : 0.0)) / n);
      }
    }
  }
  return total / n;
}

}  // namespace feat_detail

// Small convolutional classifier for the three-way toy task whose frozen
// 64-d penultimate layer defines the feature space used by fid(). Trained
// once per dataset with a fixed seed and stored next to the data, so every
// later evaluation embeds through the identical network.
class FidFeatures {
 public:
  static FidFeatures build(int image_size = 128) {
    if (image_size % 16 != 0)
      throw std::invalid_argument("feature net: image size must divide by 16");
    FidFeatures f;
    f.image_size_ = image_size;
    auto& t = f.trunk_;
    t.emplace<nn::Conv2d<float>>("fid.conv1", 3, 12, 3, 2, 1);
    t.emplace<nn::ReLU<float>>();
    t.emplace<nn::Conv2d<float>>("fid.conv2", 12, 24, 3, 2, 1);
    t.emplace<nn::ReLU<float>>();
    t.emplace<nn::Conv2d<float>>("fid.conv3", 24, 32, 3, 2, 1);
    t.emplace<nn::ReLU<float>>();
    t.emplace<nn::Conv2d<float>>("fid.conv4", 32, 32, 3, 2, 1);
    t.emplace<nn::ReLU<float>>();
    t.emplace<nn::Flatten<float>>();
    const int spatial = image_size / 16;
    t.emplace<nn::Linear<float>>("fid.embed", 32 * spatial * spatial,
                                 kFidFeatureDim);
    auto& h = f.head_;
    h.emplace<nn::ReLU<float>>();
    h.emplace<nn::Linear<float>>("fid.logits", kFidFeatureDim, 3);
    return f;
  }

  static FidFeatures train(const data::DownstreamSet& ds, std::uint64_t seed,
                           int epochs = 8, int batch_size = 32,
                           float learning_rate = 1e-3f) {
    if (ds.empty())
      throw std::invalid_argument("feature net: downstream set is empty");
    std::vector<int> train_idx, test_idx;
    std::array<int, 3> class_count{0, 0, 0};
    for (int i = 0; i < ds.size(); ++i) {
      if (ds.split[static_cast<std::size_t>(i)] == data::Split::kTrain) {
        train_idx.push_back(i);
        ++class_count[static_cast<std::size_t>(ds.klass[static_cast<std::size_t>(i)])];
      } else {
        test_idx.push_back(i);
      }
    }
    for (int c : class_count)
      if (c == 0)
        throw std::invalid_argument("feature net: a class is missing from training");

    FidFeatures f = build(ds.images[0].h);
    auto params = f.all_params();
    model::init_params(params, derive_seed(seed, "fid_features"));
    nn::Adam<float> opt(params, learning_rate);

    for (int epoch = 0; epoch < epochs; ++epoch) {
      Rng rng(derive_seed(seed, "fid_epoch", {static_cast<std::uint64_t>(epoch)}));
      auto perm = train_idx;
      rng.shuffle(perm.begin(), perm.end());
      for (std::size_t ofs = 0; ofs < perm.size(); ofs += static_cast<std::size_t>(batch_size)) {
        const int n = static_cast<int>(
            std::min(perm.size() - ofs, static_cast<std::size_t>(batch_size)));
        Tensor<float> x({n, 3, f.image_size_, f.image_size_});
        std::vector<int> y;
        y.reserve(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
          const int idx = perm[ofs + static_cast<std::size_t>(j)];
          image_into_tensor(ds.images[static_cast<std::size_t>(idx)], x, j);
          y.push_back(ds.klass[static_cast<std::size_t>(idx)]);
        }
        opt.zero_grads();
        const Tensor<float>& emb = f.trunk_.forward(x, true);
        const Tensor<float>& logits = f.head_.forward(emb, true);
        Tensor<float> dlogits(logits.shape());
        feat_detail::softmax_ce(logits, y, &dlogits);
        Tensor<float> demb = f.head_.backward(dlogits, true);
        f.trunk_.backward(demb, true);
        opt.step();
      }
    }

    if (!test_idx.empty()) {
      int correct = 0;
      for (int i : test_idx)
        if (f.classify(ds.images[static_cast<std::size_t>(i)]) ==
            ds.klass[static_cast<std::size_t>(i)])
          ++correct;
      f.heldout_accuracy_ = static_cast<double>(correct) /
                            static_cast<double>(test_idx.size());
    }
    return f;
  }

  std::vector<std::vector<double>> embed(const std::vector<ImageU8>& images,
                                         int batch_size = 64) {
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    for (std::size_t ofs = 0; ofs < images.size(); ofs += static_cast<std::size_t>(batch_size)) {
      const int n = static_cast<int>(
          std::min(images.size() - ofs, static_cast<std::size_t>(batch_size)));
      Tensor<float> x({n, 3, image_size_, image_size_});
      for (int j = 0; j < n; ++j)
        image_into_tensor(images[ofs + static_cast<std::size_t>(j)], x, j);
      const Tensor<float>& emb = f_forward(x);
      for (int j = 0; j < n; ++j) {
        std::vector<double> row(static_cast<std::size_t>(kFidFeatureDim));
        for (int d = 0; d < kFidFeatureDim; ++d)
          row[static_cast<std::size_t>(d)] =
              emb.data()[static_cast<std::size_t>(j) * kFidFeatureDim + d];
        out.push_back(std::move(row));
      }
    }
    return out;
  }

  int classify(const ImageU8& img) {
    Tensor<float> x = image_to_tensor<float>(img);
    const Tensor<float>& logits = head_.forward(trunk_.forward(x, false), false);
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (logits.data()[c] > logits.data()[best]) best = c;
    return best;
  }

  double heldout_accuracy() const { return heldout_accuracy_; }
  int image_size() const { return image_size_; }

  std::uint64_t param_hash() {
    std::uint64_t h = 1469598103934665603ull;
    for (auto* p : all_params())
      h = fnv1a64(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::size_t>(p->value.numel()) * sizeof(float), h);
    return h;
  }

  void save(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write feature net: " + path);
    os.write(kMagic, 12);
    const std::int32_t size = image_size_;
    os.write(reinterpret_cast<const char*>(&size), 4);
    const double acc = heldout_accuracy_;
    os.write(reinterpret_cast<const char*>(&acc), 8);
    auto params = all_params();
    const std::uint32_t count = static_cast<std::uint32_t>(params.size());
    os.write(reinterpret_cast<const char*>(&count), 4);
    for (auto* p : params) {
      const std::uint32_t len = static_cast<std::uint32_t>(p->name.size());
      os.write(reinterpret_cast<const char*>(&len), 4);
      os.write(p->name.data(), len);
      os.write(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::streamsize>(p->value.numel() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("short write: " + path);
  }

  static FidFeatures load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open feature net: " + path);
    char magic[12];
    is.read(magic, 12);
    if (!is || std::string(magic, 12) != kMagic)
      throw std::runtime_error("bad feature net file: " + path);
    std::int32_t size = 0;
    is.read(reinterpret_cast<char*>(&size), 4);
    double acc = 0;
    is.read(reinterpret_cast<char*>(&acc), 8);
    FidFeatures f = build(size);
    f.heldout_accuracy_ = acc;
    std::uint32_t count = 0;
    is.read(reinterpret_cast<char*>(&count), 4);
    auto params = f.all_params();
    if (count != params.size())
      throw std::runtime_error("feature net parameter count mismatch: " + path);
    for (auto* p : params) {
      std::uint32_t len = 0;
      is.read(reinterpret_cast<char*>(&len), 4);
      std::string name(len, '\0');
      is.read(name.data(), len);
      if (name != p->name)
        throw std::runtime_error("feature net parameter order mismatch: " + path);
      is.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.numel() * sizeof(float)));
    }
    if (!is) throw std::runtime_error("truncated feature net file: " + path);
    return f;
  }

 private:
  static constexpr const char kMagic[13] = "SSCVAEFIDF1\n";

  Tensor<float> f_forward(const Tensor<float>& x) { return trunk_.forward(x, false); }

  std::vector<nn::Parameter<float>*> all_params() {
    std::vector<nn::Parameter<float>*> out;
    trunk_.collect_params(out);
    head_.collect_params(out);
    return out;
  }

  int image_size_ = 128;
  double heldout_accuracy_ = 0.0;
  nn::Sequential<float> trunk_;
  nn::Sequential<float> head_;
};

inline std::vector<std::vector<double>> embed_for_fid(
    FidFeatures& net, const std::vector<ImageU8>& images) {
  return net.embed(images);
}

// The artifact seed is a constant so the feature space depends only on the
// dataset, never on which command or run seed first materialized it.
inline constexpr std::uint64_t kFidFeatureSeed = 90210;

// Loads the dataset's feature net, training and persisting it on first use.
inline FidFeatures ensure_fid_features(const std::string& dataset_dir) {
  namespace fs = std::filesystem;
  const std::string path = (fs::path(dataset_dir) / "fid_features.bin").string();
  if (fs::exists(path)) return FidFeatures::load(path);
  auto ds = data::load_downstream(dataset_dir);
  if (ds.empty())
    throw std::runtime_error(
        "no downstream.csv under " + dataset_dir +
        "; the FID feature space needs the three-way patch set");
  FidFeatures f = FidFeatures::train(ds, kFidFeatureSeed);
  f.save(path);
  return f;
}

}  // namespace sscvae::eval
