#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/image.hpp"
#include "sscvae/core/rng.hpp"
#include "sscvae/core/tensor.hpp"
#include "sscvae/data/dataset_io.hpp"
#include "sscvae/eval/embed.hpp"
#include "sscvae/eval/features.hpp"
#include "sscvae/eval/metrics.hpp"
#include "sscvae/model/bundle.hpp"
#include "sscvae/model/objectives.hpp"
#include "sscvae/nn/adam.hpp"
#include "sscvae/train/config.hpp"

namespace sscvae::train {

// Line-oriented training log: one `step,stage,term,value` record per loss
// term per epoch, plus one `*_init` record per stage before its first step.
class MetricsLog {
 public:
  void record(long long step, int stage, const std::string& term, double value) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%lld,%d,%s,%.9g", step, stage, term.c_str(),
                  value);
    lines_.emplace_back(buf);
  }

  const std::vector<std::string>& lines() const { return lines_; }

  int count(int stage, const std::string& term) const {
    const std::string tag = "," + std::to_string(stage) + "," + term + ",";
    int n = 0;
    for (const auto& l : lines_)
      if (l.find(tag) != std::string::npos) ++n;
    return n;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& l : lines_) {
      out += l;
      out += '\n';
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write metrics log: " + path);
    os << to_text();
  }

 private:
  std::vector<std::string> lines_;
};

struct StageResult {
  int stage = 0;
  std::map<std::string, double> final_terms;
  std::vector<std::map<std::string, double>> epoch_trail;  // one entry per epoch run
  double wall_seconds = 0.0;
  double initial_validation = 0.0;
  double best_validation = 0.0;
  int best_epoch = -1;  // -1 = initialization was never improved on
  bool diverged = false;
  bool collapse_warning = false;
  std::string note;
};

struct PairView {
  const ImageU8* composite = nullptr;
  const ImageU8* background = nullptr;
  const ImageU8* mask = nullptr;
};

struct Stage1Data {
  std::vector<PairView> train_pairs, val_pairs;
  std::vector<const ImageU8*> train_bg, val_bg;
};

struct Stage2Data {
  std::vector<const ImageU8*> train_high, train_low, val_high, val_low;
};

struct Stage3Data {
  std::vector<const ImageU8*> train, val;
};

inline Stage1Data stage1_data(const data::PatchStore& store,
                              const data::PairSet& pairs) {
  Stage1Data d;
  for (int i = 0; i < pairs.size(); ++i) {
    const auto j = static_cast<std::size_t>(i);
    if (pairs.split[j] == data::Split::kTest) continue;
    PairView v{&pairs.composite[j], &store.image(pairs.background_entry[j]),
               &pairs.mask[j]};
    (pairs.split[j] == data::Split::kTrain ? d.train_pairs : d.val_pairs).push_back(v);
  }
  for (data::Split s : {data::Split::kTrain, data::Split::kVal}) {
    auto& pool = s == data::Split::kTrain ? d.train_bg : d.val_bg;
    for (int i : store.indices(s, data::Group::kBackground))
      pool.push_back(&store.image(i));
  }
  return d;
}

inline Stage2Data stage2_data(const data::PatchStore& store) {
  Stage2Data d;
  for (int i : store.indices(data::Split::kTrain, data::Density::kHigh))
    d.train_high.push_back(&store.image(i));
  for (int i : store.indices(data::Split::kTrain, data::Density::kLow))
    d.train_low.push_back(&store.image(i));
  for (int i : store.indices(data::Split::kVal, data::Density::kHigh))
    d.val_high.push_back(&store.image(i));
  for (int i : store.indices(data::Split::kVal, data::Density::kLow))
    d.val_low.push_back(&store.image(i));
  return d;
}

inline Stage3Data stage3_data(const data::PatchStore& store) {
  Stage3Data d;
  for (int i : store.indices(data::Split::kTrain)) d.train.push_back(&store.image(i));
  for (int i : store.indices(data::Split::kVal)) d.val.push_back(&store.image(i));
  return d;
}

namespace cascade_detail {

template <typename T>
struct Snapshot {
  std::vector<Tensor<T>> values;

  static Snapshot take(const std::vector<nn::Parameter<T>*>& ps) {
    Snapshot s;
    s.values.reserve(ps.size());
    for (auto* p : ps) s.values.push_back(p->value);
    return s;
  }

  void restore(const std::vector<nn::Parameter<T>*>& ps) const {
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = values[i];
  }
};

template <typename T>
std::vector<nn::Parameter<T>*> vae_params(model::NetworkBundle<T>& net) {
  std::vector<nn::Parameter<T>*> out;
  for (auto [name, comp] : net.components()) {
    if (name == "gan_generator" || name == "gan_discriminator") continue;
    for (auto* p : comp->params()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<nn::Parameter<T>*> gan_params(model::NetworkBundle<T>& net) {
  std::vector<nn::Parameter<T>*> out;
  for (auto* p : net.gan_generator.params()) out.push_back(p);
  for (auto* p : net.gan_discriminator.params()) out.push_back(p);
  return out;
}

template <typename T>
Tensor<T> batch_images(const std::vector<const ImageU8*>& imgs,
                       const std::vector<int>& idx) {
  const ImageU8& first = *imgs.at(static_cast<std::size_t>(idx.at(0)));
  Tensor<T> t({static_cast<int>(idx.size()), first.c, first.h, first.w});
  for (std::size_t j = 0; j < idx.size(); ++j)
    image_into_tensor(*imgs[static_cast<std::size_t>(idx[j])], t,
                      static_cast<int>(j));
  return t;
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& t, const std::vector<int>& rows) {
  std::vector<int> shape = t.shape();
  shape[0] = static_cast<int>(rows.size());
  Tensor<T> out(shape);
  const std::int64_t stride = t.numel() / t.dim(0);
  for (std::size_t j = 0; j < rows.size(); ++j)
    std::copy_n(t.data() + rows[j] * stride, stride,
                out.data() + static_cast<std::int64_t>(j) * stride);
  return out;
}

inline std::vector<std::vector<int>> chunk_indices(const std::vector<int>& order,
                                                   int chunk) {
  std::vector<std::vector<int>> out;
  for (std::size_t ofs = 0; ofs < order.size(); ofs += static_cast<std::size_t>(chunk))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(ofs),
                     order.begin() +
                         static_cast<std::ptrdiff_t>(
                             std::min(order.size(), ofs + static_cast<std::size_t>(chunk))));
  return out;
}

template <typename T>
std::vector<std::vector<double>> salient_means(
    model::NetworkBundle<T>& net, const std::vector<const ImageU8*>& imgs) {
  return eval::encode_means(
             net,
             [&](int i) -> const ImageU8& { return *imgs[static_cast<std::size_t>(i)]; },
             static_cast<int>(imgs.size()))
      .mu_s;
}

// mu_s ⊕ mu_z of every image, encoded in evaluation mode. Stage 3 trains on
// these fixed codes.
template <typename T>
Tensor<T> encode_codes(model::NetworkBundle<T>& net,
                       const std::vector<const ImageU8*>& imgs) {
  eval::EncodedMeans enc = eval::encode_means(
      net, [&](int i) -> const ImageU8& { return *imgs[static_cast<std::size_t>(i)]; },
      static_cast<int>(imgs.size()));
  std::vector<int> all(enc.mu_s.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return eval::means_to_codes<T>(enc.mu_s, enc.mu_z, all);
}

template <typename T>
model::Stage1LossConfig<T> stage1_cfg(const TrainConfig& cfg, std::uint64_t noise) {
  model::Stage1LossConfig<T> lc;
  lc.lambda1 = cfg.lambda1;
  lc.lambda2 = cfg.lambda2;
  lc.branch_salient_map = cfg.branch_salient_map;
  lc.branch_background = cfg.branch_background;
  lc.branch_classifier = cfg.branch_classifier;
  lc.noise_seed = noise;
  return lc;
}

template <typename T>
struct Stage1Terms {
  double elbo_c = 0, elbo_b = 0, salient_map_mse = 0, background_mse = 0, bce = 0,
         total = 0;
  void add(const model::Stage1LossBreakdown<T>& b, double w) {
    elbo_c += w * b.elbo_c;
    elbo_b += w * b.elbo_b;
    salient_map_mse += w * b.salient_map_mse;
    background_mse += w * b.background_mse;
    bce += w * b.bce;
    total += w * b.total;
  }
  std::map<std::string, double> means(double wsum) const {
    return {{"elbo_c", elbo_c / wsum},
            {"elbo_b", elbo_b / wsum},
            {"salient_map_mse", salient_map_mse / wsum},
            {"background_mse", background_mse / wsum},
            {"bce", bce / wsum},
            {"total", total / wsum}};
  }
};

// Builds the composite/mask/paired-background tensors for a set of pairs and
// an independently drawn plain-background set.
template <typename T>
model::Stage1Batch<T> make_stage1_batch(const std::vector<PairView>& pairs,
                                        const std::vector<int>& pair_idx,
                                        const std::vector<const ImageU8*>& bg_pool,
                                        const std::vector<int>& bg_idx) {
  const ImageU8& c0 = *pairs.at(static_cast<std::size_t>(pair_idx.at(0))).composite;
  model::Stage1Batch<T> b;
  b.x_c = Tensor<T>({static_cast<int>(pair_idx.size()), c0.c, c0.h, c0.w});
  b.mask = Tensor<T>({static_cast<int>(pair_idx.size()), 1, c0.h, c0.w});
  b.bg = Tensor<T>({static_cast<int>(pair_idx.size()), c0.c, c0.h, c0.w});
  for (std::size_t j = 0; j < pair_idx.size(); ++j) {
    const PairView& v = pairs[static_cast<std::size_t>(pair_idx[j])];
    image_into_tensor(*v.composite, b.x_c, static_cast<int>(j));
    image_into_tensor(*v.mask, b.mask, static_cast<int>(j));
    image_into_tensor(*v.background, b.bg, static_cast<int>(j));
  }
  b.x_b = batch_images<T>(bg_pool, bg_idx);
  return b;
}

// Validation pass over every validation pair, with a fixed noise stream so
// epochs stay comparable; plain backgrounds cycle through the pool in order.
template <typename T>
double stage1_validation(model::NetworkBundle<T>& net, const Stage1Data& d,
                         const TrainConfig& cfg) {
  std::vector<int> order(d.val_pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  double acc = 0.0, wsum = 0.0;
  int bg_cursor = 0;
  int batch_index = 0;
  for (const auto& chunk : chunk_indices(order, cfg.batch_size)) {
    std::vector<int> bg_idx;
    for (std::size_t j = 0; j < chunk.size(); ++j)
      bg_idx.push_back((bg_cursor++) % static_cast<int>(d.val_bg.size()));
    auto batch = make_stage1_batch<T>(d.val_pairs, chunk, d.val_bg, bg_idx);
    auto lc = stage1_cfg<T>(cfg, derive_seed(cfg.seed, "stage1_val_noise",
                                             {static_cast<std::uint64_t>(batch_index)}));
    auto b = model::stage1_loss(net, batch, lc, false);
    acc += static_cast<double>(b.total) * static_cast<double>(chunk.size());
    wsum += static_cast<double>(chunk.size());
    ++batch_index;
  }
  return acc / wsum;
}

}  // namespace cascade_detail

// Stage 1: joint disentanglement training of the two encoders, three decoder
// branches and the classifier on synthetic pairs plus plain backgrounds.
// Returns with the best-validation parameters restored into `net`.
template <typename T>
StageResult train_stage1(model::NetworkBundle<T>& net, const Stage1Data& d,
                         const TrainConfig& cfg, MetricsLog& log) {
  namespace cd = cascade_detail;
  cfg.validate();
  if (d.train_pairs.empty() || d.train_bg.empty())
    throw std::invalid_argument("train_stage1: empty training pairs or backgrounds");
  if (d.val_pairs.empty() || d.val_bg.empty())
    throw std::invalid_argument("train_stage1: empty validation pairs or backgrounds");

  const auto t0 = std::chrono::steady_clock::now();
  StageResult r;
  r.stage = 1;

  auto params = cd::vae_params(net);
  nn::Adam<T> adam(params, static_cast<T>(cfg.learning_rate));
  const std::uint64_t gan_g = net.component_hash("gan_generator");
  const std::uint64_t gan_d = net.component_hash("gan_discriminator");

  r.initial_validation = cd::stage1_validation(net, d, cfg);
  r.best_validation = r.initial_validation;
  auto best = cd::Snapshot<T>::take(params);
  log.record(0, 1, "val_total_init", r.initial_validation);

  long long step = 0;
  std::vector<int> order(d.train_pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs_stage1 && !r.diverged; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "stage1_epoch", {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order.begin(), order.end());
    cd::Stage1Terms<T> sums;
    double wsum = 0.0;
    int batch_index = 0;
    for (const auto& chunk : cd::chunk_indices(order, cfg.batch_size)) {
      std::vector<int> bg_idx;
      for (std::size_t j = 0; j < chunk.size(); ++j)
        bg_idx.push_back(static_cast<int>(
            rng.uniform_int(static_cast<std::int64_t>(d.train_bg.size()))));
      auto batch = cd::make_stage1_batch<T>(d.train_pairs, chunk, d.train_bg, bg_idx);
      auto lc = cd::stage1_cfg<T>(
          cfg, derive_seed(cfg.seed, "stage1_noise",
                           {static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(batch_index)}));
      adam.zero_grads();
      auto b = model::stage1_loss(net, batch, lc, true);
      if (!std::isfinite(static_cast<double>(b.total))) {
        r.diverged = true;
        r.note = "stage 1 diverged: non-finite loss at epoch " +
                 std::to_string(epoch) + " step " + std::to_string(step) +
                 "; restored best checkpoint";
        break;
      }
      adam.step();
      ++step;
      ++batch_index;
      sums.add(b, static_cast<double>(chunk.size()));
      wsum += static_cast<double>(chunk.size());
    }
    if (r.diverged) break;

    auto terms = sums.means(wsum);
    const double val = cd::stage1_validation(net, d, cfg);
    terms["val_total"] = val;
    for (const auto& [term, value] : terms) log.record(step, 1, term, value);
    r.epoch_trail.push_back(terms);
    if (val < r.best_validation) {
      r.best_validation = val;
      r.best_epoch = epoch;
      best = cd::Snapshot<T>::take(params);
    }
  }

  best.restore(params);
  if (!r.epoch_trail.empty()) r.final_terms = r.epoch_trail.back();
  if (net.component_hash("gan_generator") != gan_g ||
      net.component_hash("gan_discriminator") != gan_d)
    throw std::logic_error("train_stage1: GAN parameters changed");
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// Stage 2: density fine-tuning of the salient encoder only. Every other
// component is frozen and verified by hash. The selection metric is the
// HIGH/LOW silhouette of the validation salient means. When `drift` is
// given, the stage-1 validation loss is re-evaluated once at the end and
// logged as stage1_val_total.
template <typename T>
StageResult train_stage2(model::NetworkBundle<T>& net, const Stage2Data& d,
                         const TrainConfig& cfg, MetricsLog& log,
                         const Stage1Data* drift = nullptr) {
  namespace cd = cascade_detail;
  cfg.validate();
  if (d.train_high.size() < 2 || d.train_low.empty())
    throw std::invalid_argument(
        "train_stage2: need >= 2 HIGH and >= 1 LOW training patches");
  if (d.val_high.size() < 2 || d.val_low.size() < 2)
    throw std::invalid_argument(
        "train_stage2: need >= 2 HIGH and >= 2 LOW validation patches");

  const auto t0 = std::chrono::steady_clock::now();
  StageResult r;
  r.stage = 2;

  auto params = net.salient_encoder.params();
  nn::Adam<T> adam(params, static_cast<T>(cfg.learning_rate));
  std::map<std::string, std::uint64_t> frozen;
  for (auto [name, comp] : net.components())
    if (name != "salient_encoder") frozen[name] = net.component_hash(name);

  auto val_silhouette = [&]() {
    auto mu_high = cd::salient_means(net, d.val_high);
    auto mu_low = cd::salient_means(net, d.val_low);
    std::vector<std::vector<double>> pts;
    std::vector<int> labels;
    for (auto& m : mu_high) {
      pts.push_back(std::move(m));
      labels.push_back(1);
    }
    for (auto& m : mu_low) {
      pts.push_back(std::move(m));
      labels.push_back(0);
    }
    return eval::silhouette(pts, labels);
  };

  r.initial_validation = val_silhouette();
  r.best_validation = r.initial_validation;
  auto best = cd::Snapshot<T>::take(params);
  log.record(0, 2, "val_silhouette_init", r.initial_validation);

  const int h_target = std::max(2, cfg.batch_size / 2);
  long long step = 0;
  std::vector<int> order(d.train_high.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs_stage2 && !r.diverged; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "stage2_epoch", {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order.begin(), order.end());
    auto chunks = cd::chunk_indices(order, h_target);
    if (chunks.size() > 1 && chunks.back().size() < 2) {
      chunks[chunks.size() - 2].push_back(chunks.back()[0]);
      chunks.pop_back();
    }
    double nce = 0, kls = 0, tot = 0, wsum = 0;
    for (const auto& chunk : chunks) {
      if (chunk.size() < 2) continue;  // single leftover HIGH patch, no positive
      const int n_low =
          std::max(1, cfg.batch_size - static_cast<int>(chunk.size()));
      std::vector<int> low_idx;
      for (int j = 0; j < n_low; ++j)
        low_idx.push_back(static_cast<int>(
            rng.uniform_int(static_cast<std::int64_t>(d.train_low.size()))));
      Tensor<T> x_high = cd::batch_images<T>(d.train_high, chunk);
      Tensor<T> x_low = cd::batch_images<T>(d.train_low, low_idx);
      model::Stage2LossConfig<T> lc;
      lc.temperature = cfg.temperature;
      lc.kl_sign = cfg.kl_sign;
      lc.anchor_index = 0;
      net.salient_encoder.zero_grads();
      auto b = model::stage2_loss(net, x_high, x_low, lc, true);
      if (!std::isfinite(static_cast<double>(b.total))) {
        r.diverged = true;
        r.note = "stage 2 diverged: non-finite loss at epoch " +
                 std::to_string(epoch) + " step " + std::to_string(step) +
                 "; restored best checkpoint";
        break;
      }
      adam.step();
      ++step;
      const double w = static_cast<double>(chunk.size());
      nce += w * b.info_nce;
      kls += w * b.kl_s;
      tot += w * b.total;
      wsum += w;
    }
    if (r.diverged) break;

    std::map<std::string, double> terms{
        {"info_nce", nce / wsum}, {"kl_s", kls / wsum}, {"total", tot / wsum}};
    terms["val_silhouette"] = val_silhouette();
    for (const auto& [term, value] : terms) log.record(step, 2, term, value);
    r.epoch_trail.push_back(terms);
    if (terms["val_silhouette"] > r.best_validation) {
      r.best_validation = terms["val_silhouette"];
      r.best_epoch = epoch;
      best = cd::Snapshot<T>::take(params);
    }
  }

  best.restore(params);
  if (!r.epoch_trail.empty()) r.final_terms = r.epoch_trail.back();
  for (const auto& [name, h] : frozen)
    if (net.component_hash(name) != h)
      throw std::logic_error("train_stage2: frozen component changed: " + name);
  if (drift != nullptr) {
    const double v = cascade_detail::stage1_validation(net, *drift, cfg);
    log.record(step, 2, "stage1_val_total", v);
    r.final_terms["stage1_val_total"] = v;
  }
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline constexpr double kCollapseDLoss = 1e-4;
inline constexpr int kCollapseSteps = 100;

// Stage 3: adversarial reconstruction on frozen codes. Encoders are frozen
// (hash-checked); the generator is additionally pulled toward the frozen
// image decoder's reconstructions. Selection: validation FID when a feature
// network is supplied, distillation MSE otherwise.
template <typename T>
StageResult train_stage3(model::NetworkBundle<T>& net, const Stage3Data& d,
                         const TrainConfig& cfg, MetricsLog& log,
                         eval::FidFeatures* features = nullptr) {
  namespace cd = cascade_detail;
  cfg.validate();
  if (d.train.empty()) throw std::invalid_argument("train_stage3: no training patches");
  if (d.val.size() < 2)
    throw std::invalid_argument("train_stage3: need >= 2 validation patches");

  const auto t0 = std::chrono::steady_clock::now();
  StageResult r;
  r.stage = 3;

  std::map<std::string, std::uint64_t> frozen;
  for (auto [name, comp] : net.components())
    if (name != "gan_generator" && name != "gan_discriminator")
      frozen[name] = net.component_hash(name);

  // Codes and distillation targets are fixed for the whole stage.
  Tensor<T> train_codes = cd::encode_codes(net, d.train);
  Tensor<T> val_codes = cd::encode_codes(net, d.val);
  const int n_train = train_codes.dim(0), n_val = val_codes.dim(0);

  // The generator starts as a copy of the frozen decoder: adversarial updates
  // then refine an already-plausible code-to-image mapping instead of having
  // to learn one from scratch. Both networks come from the same constructor,
  // so the parameter lists pair up one-to-one. Skipped at zero epochs to keep
  // that case an identity.
  double out_gain = 1.0;
  if (cfg.epochs_stage3 > 0) {
    auto gen = net.gan_generator.params();
    auto dec = net.image_decoder.params();
    if (gen.size() != dec.size())
      throw std::logic_error("train_stage3: generator/decoder parameter mismatch");
    for (std::size_t i = 0; i < gen.size(); ++i) {
      if (!gen[i]->value.same_shape(dec[i]->value))
        throw std::logic_error("train_stage3: generator/decoder parameter mismatch");
      gen[i]->value = dec[i]->value;
    }
    // A converged decoder drives its output sigmoid to exact 0/1 on most
    // pixels, and a pixel on the rail has derivative exactly zero, so a
    // verbatim copy could not learn at all. Halve the output layer's gain
    // until a probe batch keeps at least half of its pixels off the rails.
    std::vector<nn::Parameter<T>*> out_params;
    for (auto* p : gen)
      if (p->name.ends_with(".out.weight") || p->name.ends_with(".out.bias"))
        out_params.push_back(p);
    if (out_params.size() != 2)
      throw std::logic_error("train_stage3: generator output layer not found");
    std::vector<int> probe(static_cast<std::size_t>(
        std::min<int>(cfg.batch_size, n_train)));
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = static_cast<int>(i);
    const Tensor<T> probe_codes = cd::take_rows(train_codes, probe);
    for (int tries = 0; tries < 12; ++tries) {
      Tensor<T> out = net.gan_generate(probe_codes, false);
      std::int64_t railed = 0;
      for (std::int64_t i = 0; i < out.numel(); ++i)
        if (out[i] == T(0) || out[i] == T(1)) ++railed;
      if (railed * 2 <= out.numel()) break;
      for (auto* p : out_params)
        for (std::int64_t i = 0; i < p->value.numel(); ++i) p->value[i] *= T(0.5);
      out_gain *= 0.5;
    }
  }
  Tensor<T> train_targets;
  {
    Tensor<T> probe_row = cd::take_rows(train_codes, {0});
    Tensor<T> probe = net.decode_image(probe_row);
    std::vector<int> shape = probe.shape();
    shape[0] = n_train;
    train_targets = Tensor<T>(shape);
    std::vector<int> all(static_cast<std::size_t>(n_train));
    for (int i = 0; i < n_train; ++i) all[static_cast<std::size_t>(i)] = i;
    const std::int64_t stride = train_targets.numel() / n_train;
    for (const auto& chunk : cd::chunk_indices(all, cfg.batch_size)) {
      Tensor<T> out = net.decode_image(cd::take_rows(train_codes, chunk));
      for (std::size_t j = 0; j < chunk.size(); ++j)
        std::copy_n(out.data() + static_cast<std::int64_t>(j) * stride, stride,
                    train_targets.data() + chunk[j] * stride);
    }
  }
  Tensor<T> val_targets;
  std::vector<std::vector<double>> val_real_features;
  if (features != nullptr) {
    std::vector<ImageU8> real;
    for (const auto* img : d.val) real.push_back(*img);
    val_real_features = embed_for_fid(*features, real);
  } else {
    std::vector<int> shape = train_targets.shape();
    shape[0] = n_val;
    val_targets = Tensor<T>(shape);
    std::vector<int> all(static_cast<std::size_t>(n_val));
    for (int i = 0; i < n_val; ++i) all[static_cast<std::size_t>(i)] = i;
    const std::int64_t stride = val_targets.numel() / n_val;
    for (const auto& chunk : cd::chunk_indices(all, cfg.batch_size)) {
      Tensor<T> out = net.decode_image(cd::take_rows(val_codes, chunk));
      for (std::size_t j = 0; j < chunk.size(); ++j)
        std::copy_n(out.data() + static_cast<std::int64_t>(j) * stride, stride,
                    val_targets.data() + chunk[j] * stride);
    }
  }
  const std::string val_term = features != nullptr ? "val_fid" : "val_distill";

  auto validation = [&]() {
    std::vector<int> all(static_cast<std::size_t>(n_val));
    for (int i = 0; i < n_val; ++i) all[static_cast<std::size_t>(i)] = i;
    if (features != nullptr) {
      std::vector<ImageU8> fake;
      for (const auto& chunk : cd::chunk_indices(all, cfg.batch_size)) {
        Tensor<T> out = net.gan_generate(cd::take_rows(val_codes, chunk));
        for (std::size_t j = 0; j < chunk.size(); ++j)
          fake.push_back(tensor_to_image(out, static_cast<int>(j)));
      }
      return eval::fid(val_real_features, embed_for_fid(*features, fake));
    }
    double sq = 0;
    for (const auto& chunk : cd::chunk_indices(all, cfg.batch_size)) {
      Tensor<T> out = net.gan_generate(cd::take_rows(val_codes, chunk));
      const Tensor<T> want = cd::take_rows(val_targets, chunk);
      for (std::int64_t i = 0; i < out.numel(); ++i) {
        const double diff = static_cast<double>(out[i]) - static_cast<double>(want[i]);
        sq += diff * diff;
      }
    }
    return sq / static_cast<double>(val_targets.numel());
  };

  auto g_params = net.gan_generator.params();
  auto d_params = net.gan_discriminator.params();
  nn::Adam<T> adam_g(g_params, static_cast<T>(cfg.learning_rate));
  nn::Adam<T> adam_d(d_params, static_cast<T>(cfg.learning_rate));
  auto all_gan = cd::gan_params(net);

  r.initial_validation = validation();
  r.best_validation = r.initial_validation;
  auto best = cd::Snapshot<T>::take(all_gan);
  log.record(0, 3, val_term + "_init", r.initial_validation);
  log.record(0, 3, "g_out_gain", out_gain);

  long long step = 0;
  int collapse_run = 0;
  std::vector<int> order(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs_stage3 && !r.diverged; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "stage3_epoch", {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order.begin(), order.end());
    double ld = 0, lg = 0, adv = 0, dist = 0, wsum = 0;
    int epoch_collapse_max = 0;
    for (const auto& chunk : cd::chunk_indices(order, cfg.batch_size)) {
      Tensor<T> real = cd::batch_images<T>(d.train, chunk);
      Tensor<T> codes = cd::take_rows(train_codes, chunk);
      Tensor<T> targets = cd::take_rows(train_targets, chunk);

      net.gan_discriminator.zero_grads();
      const T loss_d = model::gan_loss_d(net, real, codes, true);
      adam_d.step();

      net.gan_generator.zero_grads();
      auto parts = model::gan_loss_g(net, codes, targets, cfg.distill_weight, true);
      adam_g.step();
      ++step;

      if (!std::isfinite(static_cast<double>(loss_d)) ||
          !std::isfinite(static_cast<double>(parts.loss_g))) {
        r.diverged = true;
        r.note = "stage 3 diverged: non-finite loss at epoch " +
                 std::to_string(epoch) + " step " + std::to_string(step) +
                 "; restored best checkpoint";
        break;
      }
      collapse_run = static_cast<double>(loss_d) < kCollapseDLoss ? collapse_run + 1 : 0;
      epoch_collapse_max = std::max(epoch_collapse_max, collapse_run);
      if (collapse_run >= kCollapseSteps && !r.collapse_warning) {
        r.collapse_warning = true;
        if (r.note.empty())
          r.note = "stage 3 warning: discriminator loss < 1e-4 for " +
                   std::to_string(kCollapseSteps) + " consecutive steps";
      }
      const double w = static_cast<double>(chunk.size());
      ld += w * loss_d;
      lg += w * parts.loss_g;
      adv += w * parts.adv_g;
      dist += w * parts.distill;
      wsum += w;
    }
    if (r.diverged) break;

    std::map<std::string, double> terms{{"loss_d", ld / wsum},
                                        {"loss_g", lg / wsum},
                                        {"adv_g", adv / wsum},
                                        {"distill", dist / wsum},
                                        {"d_collapse_steps",
                                         static_cast<double>(epoch_collapse_max)}};
    terms[val_term] = validation();
    for (const auto& [term, value] : terms) log.record(step, 3, term, value);
    r.epoch_trail.push_back(terms);
    if (terms[val_term] < r.best_validation) {
      r.best_validation = terms[val_term];
      r.best_epoch = epoch;
      best = cd::Snapshot<T>::take(all_gan);
    }
  }

  best.restore(all_gan);
  if (!r.epoch_trail.empty()) r.final_terms = r.epoch_trail.back();
  for (const auto& [name, h] : frozen)
    if (net.component_hash(name) != h)
      throw std::logic_error("train_stage3: frozen component changed: " + name);
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// λ sweep over stage 1.
// ---------------------------------------------------------------------------

inline std::vector<double> default_lambda_grid() {
  return {1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0};
}

struct SweepRow {
  double lambda = 0.0;
  double validation_score = 0.0;  // silhouette of validation salient means
  bool completed = false;
  std::string note;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  int best_index = -1;

  double best_lambda() const {
    return rows.at(static_cast<std::size_t>(best_index)).lambda;
  }

  std::string to_text() const {
    std::string out = "lambda,val_ss_salient,completed\n";
    char buf[96];
    for (const auto& row : rows) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%d\n", row.lambda,
                    row.completed ? row.validation_score : 0.0,
                    row.completed ? 1 : 0);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "best_lambda: %.9g\n", best_lambda());
    return out + buf;
  }
};

// Runs stage 1 once per grid value with lambda1 = lambda2 = λ from identical
// initial parameters, scores each run by the CELLS/BACKGROUND silhouette of
// the validation salient means, and selects the argmax over completed runs.
template <typename T>
SweepResult sweep_lambda(const TrainConfig& base, const std::vector<double>& grid,
                         const Stage1Data& d,
                         const std::vector<const ImageU8*>& val_images,
                         const std::vector<int>& val_groups) {
  namespace cd = cascade_detail;
  if (grid.empty()) throw std::invalid_argument("sweep_lambda: empty grid");
  if (val_images.size() != val_groups.size() || val_images.empty())
    throw std::invalid_argument("sweep_lambda: bad validation set");

  SweepResult result;
  for (double lambda : grid) {
    TrainConfig cfg = base;
    cfg.lambda1 = lambda;
    cfg.lambda2 = lambda;
    auto net =
        model::NetworkBundle<T>::build(base.arch, derive_seed(base.seed, "init"));
    MetricsLog scratch;
    SweepRow row;
    row.lambda = lambda;
    StageResult sr = train_stage1(net, d, cfg, scratch);
    if (sr.diverged) {
      row.note = sr.note;
    } else {
      row.validation_score =
          eval::silhouette(cd::salient_means(net, val_images), val_groups);
      row.completed = true;
    }
    result.rows.push_back(row);
  }
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    if (!result.rows[i].completed) continue;
    if (result.best_index < 0 ||
        result.rows[i].validation_score >
            result.rows[static_cast<std::size_t>(result.best_index)].validation_score)
      result.best_index = static_cast<int>(i);
  }
  if (result.best_index < 0)
    throw std::runtime_error("sweep_lambda: every run diverged");
  return result;
}

}  // namespace sscvae::train
