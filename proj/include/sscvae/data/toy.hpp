#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/image.hpp"
#include "sscvae/core/kv.hpp"
#include "sscvae/core/rng.hpp"
#include "sscvae/data/dataset_io.hpp"
#include "sscvae/data/pipeline.hpp"

namespace sscvae::data {

struct ToyConfig {
  int n_background = 1000;
  int n_low = 500;
  int n_high = 500;
  int max_cells_per_patch = 16;
  int til_low_min = 1, til_low_max = 4;
  int til_high_min = 5, til_high_max = 10;
  std::array<double, 3> split_ratios{0.7, 0.15, 0.15};
  int n_downstream_per_class = 150;
  double downstream_train_fraction = 2.0 / 3.0;

  void validate() const {
    if (n_background < 1 || n_low < 0 || n_high < 0 || n_low + n_high < 1)
      throw std::invalid_argument(
          "toy config: need at least one BACKGROUND and one CELLS patch");
    if (n_low > 0 && (til_low_min < 1 || til_low_min > til_low_max ||
                      til_low_max >= kHighTilThreshold))
      throw std::invalid_argument("toy config: LOW TIL range must sit in [1, " +
                                  std::to_string(kHighTilThreshold - 1) + "]");
    if (n_high > 0 && (til_high_min < kHighTilThreshold ||
                       til_high_min > til_high_max))
      throw std::invalid_argument("toy config: HIGH TIL range must start at " +
                                  std::to_string(kHighTilThreshold));
    if (n_high > 0 && max_cells_per_patch < til_high_max)
      throw std::invalid_argument(
          "toy config: max_cells_per_patch " + std::to_string(max_cells_per_patch) +
          " cannot hold " + std::to_string(til_high_max) + " TIL instances");
    if (n_low > 0 && max_cells_per_patch < til_low_max)
      throw std::invalid_argument("toy config: max_cells_per_patch too small for LOW");
    double rs = 0;
    for (double r : split_ratios) {
      if (r < 0) throw std::invalid_argument("toy config: negative split ratio");
      rs += r;
    }
    if (std::abs(rs - 1.0) > 1e-9)
      throw std::invalid_argument("toy config: split ratios must sum to 1");
    if (n_downstream_per_class < 0 ||
        (n_downstream_per_class > 0 &&
         (downstream_train_fraction <= 0.0 || downstream_train_fraction >= 1.0)))
      throw std::invalid_argument("toy config: bad downstream settings");
  }

  KvText to_kv() const {
    KvText kv;
    kv.set_int("toy.n_background", n_background);
    kv.set_int("toy.n_low", n_low);
    kv.set_int("toy.n_high", n_high);
    kv.set_int("toy.max_cells_per_patch", max_cells_per_patch);
    kv.set_int("toy.til_low_min", til_low_min);
    kv.set_int("toy.til_low_max", til_low_max);
    kv.set_int("toy.til_high_min", til_high_min);
    kv.set_int("toy.til_high_max", til_high_max);
    kv.set_double("toy.split_train", split_ratios[0]);
    kv.set_double("toy.split_val", split_ratios[1]);
    kv.set_double("toy.split_test", split_ratios[2]);
    kv.set_int("toy.n_downstream_per_class", n_downstream_per_class);
    kv.set_double("toy.downstream_train_fraction", downstream_train_fraction);
    return kv;
  }

  static ToyConfig from_kv(const KvText& kv) {
    ToyConfig c;
    c.n_background = static_cast<int>(kv.get_int("toy.n_background"));
    c.n_low = static_cast<int>(kv.get_int("toy.n_low"));
    c.n_high = static_cast<int>(kv.get_int("toy.n_high"));
    c.max_cells_per_patch = static_cast<int>(kv.get_int("toy.max_cells_per_patch"));
    c.til_low_min = static_cast<int>(kv.get_int("toy.til_low_min"));
    c.til_low_max = static_cast<int>(kv.get_int("toy.til_low_max"));
    c.til_high_min = static_cast<int>(kv.get_int("toy.til_high_min"));
    c.til_high_max = static_cast<int>(kv.get_int("toy.til_high_max"));
    c.split_ratios = {kv.get_double("toy.split_train"),
                      kv.get_double("toy.split_val"),
                      kv.get_double("toy.split_test")};
    c.n_downstream_per_class =
        static_cast<int>(kv.get_int("toy.n_downstream_per_class"));
    c.downstream_train_fraction = kv.get_double("toy.downstream_train_fraction");
    return c;
  }
};

namespace toy_detail {

constexpr int kS = kPatchSize;
// Fill loop targets a small margin above the 10% group threshold so the
// labeling oracle and the generator's intent can never disagree.
constexpr double kRatioMargin = 0.105;

struct Canvas {
  std::array<std::vector<double>, 3> ch;
  Canvas() {
    for (auto& c : ch) c.assign(static_cast<std::size_t>(kS) * kS, 0.0);
  }
  double& at(int k, int y, int x) {
    return ch[static_cast<std::size_t>(k)][static_cast<std::size_t>(y) * kS + x];
  }
};

// Two texture families stand in for tissue appearance variation; the family
// is drawn independently of the patch's group so background style carries no
// group information.
inline Canvas render_texture(Rng& rng) {
  Canvas cv;
  const int family = static_cast<int>(rng.uniform_int(2));
  if (family == 0) {
    const double base[3] = {205 + rng.uniform(-10, 10), 186 + rng.uniform(-10, 10),
                            194 + rng.uniform(-10, 10)};
    struct Blob {
      double cx, cy, inv2s2, amp[3];
    };
    std::vector<Blob> blobs;
    const int nb = 3 + static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < nb; ++i) {
      Blob b;
      b.cx = rng.uniform(0, kS);
      b.cy = rng.uniform(0, kS);
      const double sigma = rng.uniform(12, 28);
      b.inv2s2 = 1.0 / (2.0 * sigma * sigma);
      for (double& a : b.amp) a = rng.uniform(-18, 18);
      blobs.push_back(b);
    }
    for (int y = 0; y < kS; ++y)
      for (int x = 0; x < kS; ++x) {
        double v[3] = {base[0], base[1], base[2]};
        for (const auto& b : blobs) {
          const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
          const double g = std::exp(-d2 * b.inv2s2);
          for (int k = 0; k < 3; ++k) v[k] += b.amp[k] * g;
        }
        for (int k = 0; k < 3; ++k) cv.at(k, y, x) = v[k];
      }
  } else {
    const double base[3] = {196 + rng.uniform(-10, 10), 187 + rng.uniform(-10, 10),
                            210 + rng.uniform(-10, 10)};
    const double theta = rng.uniform(0, 3.14159265358979323846);
    const double freq = rng.uniform(0.05, 0.13) * 2.0 * 3.14159265358979323846;
    const double phase = rng.uniform(0, 2.0 * 3.14159265358979323846);
    const double dx = std::cos(theta), dy = std::sin(theta);
    double amp[3];
    for (double& a : amp) a = rng.uniform(6, 14);
    for (int y = 0; y < kS; ++y)
      for (int x = 0; x < kS; ++x) {
        const double s = std::sin(freq * (x * dx + y * dy) + phase);
        for (int k = 0; k < 3; ++k) cv.at(k, y, x) = base[k] + amp[k] * s;
      }
  }
  for (int y = 0; y < kS; ++y)
    for (int x = 0; x < kS; ++x)
      for (int k = 0; k < 3; ++k) cv.at(k, y, x) += rng.uniform(-6, 6);
  return cv;
}

struct CellSpec {
  double cx = 0, cy = 0;
  double a = 0, b = 0;  // semi-axes, a >= b
  double phi = 0;
  bool til = false;
  double color[3] = {0, 0, 0};
};

// TILs are small and nearly round; other cells are larger and elongated.
// Color bands overlap so hue alone does not identify the subtype.
inline CellSpec sample_cell(Rng& rng, bool til) {
  CellSpec s;
  s.til = til;
  if (til) {
    s.a = rng.uniform(9, 13);
    s.b = s.a * rng.uniform(0.85, 1.0);
    const double c[3] = {82, 48, 116};
    for (int k = 0; k < 3; ++k) s.color[k] = c[k] + rng.uniform(-14, 14);
  } else {
    s.a = rng.uniform(13, 18);
    s.b = s.a * rng.uniform(0.40, 0.60);
    const double c[3] = {124, 72, 104};
    for (int k = 0; k < 3; ++k) s.color[k] = c[k] + rng.uniform(-22, 22);
  }
  s.phi = rng.uniform(0, 3.14159265358979323846);
  return s;
}

inline bool place_cell(Rng& rng, CellSpec& spec,
                       const std::vector<CellSpec>& placed, int max_tries = 200) {
  const double margin = spec.a + 2.0;
  for (int t = 0; t < max_tries; ++t) {
    spec.cx = rng.uniform(margin, kS - margin);
    spec.cy = rng.uniform(margin, kS - margin);
    bool ok = true;
    for (const auto& p : placed) {
      const double dx = spec.cx - p.cx, dy = spec.cy - p.cy;
      const double min_d = 0.75 * (spec.a + p.a);
      if (dx * dx + dy * dy < min_d * min_d) {
        ok = false;
        break;
      }
    }
    if (ok) return true;
  }
  return false;
}

inline void paint_cell(Canvas& cv, ImageU16& labels, int id, const CellSpec& s,
                       Rng& rng) {
  const double cphi = std::cos(s.phi), sphi = std::sin(s.phi);
  const int r = static_cast<int>(std::ceil(s.a)) + 1;
  const int y0 = std::max(0, static_cast<int>(s.cy) - r);
  const int y1 = std::min(kS - 1, static_cast<int>(s.cy) + r);
  const int x0 = std::max(0, static_cast<int>(s.cx) - r);
  const int x1 = std::min(kS - 1, static_cast<int>(s.cx) + r);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - s.cx, dy = y - s.cy;
      const double u = (dx * cphi + dy * sphi) / s.a;
      const double v = (-dx * sphi + dy * cphi) / s.b;
      const double q = u * u + v * v;
      if (q > 1.0) continue;
      labels.at(y, x) = static_cast<std::uint16_t>(id);
      const double rim = q > 0.72 ? 0.80 : 1.0;
      for (int k = 0; k < 3; ++k)
        cv.at(k, y, x) = s.color[k] * rim + rng.uniform(-5, 5);
    }
}

inline ImageU8 canvas_to_image(const Canvas& cv) {
  ImageU8 img(kS, kS, 3);
  for (int y = 0; y < kS; ++y)
    for (int x = 0; x < kS; ++x)
      for (int k = 0; k < 3; ++k) {
        double v = cv.ch[static_cast<std::size_t>(k)]
                        [static_cast<std::size_t>(y) * kS + x];
        // Keep every value strictly inside the 8-bit range: exact 0/255
        // targets put a sigmoid-output regressor's optimum at infinity and
        // saturate it into a zero-gradient regime.
        v = std::min(249.0, std::max(6.0, v));
        img.at(y, x, k) = static_cast<std::uint8_t>(std::lround(v));
      }
  return img;
}

struct RenderedPatch {
  ImageU8 pixels;
  ImageU16 labels;                       // instance map, 0 = background
  std::map<int, CellClass> classes;      // id -> subtype
  int til_count = 0;
};

inline int count_nonzero(const ImageU16& labels) {
  int n = 0;
  for (std::uint16_t v : labels.data) n += v != 0;
  return n;
}

// Renders one patch with exactly n_til TILs plus enough other cells to push
// the cell-area ratio past the margin (n_til = 0 renders pure background).
inline RenderedPatch render_patch(std::uint64_t seed, int n_til, int max_cells) {
  Rng rng(seed);
  RenderedPatch out;
  Canvas cv = render_texture(rng);
  out.labels = ImageU16(kS, kS);
  std::vector<CellSpec> placed;
  int next_id = 1;

  auto add_cell = [&](bool til) -> bool {
    CellSpec s = sample_cell(rng, til);
    if (!place_cell(rng, s, placed)) return false;
    paint_cell(cv, out.labels, next_id, s, rng);
    out.classes[next_id] = til ? CellClass::kTil : CellClass::kOther;
    ++next_id;
    placed.push_back(s);
    return true;
  };

  for (int i = 0; i < n_til; ++i)
    if (!add_cell(true))
      throw std::runtime_error(
          "toy generation: could not place the requested TIL instances; "
          "reduce cell counts or sizes");
  out.til_count = n_til;

  if (n_til > 0) {
    const int n_other_init = static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < n_other_init && static_cast<int>(placed.size()) < max_cells; ++i)
      if (!add_cell(false)) break;
    const double total = static_cast<double>(kS) * kS;
    while (count_nonzero(out.labels) / total <= kRatioMargin) {
      if (static_cast<int>(placed.size()) >= max_cells || !add_cell(false))
        throw std::runtime_error(
            "toy generation: cell budget exhausted before reaching the "
            "cell-area threshold; raise max_cells_per_patch");
    }
    while (static_cast<int>(placed.size()) < max_cells && rng.uniform() < 0.35)
      if (!add_cell(false)) break;
  }
  out.pixels = canvas_to_image(cv);
  return out;
}

// Downstream patch: cells of one subtype only, no area constraint.
inline ImageU8 render_single_class(std::uint64_t seed, int klass) {
  Rng rng(seed);
  Canvas cv = render_texture(rng);
  if (klass != 0) {
    ImageU16 labels(kS, kS);
    std::vector<CellSpec> placed;
    const int n = 3 + static_cast<int>(rng.uniform_int(6));
    for (int i = 0; i < n; ++i) {
      CellSpec s = sample_cell(rng, klass == 1);
      if (!place_cell(rng, s, placed)) break;
      paint_cell(cv, labels, i + 1, s, rng);
      placed.push_back(s);
    }
    if (placed.empty())
      throw std::runtime_error("toy generation: empty downstream patch");
  }
  return canvas_to_image(cv);
}

}  // namespace toy_detail

struct ToyDataset {
  // Parallel to manifest.entries; masks hold the ground-truth union cell
  // mask for CELLS entries and stay empty for BACKGROUND entries.
  DatasetManifest manifest;
  std::vector<Patch> patches;
  std::vector<ImageU8> masks;
  std::vector<PairRecord> pairs;
  DownstreamSet downstream;
};

inline ToyDataset generate_toy_dataset(const ToyConfig& config, std::uint64_t seed) {
  config.validate();

  struct Item {
    Patch patch;
    ImageU8 mask;
  };
  std::map<std::string, Item> by_path;
  std::vector<ManifestEntry> items;

  auto emit = [&](const std::string& kind, int index, std::uint64_t patch_seed,
                  int n_til, Group want_group, Density want_density) {
    auto rendered = toy_detail::render_patch(patch_seed, n_til,
                                             config.max_cells_per_patch);
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%04d", kind.c_str(), index);
    Patch p;
    p.pixels = std::move(rendered.pixels);
    p.tile_id = name;
    p.row = 0;
    p.col = 0;
    auto annotations = annotations_from_label_map(rendered.labels,
                                                  rendered.classes, p.tile_id);
    p.label = label_patch(p, annotations);
    if (p.label.group != want_group || p.label.density != want_density ||
        p.label.til_count != rendered.til_count)
      throw std::runtime_error("toy generation: oracle label disagrees with "
                               "intent for " + p.tile_id);
    Item item;
    if (want_group == Group::kCells) item.mask = patch_union_mask(p, annotations);
    item.patch = std::move(p);
    const std::string path = std::string("patches/") + name + ".png";
    items.push_back({path, item.patch.label, Split::kTrain});
    by_path.emplace(path, std::move(item));
  };

  for (int i = 0; i < config.n_background; ++i)
    emit("bg", i, derive_seed(seed, {0, static_cast<std::uint64_t>(i)}), 0,
         Group::kBackground, Density::kNa);
  for (int i = 0; i < config.n_low; ++i) {
    Rng pick(derive_seed(seed, {1, static_cast<std::uint64_t>(i), 0}));
    const int n_til = config.til_low_min +
                      static_cast<int>(pick.uniform_int(
                          config.til_low_max - config.til_low_min + 1));
    emit("low", i, derive_seed(seed, {1, static_cast<std::uint64_t>(i), 1}), n_til,
         Group::kCells, Density::kLow);
  }
  for (int i = 0; i < config.n_high; ++i) {
    Rng pick(derive_seed(seed, {2, static_cast<std::uint64_t>(i), 0}));
    const int n_til = config.til_high_min +
                      static_cast<int>(pick.uniform_int(
                          config.til_high_max - config.til_high_min + 1));
    emit("high", i, derive_seed(seed, {2, static_cast<std::uint64_t>(i), 1}), n_til,
         Group::kCells, Density::kHigh);
  }

  ToyDataset ds;
  ds.manifest = split_balanced(std::move(items), config.split_ratios,
                               derive_seed(seed, {7}));
  ds.patches.reserve(ds.manifest.entries.size());
  ds.masks.reserve(ds.manifest.entries.size());
  for (const auto& e : ds.manifest.entries) {
    auto& item = by_path.at(e.path);
    ds.patches.push_back(std::move(item.patch));
    ds.masks.push_back(std::move(item.mask));
  }

  std::map<int, ImageU8> masks_by_entry;
  std::vector<ImageU8> images;
  images.reserve(ds.patches.size());
  for (std::size_t i = 0; i < ds.patches.size(); ++i) {
    images.push_back(ds.patches[i].pixels);
    if (ds.manifest.entries[i].label.group == Group::kCells)
      masks_by_entry[static_cast<int>(i)] = ds.masks[i];
  }
  ds.pairs = build_pairs(ds.manifest, images, masks_by_entry,
                         derive_seed(seed, {8}));

  const int n_train = static_cast<int>(config.n_downstream_per_class *
                                       config.downstream_train_fraction);
  for (int klass = 0; klass < 3; ++klass)
    for (int i = 0; i < config.n_downstream_per_class; ++i) {
      ds.downstream.images.push_back(toy_detail::render_single_class(
          derive_seed(seed, {10 + static_cast<std::uint64_t>(klass),
                             static_cast<std::uint64_t>(i)}),
          klass));
      ds.downstream.klass.push_back(klass);
      ds.downstream.split.push_back(i < n_train ? Split::kTrain : Split::kTest);
    }
  return ds;
}

// Writes the full on-disk layout: patches/, masks/, pairs/ + pairs.csv,
// manifest.csv, downstream/ + downstream.csv, meta.txt.
inline ToyDataset write_toy_dataset(const std::string& dir, const ToyConfig& config,
                                    std::uint64_t seed) {
  namespace fs = std::filesystem;
  ToyDataset ds = generate_toy_dataset(config, seed);
  fs::create_directories(fs::path(dir) / "patches");
  fs::create_directories(fs::path(dir) / "masks");
  fs::remove(fs::path(dir) / "fid_features.bin");  // derived from prior data
  for (std::size_t i = 0; i < ds.manifest.entries.size(); ++i) {
    const auto& e = ds.manifest.entries[i];
    save_image((fs::path(dir) / e.path).string(), ds.patches[i].pixels);
    if (e.label.group == Group::kCells)
      save_image((fs::path(dir) / mask_path_for(e.path)).string(), ds.masks[i]);
  }
  ds.manifest.save((fs::path(dir) / "manifest.csv").string());
  write_pairs_csv(dir, ds.manifest, ds.pairs);

  if (!ds.downstream.empty()) {
    fs::create_directories(fs::path(dir) / "downstream");
    std::ofstream os((fs::path(dir) / "downstream.csv").string(),
                     std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write downstream.csv under " + dir);
    os << "path,klass,split\n";
    std::array<int, 3> counter{0, 0, 0};
    for (int i = 0; i < ds.downstream.size(); ++i) {
      const int k = ds.downstream.klass[static_cast<std::size_t>(i)];
      char name[64];
      std::snprintf(name, sizeof(name), "downstream/%s_%04d.png",
                    downstream_class_name(k), counter[static_cast<std::size_t>(k)]++);
      save_image((fs::path(dir) / name).string(),
                 ds.downstream.images[static_cast<std::size_t>(i)]);
      os << name << ',' << downstream_class_name(k) << ','
         << split_name(ds.downstream.split[static_cast<std::size_t>(i)]) << '\n';
    }
  }

  KvText meta = config.to_kv();
  meta.set_int("seed", static_cast<long long>(seed));
  std::ofstream os((fs::path(dir) / "meta.txt").string(),
                   std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write meta.txt under " + dir);
  os << meta.to_text();
  return ds;
}

}  // namespace sscvae::data
