#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/image.hpp"
#include "sscvae/core/rng.hpp"

namespace sscvae::data {

inline constexpr int kPatchSize = 128;
inline constexpr int kTileSize = 1024;
inline constexpr double kCellAreaThreshold = 0.10;  // strict: ratio must exceed
inline constexpr int kHighTilThreshold = 5;         // inclusive: >= 5 is HIGH

enum class Group { kCells, kBackground };
enum class Density { kHigh, kLow, kNa };
enum class Split { kTrain, kVal, kTest };
enum class CellClass { kTil, kOther };

inline const char* group_name(Group g) { return g == Group::kCells ? "CELLS" : "BACKGROUND"; }
inline const char* density_name(Density d) {
  switch (d) {
    case Density::kHigh: return "HIGH";
    case Density::kLow: return "LOW";
    default: return "NA";
  }
}
inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

inline Group parse_group(const std::string& s) {
  if (s == "CELLS") return Group::kCells;
  if (s == "BACKGROUND") return Group::kBackground;
  throw std::invalid_argument("bad group: " + s);
}
inline Density parse_density(const std::string& s) {
  if (s == "HIGH") return Density::kHigh;
  if (s == "LOW") return Density::kLow;
  if (s == "NA") return Density::kNa;
  throw std::invalid_argument("bad density: " + s);
}
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("bad split: " + s);
}

struct PatchLabel {
  Group group = Group::kBackground;
  double cell_area_ratio = 0.0;
  int til_count = 0;
  Density density = Density::kNa;
};

struct Patch {
  ImageU8 pixels;       // kPatchSize x kPatchSize x 3
  std::string tile_id;
  int row = 0, col = 0; // grid position within the tile
  PatchLabel label;
};

// One annotated cell instance; the bitmap covers only its bounding box,
// positioned at (x0, y0) in tile coordinates.
struct CellAnnotation {
  int instance_id = 0;
  CellClass cell_class = CellClass::kOther;
  int x0 = 0, y0 = 0;
  ImageU8 mask;  // single channel, nonzero = inside the instance

  bool empty() const {
    for (std::uint8_t v : mask.data)
      if (v) return false;
    return true;
  }
};

struct SyntheticPair {
  ImageU8 composite;     // background with the cell region pasted in
  ImageU8 background;
  ImageU8 salient_mask;  // single channel, nonzero = pasted region
};

// ---------------------------------------------------------------------------
// Patch extraction and labeling.
// ---------------------------------------------------------------------------

// Non-overlapping kPatchSize tiling in row-major order. The tile must be
// square with a side divisible by the patch size (1024 -> an 8x8 grid).
inline std::vector<Patch> extract_patches(const ImageU8& tile,
                                          const std::string& tile_id) {
  if (tile.h != tile.w)
    throw std::invalid_argument("extract_patches: tile " + tile_id + " is " +
                                std::to_string(tile.w) + "x" + std::to_string(tile.h) +
                                ", expected square");
  if (tile.h % kPatchSize != 0 || tile.h == 0)
    throw std::invalid_argument("extract_patches: tile " + tile_id + " side " +
                                std::to_string(tile.h) + " is not a multiple of " +
                                std::to_string(kPatchSize));
  if (tile.c != 3)
    throw std::invalid_argument("extract_patches: tile " + tile_id + " must be RGB");
  const int grid = tile.h / kPatchSize;
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(grid) * grid);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      Patch p;
      p.tile_id = tile_id;
      p.row = r;
      p.col = c;
      p.pixels = ImageU8(kPatchSize, kPatchSize, 3);
      for (int y = 0; y < kPatchSize; ++y)
        for (int x = 0; x < kPatchSize; ++x)
          for (int k = 0; k < 3; ++k)
            p.pixels.at(y, x, k) = tile.at(r * kPatchSize + y, c * kPatchSize + x, k);
      out.push_back(std::move(p));
    }
  return out;
}

// Ratio of the union of annotation masks clipped to the patch footprint over
// the patch area; group CELLS iff the ratio strictly exceeds 10%; density
// HIGH iff at least kHighTilThreshold TIL instances touch the patch.
inline PatchLabel label_patch(const Patch& patch,
                              const std::vector<CellAnnotation>& annotations) {
  const int px0 = patch.col * kPatchSize, py0 = patch.row * kPatchSize;
  std::vector<std::uint8_t> covered(kPatchSize * kPatchSize, 0);
  int til_count = 0;
  for (const auto& ann : annotations) {
    const int ax0 = std::max(ann.x0, px0);
    const int ay0 = std::max(ann.y0, py0);
    const int ax1 = std::min(ann.x0 + ann.mask.w, px0 + kPatchSize);
    const int ay1 = std::min(ann.y0 + ann.mask.h, py0 + kPatchSize);
    bool touches = false;
    for (int y = ay0; y < ay1; ++y)
      for (int x = ax0; x < ax1; ++x)
        if (ann.mask.at(y - ann.y0, x - ann.x0, 0)) {
          covered[static_cast<std::size_t>(y - py0) * kPatchSize + (x - px0)] = 1;
          touches = true;
        }
    if (touches && ann.cell_class == CellClass::kTil) ++til_count;
  }
  int area = 0;
  for (std::uint8_t v : covered) area += v;

  PatchLabel label;
  label.cell_area_ratio =
      static_cast<double>(area) / (static_cast<double>(kPatchSize) * kPatchSize);
  label.til_count = til_count;
  label.group = label.cell_area_ratio > kCellAreaThreshold ? Group::kCells
                                                           : Group::kBackground;
  label.density = label.group == Group::kCells
                      ? (til_count >= kHighTilThreshold ? Density::kHigh : Density::kLow)
                      : Density::kNa;
  return label;
}

// Union of annotation masks clipped to the patch footprint, in patch-local
// coordinates (255 = cell pixel).
inline ImageU8 patch_union_mask(const Patch& patch,
                                const std::vector<CellAnnotation>& annotations) {
  const int px0 = patch.col * kPatchSize, py0 = patch.row * kPatchSize;
  ImageU8 out(kPatchSize, kPatchSize, 1);
  for (const auto& ann : annotations) {
    const int ax0 = std::max(ann.x0, px0);
    const int ay0 = std::max(ann.y0, py0);
    const int ax1 = std::min(ann.x0 + ann.mask.w, px0 + kPatchSize);
    const int ay1 = std::min(ann.y0 + ann.mask.h, py0 + kPatchSize);
    for (int y = ay0; y < ay1; ++y)
      for (int x = ax0; x < ax1; ++x)
        if (ann.mask.at(y - ann.y0, x - ann.x0, 0))
          out.at(y - py0, x - px0, 0) = 255;
  }
  return out;
}

// Hard-mask replacement: composite = background except where the mask is
// nonzero, which takes the cell patch's pixels. The seed parameter is part
// of the interface for blended variants; hard replacement ignores it.
inline SyntheticPair make_copy_paste_pair(const Patch& cell_patch,
                                          const ImageU8& cell_mask,
                                          const Patch& bg_patch,
                                          std::uint64_t rng_seed) {
  (void)rng_seed;
  if (cell_patch.label.group != Group::kCells)
    throw std::invalid_argument("make_copy_paste_pair: source patch is not CELLS");
  if (bg_patch.label.group != Group::kBackground)
    throw std::invalid_argument("make_copy_paste_pair: target patch is not BACKGROUND");
  if (cell_mask.c != 1 || cell_mask.h != kPatchSize || cell_mask.w != kPatchSize)
    throw std::invalid_argument("make_copy_paste_pair: mask must be 1x" +
                                std::to_string(kPatchSize) + "x" +
                                std::to_string(kPatchSize) + " within patch bounds");
  bool any = false;
  for (std::uint8_t v : cell_mask.data) any = any || v != 0;
  if (!any) throw std::invalid_argument("make_copy_paste_pair: empty mask");

  SyntheticPair pair;
  pair.background = bg_patch.pixels;
  pair.composite = bg_patch.pixels;
  pair.salient_mask = ImageU8(kPatchSize, kPatchSize, 1);
  for (int y = 0; y < kPatchSize; ++y)
    for (int x = 0; x < kPatchSize; ++x)
      if (cell_mask.at(y, x, 0)) {
        pair.salient_mask.at(y, x, 0) = 255;
        for (int k = 0; k < 3; ++k)
          pair.composite.at(y, x, k) = cell_patch.pixels.at(y, x, k);
      }
  return pair;
}

// ---------------------------------------------------------------------------
// Manifest and balanced splits.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string path;
  PatchLabel label;
  Split split = Split::kTrain;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  int count(Split s, Group g) const {
    int n = 0;
    for (const auto& e : entries)
      if (e.split == s && e.label.group == g) ++n;
    return n;
  }

  int count(Split s, Density d) const {
    int n = 0;
    for (const auto& e : entries)
      if (e.split == s && e.label.density == d) ++n;
    return n;
  }

  std::vector<const ManifestEntry*> select(Split s) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(&e);
    return out;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "path,group,density,cell_area_ratio,til_count,split # resize=bilinear\n";
    for (const auto& e : entries) {
      char ratio[32];
      std::snprintf(ratio, sizeof(ratio), "%.6f", e.label.cell_area_ratio);
      os << e.path << ',' << group_name(e.label.group) << ','
         << density_name(e.label.density) << ',' << ratio << ','
         << e.label.til_count << ',' << split_name(e.split) << '\n';
    }
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write manifest: " + path);
    os << to_text();
  }

  std::uint64_t hash() const {
    const std::string t = to_text();
    return fnv1a64(t.data(), t.size());
  }

  static DatasetManifest load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(is, line) ||
        line.rfind("path,group,density,cell_area_ratio,til_count,split", 0) != 0)
      throw std::runtime_error("manifest " + path + ": bad or missing header");
    DatasetManifest m;
    int lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      std::string col;
      while (std::getline(ss, col, ',')) cols.push_back(col);
      if (cols.size() != 6)
        throw std::runtime_error("manifest " + path + " line " +
                                 std::to_string(lineno) + ": expected 6 columns");
      ManifestEntry e;
      e.path = cols[0];
      e.label.group = parse_group(cols[1]);
      e.label.density = parse_density(cols[2]);
      e.label.cell_area_ratio = std::stod(cols[3]);
      e.label.til_count = std::stoi(cols[4]);
      e.split = parse_split(cols[5]);
      m.entries.push_back(std::move(e));
    }
    return m;
  }
};

// Per-split 1:1 CELLS:BACKGROUND balance. Each group is shuffled with its own
// derived stream, truncated to the smaller group's size (surplus discarded
// from the shuffled tail), and cut by the ratios.
inline DatasetManifest split_balanced(std::vector<ManifestEntry> items,
                                      std::array<double, 3> ratios,
                                      std::uint64_t seed) {
  for (double r : ratios)
    if (r < 0.0) throw std::invalid_argument("split_balanced: negative ratio");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw std::invalid_argument("split_balanced: ratios must sum to 1");

  std::vector<ManifestEntry> cells, bg;
  for (auto& e : items)
    (e.label.group == Group::kCells ? cells : bg).push_back(std::move(e));
  if (cells.empty() || bg.empty())
    throw std::invalid_argument("split_balanced: a group is empty (" +
                                std::to_string(cells.size()) + " CELLS, " +
                                std::to_string(bg.size()) + " BACKGROUND)");

  Rng rng_c(derive_seed(seed, {0})), rng_b(derive_seed(seed, {1}));
  rng_c.shuffle(cells.begin(), cells.end());
  rng_b.shuffle(bg.begin(), bg.end());
  const int k = static_cast<int>(std::min(cells.size(), bg.size()));
  const int n_train = static_cast<int>(k * ratios[0]);
  const int n_val = static_cast<int>(k * ratios[1]);

  DatasetManifest m;
  auto emit = [&](std::vector<ManifestEntry>& src) {
    for (int i = 0; i < k; ++i) {
      src[static_cast<std::size_t>(i)].split =
          i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kVal : Split::kTest);
      m.entries.push_back(std::move(src[static_cast<std::size_t>(i)]));
    }
  };
  emit(cells);
  emit(bg);
  std::stable_sort(m.entries.begin(), m.entries.end(),
                   [](const ManifestEntry& a, const ManifestEntry& b) {
                     return static_cast<int>(a.split) < static_cast<int>(b.split);
                   });
  return m;
}

// ---------------------------------------------------------------------------
// Real-data layout: tiles/<id>.png, annotations/<id>_mask.png (16-bit
// instance ids), annotations/<id>_classes.csv (instance_id,cell_class).
// ---------------------------------------------------------------------------

struct PrepareStats {
  int tiles = 0;
  int patches = 0;
  int cells = 0;
  int background = 0;
  int high = 0;
  int low = 0;
};

inline std::vector<CellAnnotation> annotations_from_label_map(
    const ImageU16& map, const std::map<int, CellClass>& classes,
    const std::string& tile_id) {
  std::map<int, std::array<int, 4>> boxes;  // id -> x0, y0, x1, y1
  for (int y = 0; y < map.h; ++y)
    for (int x = 0; x < map.w; ++x) {
      const int id = map.at(y, x);
      if (id == 0) continue;
      auto it = boxes.find(id);
      if (it == boxes.end()) {
        boxes[id] = {x, y, x + 1, y + 1};
      } else {
        auto& b = it->second;
        b[0] = std::min(b[0], x);
        b[1] = std::min(b[1], y);
        b[2] = std::max(b[2], x + 1);
        b[3] = std::max(b[3], y + 1);
      }
    }
  std::vector<std::string> problems;
  for (const auto& [id, box] : boxes)
    if (classes.find(id) == classes.end())
      problems.push_back("tile " + tile_id + ": instance " + std::to_string(id) +
                         " has no class row");
  for (const auto& [id, cls] : classes)
    if (boxes.find(id) == boxes.end())
      problems.push_back("tile " + tile_id + ": class row for instance " +
                         std::to_string(id) + " not present in mask");
  if (!problems.empty()) {
    std::string msg = "malformed annotations:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw std::runtime_error(msg);
  }

  std::vector<CellAnnotation> out;
  for (const auto& [id, box] : boxes) {
    CellAnnotation ann;
    ann.instance_id = id;
    ann.cell_class = classes.at(id);
    ann.x0 = box[0];
    ann.y0 = box[1];
    ann.mask = ImageU8(box[3] - box[1], box[2] - box[0], 1);
    for (int y = box[1]; y < box[3]; ++y)
      for (int x = box[0]; x < box[2]; ++x)
        if (map.at(y, x) == id) ann.mask.at(y - box[1], x - box[0], 0) = 255;
    out.push_back(std::move(ann));
  }
  return out;
}

inline std::map<int, CellClass> load_class_table(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing class table: " + path);
  std::map<int, CellClass> classes;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (lineno == 1 && line.rfind("instance_id", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": expected instance_id,cell_class");
    const int id = std::stoi(line.substr(0, comma));
    const std::string cls = line.substr(comma + 1);
    if (cls == "TIL")
      classes[id] = CellClass::kTil;
    else if (cls == "OTHER")
      classes[id] = CellClass::kOther;
    else
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": unknown cell class '" + cls + "'");
  }
  return classes;
}

// Walk the raw layout, resize tiles to 1024 (bilinear; label maps nearest),
// extract and label patches, write them under out_dir/patches, and emit a
// balanced manifest at out_dir/manifest.csv.
inline PrepareStats prepare_dataset(const std::string& dataset_dir,
                                    const std::string& out_dir,
                                    std::array<double, 3> ratios,
                                    std::uint64_t seed) {
  namespace fs = std::filesystem;
  const fs::path tiles_dir = fs::path(dataset_dir) / "tiles";
  const fs::path ann_dir = fs::path(dataset_dir) / "annotations";
  if (!fs::is_directory(tiles_dir))
    throw std::runtime_error("missing tiles directory: " + tiles_dir.string());
  std::vector<fs::path> tile_paths;
  for (const auto& ent : fs::directory_iterator(tiles_dir))
    if (ent.path().extension() == ".png") tile_paths.push_back(ent.path());
  std::sort(tile_paths.begin(), tile_paths.end());
  if (tile_paths.empty())
    throw std::runtime_error("no tiles found under " + tiles_dir.string());

  fs::create_directories(fs::path(out_dir) / "patches");
  fs::create_directories(fs::path(out_dir) / "masks");
  PrepareStats stats;
  std::vector<ManifestEntry> items;
  for (const auto& tp : tile_paths) {
    const std::string tile_id = tp.stem().string();
    ImageU8 tile = load_image(tp.string());
    if (tile.h != tile.w)
      throw std::runtime_error("tile " + tp.string() + " is not square (" +
                               std::to_string(tile.w) + "x" + std::to_string(tile.h) + ")");
    ImageU16 map = load_label_map((ann_dir / (tile_id + "_mask.png")).string());
    if (map.h != tile.h || map.w != tile.w)
      throw std::runtime_error("tile " + tile_id + ": mask size " +
                               std::to_string(map.w) + "x" + std::to_string(map.h) +
                               " does not match tile");
    auto classes = load_class_table((ann_dir / (tile_id + "_classes.csv")).string());
    // Validate id inventory at native resolution, before resizing can drop
    // single-pixel instances.
    (void)annotations_from_label_map(map, classes, tile_id);

    if (tile.h != kTileSize) {
      tile = resize_bilinear(tile, kTileSize, kTileSize);
      map = resize_nearest(map, kTileSize, kTileSize);
    }
    std::map<int, CellClass> surviving;
    std::set<int> present;
    for (std::uint16_t v : map.data)
      if (v) present.insert(v);
    for (int id : present) surviving[id] = classes.at(id);
    auto annotations = annotations_from_label_map(map, surviving, tile_id);

    for (auto& patch : extract_patches(tile, tile_id)) {
      patch.label = label_patch(patch, annotations);
      const std::string stem = tile_id + "_r" + std::to_string(patch.row) + "c" +
                               std::to_string(patch.col);
      save_image((fs::path(out_dir) / "patches" / (stem + ".png")).string(),
                 patch.pixels);
      items.push_back({"patches/" + stem + ".png", patch.label, Split::kTrain});
      ++stats.patches;
      if (patch.label.group == Group::kCells) {
        save_image((fs::path(out_dir) / "masks" / (stem + "_mask.png")).string(),
                   patch_union_mask(patch, annotations));
        ++stats.cells;
        if (patch.label.density == Density::kHigh)
          ++stats.high;
        else
          ++stats.low;
      } else {
        ++stats.background;
      }
    }
    ++stats.tiles;
  }
  DatasetManifest manifest = split_balanced(std::move(items), ratios, seed);
  manifest.save((fs::path(out_dir) / "manifest.csv").string());
  return stats;
}

}  // namespace sscvae::data
