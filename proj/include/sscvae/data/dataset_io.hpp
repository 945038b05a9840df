#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/image.hpp"
#include "sscvae/core/rng.hpp"
#include "sscvae/data/pipeline.hpp"

namespace sscvae::data {

namespace io_detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cols;
  std::stringstream ss(line);
  std::string col;
  while (std::getline(ss, col, ',')) cols.push_back(col);
  return cols;
}

inline std::string stem_of(const std::string& patch_path) {
  return std::filesystem::path(patch_path).stem().string();
}

}  // namespace io_detail

// masks/<stem>_mask.png for a manifest patch path patches/<stem>.png.
inline std::string mask_path_for(const std::string& patch_path) {
  return "masks/" + io_detail::stem_of(patch_path) + "_mask.png";
}

// Manifest plus the decoded patch images, in manifest order.
struct PatchStore {
  std::string dir;
  DatasetManifest manifest;
  std::vector<ImageU8> images;

  int size() const { return static_cast<int>(manifest.entries.size()); }
  const ManifestEntry& entry(int i) const {
    return manifest.entries[static_cast<std::size_t>(i)];
  }
  const ImageU8& image(int i) const { return images[static_cast<std::size_t>(i)]; }

  std::vector<int> indices(Split s) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (entry(i).split == s) out.push_back(i);
    return out;
  }
  std::vector<int> indices(Split s, Group g) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (entry(i).split == s && entry(i).label.group == g) out.push_back(i);
    return out;
  }
  std::vector<int> indices(Split s, Density d) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (entry(i).split == s && entry(i).label.density == d) out.push_back(i);
    return out;
  }
};

inline PatchStore load_patch_store(const std::string& dir) {
  namespace fs = std::filesystem;
  PatchStore store;
  store.dir = dir;
  store.manifest = DatasetManifest::load((fs::path(dir) / "manifest.csv").string());
  store.images.reserve(store.manifest.entries.size());
  for (const auto& e : store.manifest.entries) {
    ImageU8 img = load_image((fs::path(dir) / e.path).string());
    if (img.h != kPatchSize || img.w != kPatchSize)
      throw std::runtime_error("patch " + e.path + " is not " +
                               std::to_string(kPatchSize) + "x" +
                               std::to_string(kPatchSize));
    store.images.push_back(std::move(img));
  }
  return store;
}

// A synthesized pair references its source patches by manifest index.
struct PairRecord {
  int cell_entry = 0;
  int bg_entry = 0;
  Split split = Split::kTrain;
  SyntheticPair pair;
};

// One pair per CELLS entry of each split; the background partner is drawn
// uniformly from the same split's BACKGROUND pool with a per-split stream.
inline std::vector<PairRecord> build_pairs(
    const DatasetManifest& manifest, const std::vector<ImageU8>& images,
    const std::map<int, ImageU8>& masks_by_entry, std::uint64_t seed) {
  std::vector<PairRecord> out;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    std::vector<int> cells, bg;
    for (int i = 0; i < static_cast<int>(manifest.entries.size()); ++i) {
      const auto& e = manifest.entries[static_cast<std::size_t>(i)];
      if (e.split != s) continue;
      (e.label.group == Group::kCells ? cells : bg).push_back(i);
    }
    if (cells.empty() || bg.empty()) continue;
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(s)}));
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const int ci = cells[j];
      const int bi = bg[static_cast<std::size_t>(rng.uniform_int(bg.size()))];
      auto mit = masks_by_entry.find(ci);
      if (mit == masks_by_entry.end())
        throw std::runtime_error("no mask for CELLS patch " +
                                 manifest.entries[static_cast<std::size_t>(ci)].path);
      Patch cell;
      cell.pixels = images[static_cast<std::size_t>(ci)];
      cell.label = manifest.entries[static_cast<std::size_t>(ci)].label;
      Patch back;
      back.pixels = images[static_cast<std::size_t>(bi)];
      back.label = manifest.entries[static_cast<std::size_t>(bi)].label;
      PairRecord rec;
      rec.cell_entry = ci;
      rec.bg_entry = bi;
      rec.split = s;
      rec.pair = make_copy_paste_pair(cell, mit->second, back,
                                      derive_seed(seed, {static_cast<std::uint64_t>(s), j}));
      out.push_back(std::move(rec));
    }
  }
  return out;
}

inline void write_pairs_csv(const std::string& dir,
                            const DatasetManifest& manifest,
                            const std::vector<PairRecord>& pairs) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "pairs");
  std::ofstream os((fs::path(dir) / "pairs.csv").string(),
                   std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write pairs.csv under " + dir);
  os << "composite,background,mask,split\n";
  for (const auto& rec : pairs) {
    const auto& ce = manifest.entries[static_cast<std::size_t>(rec.cell_entry)];
    const auto& be = manifest.entries[static_cast<std::size_t>(rec.bg_entry)];
    const std::string comp = "pairs/" + io_detail::stem_of(ce.path) + "__" +
                             io_detail::stem_of(be.path) + ".png";
    save_image((fs::path(dir) / comp).string(), rec.pair.composite);
    os << comp << ',' << be.path << ',' << mask_path_for(ce.path) << ','
       << split_name(rec.split) << '\n';
  }
}

// Disk-to-disk pair synthesis over an already prepared dataset directory.
inline int synthesize_pairs(const std::string& dir, std::uint64_t seed) {
  namespace fs = std::filesystem;
  PatchStore store = load_patch_store(dir);
  std::map<int, ImageU8> masks;
  for (int i = 0; i < store.size(); ++i)
    if (store.entry(i).label.group == Group::kCells)
      masks[i] = load_image_gray((fs::path(dir) / mask_path_for(store.entry(i).path)).string());
  auto pairs = build_pairs(store.manifest, store.images, masks, seed);
  write_pairs_csv(dir, store.manifest, pairs);
  return static_cast<int>(pairs.size());
}

struct PairSet {
  std::vector<ImageU8> composite;
  std::vector<ImageU8> mask;
  std::vector<int> background_entry;  // index into the PatchStore
  std::vector<Split> split;

  int size() const { return static_cast<int>(composite.size()); }
  std::vector<int> indices(Split s) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (split[static_cast<std::size_t>(i)] == s) out.push_back(i);
    return out;
  }
};

inline PairSet load_pairs(const std::string& dir, const PatchStore& store) {
  namespace fs = std::filesystem;
  const std::string csv = (fs::path(dir) / "pairs.csv").string();
  std::ifstream is(csv);
  if (!is) throw std::runtime_error("missing pairs.csv under " + dir +
                                    " (run pair synthesis first)");
  std::map<std::string, int> by_path;
  for (int i = 0; i < store.size(); ++i) by_path[store.entry(i).path] = i;

  std::string line;
  if (!std::getline(is, line) || line.rfind("composite,background,mask,split", 0) != 0)
    throw std::runtime_error(csv + ": bad or missing header");
  PairSet set;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = io_detail::split_csv(line);
    if (cols.size() != 4)
      throw std::runtime_error(csv + " line " + std::to_string(lineno) +
                               ": expected 4 columns");
    auto it = by_path.find(cols[1]);
    if (it == by_path.end())
      throw std::runtime_error(csv + " line " + std::to_string(lineno) +
                               ": background " + cols[1] + " not in manifest");
    set.composite.push_back(load_image((fs::path(dir) / cols[0]).string()));
    set.mask.push_back(load_image_gray((fs::path(dir) / cols[2]).string()));
    set.background_entry.push_back(it->second);
    set.split.push_back(parse_split(cols[3]));
  }
  return set;
}

// Three-way transfer task: 0 = plain tissue, 1 = TILs only, 2 = other cells only.
struct DownstreamSet {
  std::vector<ImageU8> images;
  std::vector<int> klass;
  std::vector<Split> split;

  int size() const { return static_cast<int>(images.size()); }
  bool empty() const { return images.empty(); }
};

inline const char* downstream_class_name(int k) {
  switch (k) {
    case 0: return "TISSUE";
    case 1: return "TIL_ONLY";
    default: return "OTHER_ONLY";
  }
}

inline int parse_downstream_class(const std::string& s) {
  if (s == "TISSUE") return 0;
  if (s == "TIL_ONLY") return 1;
  if (s == "OTHER_ONLY") return 2;
  throw std::invalid_argument("bad downstream class: " + s);
}

inline DownstreamSet load_downstream(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string csv = (fs::path(dir) / "downstream.csv").string();
  std::ifstream is(csv);
  DownstreamSet set;
  if (!is) return set;  // transfer set is optional for non-toy data
  std::string line;
  if (!std::getline(is, line) || line.rfind("path,klass,split", 0) != 0)
    throw std::runtime_error(csv + ": bad or missing header");
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = io_detail::split_csv(line);
    if (cols.size() != 3)
      throw std::runtime_error(csv + " line " + std::to_string(lineno) +
                               ": expected 3 columns");
    set.images.push_back(load_image((fs::path(dir) / cols[0]).string()));
    set.klass.push_back(parse_downstream_class(cols[1]));
    set.split.push_back(parse_split(cols[2]));
  }
  return set;
}

}  // namespace sscvae::data
