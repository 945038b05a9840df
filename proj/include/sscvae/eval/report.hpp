#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sscvae/core/rng.hpp"
#include "sscvae/data/dataset_io.hpp"
#include "sscvae/eval/embed.hpp"
#include "sscvae/eval/features.hpp"
#include "sscvae/eval/metrics.hpp"
#include "sscvae/model/bundle.hpp"

namespace sscvae::eval {

namespace report_detail {

inline std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::string fmt_folds(const std::vector<double>& folds) {
  std::string out;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    if (i) out += ',';
    out += fmt(folds[i]);
  }
  return out;
}

}  // namespace report_detail

struct MetricsReport {
  double ss_salient = 0.0;
  double ss_background = 0.0;
  double ss_density = 0.0;
  ProbeResult clf_salient;
  ProbeResult clf_background;
  ProbeResult clf_density;
  double fid_vae = 0.0;
  double fid_gan = 0.0;
  bool has_downstream = false;
  double downstream_accuracy = 0.0;
  double downstream_control = 0.0;

  std::string to_text() const {
    using report_detail::fmt;
    using report_detail::fmt_folds;
    std::string out;
    auto line = [&](const std::string& k, const std::string& v) {
      out += k + ": " + v + "\n";
    };
    auto probe = [&](const std::string& k, const ProbeResult& r) {
      line(k, fmt(r.mean));
      line(k + "_std", fmt(r.stddev));
      line(k + "_folds", fmt_folds(r.fold_accuracy));
    };
    line("ss_salient", fmt(ss_salient));
    line("ss_background", fmt(ss_background));
    line("ss_density", fmt(ss_density));
    probe("clf_salient", clf_salient);
    probe("clf_background", clf_background);
    probe("clf_density", clf_density);
    line("fid_feature_space", "toy-features");
    line("fid_vae", fmt(fid_vae));
    line("fid_gan", fmt(fid_gan));
    line("downstream_accuracy", has_downstream ? fmt(downstream_accuracy) : "skipped");
    line("downstream_control", has_downstream ? fmt(downstream_control) : "skipped");
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write report: " + path);
    os << to_text();
  }
};

// key -> value map for the "key: value" report lines.
inline std::map<std::string, std::string> parse_report(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto pos = line.find(": ");
    if (pos == std::string::npos)
      throw std::runtime_error("report: malformed line '" + line + "'");
    out[line.substr(0, pos)] = line.substr(pos + 2);
  }
  return out;
}

inline std::map<std::string, std::string> load_report(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read report: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_report(ss.str());
}

namespace report_detail {

inline std::vector<std::vector<double>> take_rows(
    const std::vector<std::vector<double>>& rows, const std::vector<int>& idx) {
  std::vector<std::vector<double>> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(rows[static_cast<std::size_t>(i)]);
  return out;
}

// Salient means of a 3-class patch set, split into head-training and held-out
// features for the transfer task.
template <typename T>
void downstream_features(model::NetworkBundle<T>& net, const data::DownstreamSet& ds,
                         std::vector<std::vector<double>>& train_x,
                         std::vector<int>& train_y,
                         std::vector<std::vector<double>>& test_x,
                         std::vector<int>& test_y) {
  EncodedMeans enc = encode_means(
      net, [&](int i) -> const ImageU8& { return ds.images[static_cast<std::size_t>(i)]; },
      ds.size());
  for (int i = 0; i < ds.size(); ++i) {
    const auto j = static_cast<std::size_t>(i);
    if (ds.split[j] == data::Split::kTrain) {
      train_x.push_back(enc.mu_s[j]);
      train_y.push_back(ds.klass[j]);
    } else {
      test_x.push_back(enc.mu_s[j]);
      test_y.push_back(ds.klass[j]);
    }
  }
}

}  // namespace report_detail

// Test accuracy of a linear 3-way head on the frozen salient encoder means.
template <typename T>
double downstream_finetune(model::NetworkBundle<T>& net,
                           const data::DownstreamSet& ds) {
  std::vector<std::vector<double>> train_x, test_x;
  std::vector<int> train_y, test_y;
  report_detail::downstream_features(net, ds, train_x, train_y, test_x, test_y);
  return linear_head_accuracy(train_x, train_y, test_x, test_y);
}

// Every quantitative metric on the test split, computed from latent means only
// so a rerun with the same inputs reproduces the report byte for byte.
template <typename T>
MetricsReport evaluate_all(model::NetworkBundle<T>& net, const data::PatchStore& store,
                           const data::DownstreamSet& downstream,
                           FidFeatures& features, std::uint64_t seed) {
  const std::vector<int> test = store.indices(data::Split::kTest);
  if (test.size() < 4) throw std::runtime_error("evaluate_all: test split too small");

  EncodedMeans enc = encode_means(
      net,
      [&](int i) -> const ImageU8& { return store.image(test[static_cast<std::size_t>(i)]); },
      static_cast<int>(test.size()));

  std::vector<int> group;
  std::vector<int> cell_rows, density;
  std::vector<ImageU8> real;
  real.reserve(test.size());
  for (std::size_t j = 0; j < test.size(); ++j) {
    const auto& e = store.entry(test[j]);
    group.push_back(e.label.group == data::Group::kCells ? 1 : 0);
    if (e.label.group == data::Group::kCells) {
      cell_rows.push_back(static_cast<int>(j));
      density.push_back(e.label.density == data::Density::kHigh ? 1 : 0);
    }
    real.push_back(store.image(test[j]));
  }
  const auto mu_s_cells = report_detail::take_rows(enc.mu_s, cell_rows);

  MetricsReport r;
  r.ss_salient = silhouette(enc.mu_s, group);
  r.ss_background = silhouette(enc.mu_z, group);
  r.ss_density = silhouette(mu_s_cells, density);
  r.clf_salient = linear_probe_cv(enc.mu_s, group, 5, derive_seed(seed, "clf_salient"));
  r.clf_background =
      linear_probe_cv(enc.mu_z, group, 5, derive_seed(seed, "clf_background"));
  r.clf_density =
      linear_probe_cv(mu_s_cells, density, 5, derive_seed(seed, "clf_density"));

  const auto real_f = embed_for_fid(features, real);
  r.fid_vae = fid(real_f, embed_for_fid(features, decode_codes(net, enc.mu_s, enc.mu_z,
                                                               /*use_gan=*/false)));
  r.fid_gan = fid(real_f, embed_for_fid(features, decode_codes(net, enc.mu_s, enc.mu_z,
                                                               /*use_gan=*/true)));

  if (!downstream.empty()) {
    r.has_downstream = true;
    std::vector<std::vector<double>> train_x, test_x;
    std::vector<int> train_y, test_y;
    report_detail::downstream_features(net, downstream, train_x, train_y, test_x,
                                       test_y);
    r.downstream_accuracy = linear_head_accuracy(train_x, train_y, test_x, test_y);

    auto control = model::NetworkBundle<T>::build(
        net.arch, derive_seed(seed, "downstream_control"));
    train_x.clear();
    test_x.clear();
    train_y.clear();
    test_y.clear();
    report_detail::downstream_features(control, downstream, train_x, train_y, test_x,
                                       test_y);
    r.downstream_control = linear_head_accuracy(train_x, train_y, test_x, test_y);
  }
  return r;
}

}  // namespace sscvae::eval
