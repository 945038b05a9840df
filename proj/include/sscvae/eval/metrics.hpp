#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "sscvae/core/rng.hpp"

namespace sscvae::eval {

inline Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("empty point set");
  const std::size_t dim = rows[0].size();
  if (dim == 0) throw std::invalid_argument("zero-dimensional points");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim)
      throw std::invalid_argument("ragged point set");
    for (std::size_t j = 0; j < dim; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return X;
}

// Mean over points of (b - a) / max(a, b) under Euclidean distance, where a
// is the mean intra-cluster distance and b the mean distance to the nearest
// other cluster. Any cluster with fewer than two members is rejected.
inline double silhouette(const std::vector<std::vector<double>>& points,
                         const std::vector<int>& labels) {
  if (points.size() != labels.size())
    throw std::invalid_argument("silhouette: points/labels size mismatch");
  const Eigen::MatrixXd X = to_matrix(points);
  const int n = static_cast<int>(X.rows());

  std::map<int, std::vector<int>> clusters;
  for (int i = 0; i < n; ++i) clusters[labels[static_cast<std::size_t>(i)]].push_back(i);
  if (clusters.size() < 2)
    throw std::invalid_argument("silhouette: need at least two clusters");
  for (const auto& [label, members] : clusters)
    if (members.size() < 2)
      throw std::invalid_argument("silhouette: cluster " + std::to_string(label) +
                                  " has fewer than 2 members");

  Eigen::MatrixXd D(n, n);
  for (int i = 0; i < n; ++i) {
    D(i, i) = 0.0;
    for (int j = i + 1; j < n; ++j) {
      const double d = (X.row(i) - X.row(j)).norm();
      D(i, j) = d;
      D(j, i) = d;
    }
  }

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int li = labels[static_cast<std::size_t>(i)];
    double a = 0.0;
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, members] : clusters) {
      double sum = 0.0;
      for (int j : members) sum += D(i, j);
      if (label == li) {
        a = sum / static_cast<double>(members.size() - 1);
      } else {
        b = std::min(b, sum / static_cast<double>(members.size()));
      }
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / n;
}

namespace probe_detail {

// Multinomial logistic regression with the last class as reference (its
// logit pinned to 0), L2 on weights (not intercepts), damped Newton solve.
// For two classes this is plain binary logistic regression.
class LinearHead {
 public:
  LinearHead(int dim, int classes) : dim_(dim), k_(classes) {
    if (classes < 2) throw std::invalid_argument("linear head: need >= 2 classes");
    theta_ = Eigen::MatrixXd::Zero(dim + 1, classes - 1);
  }

  void fit(const Eigen::MatrixXd& X, const std::vector<int>& y, double l2,
           int max_iter = 100) {
    const int n = static_cast<int>(X.rows());
    Eigen::MatrixXd Xt(n, dim_ + 1);
    Xt.leftCols(dim_) = X;
    Xt.col(dim_).setOnes();

    const int p = (dim_ + 1) * (k_ - 1);
    double loss = objective(Xt, y, l2);
    for (int it = 0; it < max_iter; ++it) {
      Eigen::MatrixXd P = probabilities(Xt);
      Eigen::MatrixXd G = Eigen::MatrixXd::Zero(dim_ + 1, k_ - 1);
      for (int c = 0; c < k_ - 1; ++c) {
        Eigen::VectorXd r = P.col(c);
        for (int i = 0; i < n; ++i)
          if (y[static_cast<std::size_t>(i)] == c) r(i) -= 1.0;
        G.col(c) = Xt.transpose() * r;
        G.col(c).head(dim_) += l2 * theta_.col(c).head(dim_);
      }

      Eigen::MatrixXd H = Eigen::MatrixXd::Zero(p, p);
      for (int a = 0; a < k_ - 1; ++a)
        for (int b = a; b < k_ - 1; ++b) {
          Eigen::VectorXd w = P.col(a).cwiseProduct(
              (a == b ? Eigen::VectorXd::Ones(n) - P.col(b) : (-P.col(b)).eval()));
          Eigen::MatrixXd block =
              Xt.transpose() * w.asDiagonal() * Xt;
          H.block(a * (dim_ + 1), b * (dim_ + 1), dim_ + 1, dim_ + 1) = block;
          if (a != b)
            H.block(b * (dim_ + 1), a * (dim_ + 1), dim_ + 1, dim_ + 1) =
                block.transpose();
        }
      for (int c = 0; c < k_ - 1; ++c)
        H.block(c * (dim_ + 1), c * (dim_ + 1), dim_, dim_).diagonal().array() += l2;

      Eigen::VectorXd g(p);
      for (int c = 0; c < k_ - 1; ++c)
        g.segment(c * (dim_ + 1), dim_ + 1) = G.col(c);
      Eigen::VectorXd step = H.ldlt().solve(g);
      if (!step.allFinite()) break;

      double scale = 1.0;
      Eigen::MatrixXd saved = theta_;
      double new_loss = loss;
      for (int h = 0; h < 30; ++h) {
        for (int c = 0; c < k_ - 1; ++c)
          theta_.col(c) = saved.col(c) - scale * step.segment(c * (dim_ + 1), dim_ + 1);
        new_loss = objective(Xt, y, l2);
        if (new_loss <= loss) break;
        scale *= 0.5;
      }
      if (new_loss > loss) {
        theta_ = saved;
        break;
      }
      const double drop = loss - new_loss;
      loss = new_loss;
      if (drop < 1e-12 * (1.0 + std::abs(loss))) break;
    }
  }

  int predict(const Eigen::RowVectorXd& x) const {
    int best = k_ - 1;
    double best_logit = 0.0;  // reference class logit
    for (int c = 0; c < k_ - 1; ++c) {
      const double l = x.dot(theta_.col(c).head(dim_)) + theta_(dim_, c);
      if (l > best_logit) {
        best_logit = l;
        best = c;
      }
    }
    return best;
  }

  // Logit of class c against the reference parameterization (class k-1 = 0).
  double logit(const Eigen::RowVectorXd& x, int c) const {
    if (c == k_ - 1) return 0.0;
    return x.dot(theta_.col(c).head(dim_)) + theta_(dim_, c);
  }

 private:
  Eigen::MatrixXd probabilities(const Eigen::MatrixXd& Xt) const {
    const int n = static_cast<int>(Xt.rows());
    Eigen::MatrixXd L(n, k_);
    L.leftCols(k_ - 1) = Xt * theta_;
    L.col(k_ - 1).setZero();
    for (int i = 0; i < n; ++i) {
      const double m = L.row(i).maxCoeff();
      Eigen::RowVectorXd e = (L.row(i).array() - m).exp();
      L.row(i) = e / e.sum();
    }
    return L;
  }

  double objective(const Eigen::MatrixXd& Xt, const std::vector<int>& y,
                   double l2) const {
    const int n = static_cast<int>(Xt.rows());
    Eigen::MatrixXd L(n, k_);
    L.leftCols(k_ - 1) = Xt * theta_;
    L.col(k_ - 1).setZero();
    double nll = 0.0;
    for (int i = 0; i < n; ++i) {
      const double m = L.row(i).maxCoeff();
      const double lse = m + std::log((L.row(i).array() - m).exp().sum());
      nll += lse - L(i, y[static_cast<std::size_t>(i)]);
    }
    double reg = 0.0;
    for (int c = 0; c < k_ - 1; ++c) reg += theta_.col(c).head(dim_).squaredNorm();
    return nll + 0.5 * l2 * reg;
  }

  int dim_;
  int k_;
  Eigen::MatrixXd theta_;
};

}  // namespace probe_detail

inline constexpr double kProbeL2 = 1.0;

// Stratified fold assignment: indices of each class (in ascending order) are
// shuffled with a class-derived stream and dealt round-robin into folds.
inline std::vector<int> stratified_folds(const std::vector<int>& labels, int folds,
                                         std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("probe: need >= 2 folds");
  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < static_cast<int>(labels.size()); ++i)
    by_class[labels[static_cast<std::size_t>(i)]].push_back(i);
  if (by_class.size() < 2)
    throw std::invalid_argument("probe: need >= 2 classes");
  std::vector<int> fold(labels.size(), -1);
  for (auto& [label, idxs] : by_class) {
    if (static_cast<int>(idxs.size()) < folds)
      throw std::invalid_argument("probe: class " + std::to_string(label) +
                                  " has fewer members than folds");
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(label)}));
    rng.shuffle(idxs.begin(), idxs.end());
    for (int j = 0; j < static_cast<int>(idxs.size()); ++j)
      fold[static_cast<std::size_t>(idxs[static_cast<std::size_t>(j)])] = j % folds;
  }
  return fold;
}

struct ProbeResult {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over folds
  std::vector<double> fold_accuracy;
};

// K-fold cross-validated linear probe on latent means. Labels must be
// consecutive integers starting at 0.
inline ProbeResult linear_probe_cv(const std::vector<std::vector<double>>& points,
                                   const std::vector<int>& labels, int folds,
                                   std::uint64_t seed) {
  if (points.size() != labels.size())
    throw std::invalid_argument("probe: points/labels size mismatch");
  const Eigen::MatrixXd X = to_matrix(points);
  const int n = static_cast<int>(X.rows());
  int k = 0;
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("probe: negative label");
    k = std::max(k, l + 1);
  }
  const auto fold = stratified_folds(labels, folds, seed);

  ProbeResult result;
  for (int f = 0; f < folds; ++f) {
    std::vector<int> train_idx, test_idx;
    for (int i = 0; i < n; ++i)
      (fold[static_cast<std::size_t>(i)] == f ? test_idx : train_idx).push_back(i);
    Eigen::MatrixXd Xtr(static_cast<Eigen::Index>(train_idx.size()), X.cols());
    std::vector<int> ytr;
    ytr.reserve(train_idx.size());
    for (std::size_t i = 0; i < train_idx.size(); ++i) {
      Xtr.row(static_cast<Eigen::Index>(i)) = X.row(train_idx[i]);
      ytr.push_back(labels[static_cast<std::size_t>(train_idx[i])]);
    }
    probe_detail::LinearHead head(static_cast<int>(X.cols()), k);
    head.fit(Xtr, ytr, kProbeL2);
    int correct = 0;
    for (int i : test_idx)
      if (head.predict(X.row(i)) == labels[static_cast<std::size_t>(i)]) ++correct;
    result.fold_accuracy.push_back(static_cast<double>(correct) /
                                   static_cast<double>(test_idx.size()));
  }
  double mean = 0.0;
  for (double a : result.fold_accuracy) mean += a;
  mean /= static_cast<double>(folds);
  double var = 0.0;
  for (double a : result.fold_accuracy) var += (a - mean) * (a - mean);
  result.mean = mean;
  result.stddev = std::sqrt(var / static_cast<double>(folds));
  return result;
}

// Train a linear head on one split, report accuracy on another.
inline double linear_head_accuracy(const std::vector<std::vector<double>>& train_points,
                                   const std::vector<int>& train_labels,
                                   const std::vector<std::vector<double>>& test_points,
                                   const std::vector<int>& test_labels,
                                   double l2 = kProbeL2) {
  if (train_points.size() != train_labels.size() ||
      test_points.size() != test_labels.size())
    throw std::invalid_argument("linear head: points/labels size mismatch");
  const Eigen::MatrixXd Xtr = to_matrix(train_points);
  const Eigen::MatrixXd Xte = to_matrix(test_points);
  if (Xtr.cols() != Xte.cols())
    throw std::invalid_argument("linear head: train/test dim mismatch");
  int k = 0;
  for (int l : train_labels) k = std::max(k, l + 1);
  for (int l : test_labels) k = std::max(k, l + 1);
  std::vector<int> seen(static_cast<std::size_t>(k), 0);
  for (int l : train_labels) seen[static_cast<std::size_t>(l)] = 1;
  for (int s : seen)
    if (!s) throw std::invalid_argument("linear head: a class is missing from training");
  probe_detail::LinearHead head(static_cast<int>(Xtr.cols()), k);
  head.fit(Xtr, train_labels, l2);
  int correct = 0;
  for (int i = 0; i < static_cast<int>(Xte.rows()); ++i)
    if (head.predict(Xte.row(i)) == test_labels[static_cast<std::size_t>(i)]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(Xte.rows());
}

namespace fid_detail {

inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("fid: eigendecomposition failed");
  Eigen::VectorXd lam = es.eigenvalues();
  for (int i = 0; i < lam.size(); ++i) lam(i) = std::sqrt(std::max(0.0, lam(i)));
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

// Sample covariance (n-1 denominator) with a small ridge when the sample
// count cannot support a full-rank estimate.
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows(), d = X.cols();
  Eigen::RowVectorXd mu = X.colwise().mean();
  Eigen::MatrixXd C = (X.rowwise() - mu).transpose() * (X.rowwise() - mu) /
                      static_cast<double>(n - 1);
  if (n < d + 1) C.diagonal().array() += 1e-6;
  return C;
}

}  // namespace fid_detail

// Frechet distance between Gaussian fits of two feature sets:
// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the matrix square root
// evaluated through the symmetric form A S2 A, A = S1^(1/2).
inline double fid(const std::vector<std::vector<double>>& features_a,
                  const std::vector<std::vector<double>>& features_b) {
  const Eigen::MatrixXd A = to_matrix(features_a);
  const Eigen::MatrixXd B = to_matrix(features_b);
  if (A.cols() != B.cols()) throw std::invalid_argument("fid: dimension mismatch");
  if (A.rows() < 2 || B.rows() < 2)
    throw std::invalid_argument("fid: need at least 2 samples per side");

  const Eigen::RowVectorXd mu_a = A.colwise().mean();
  const Eigen::RowVectorXd mu_b = B.colwise().mean();
  const Eigen::MatrixXd Ca = fid_detail::covariance(A);
  const Eigen::MatrixXd Cb = fid_detail::covariance(B);

  const Eigen::MatrixXd Ra = fid_detail::sqrtm_psd(Ca);
  Eigen::MatrixXd M = Ra * Cb * Ra;
  M = 0.5 * (M + M.transpose().eval());
  const double tr_sqrt = fid_detail::sqrtm_psd(M).trace();

  const double value =
      (mu_a - mu_b).squaredNorm() + Ca.trace() + Cb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

}  // namespace sscvae::eval
