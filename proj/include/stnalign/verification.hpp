#ifndef STNALIGN_VERIFICATION_HPP_
#define STNALIGN_VERIFICATION_HPP_

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <set>
#include <vector>

#include "stnalign/pipeline.hpp"
#include "stnalign/synth_data.hpp"
#include "stnalign/tensor.hpp"

namespace stnalign {

using FeatureRows = std::vector<std::vector<double>>;

/// Cosine of the angle between a and b; 0 if either is the zero vector.
inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

struct Pca {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // rows are principal directions, by decreasing variance

  std::vector<double> project(const std::vector<double>& x) const {
    if (static_cast<Eigen::Index>(x.size()) != mean.size()) throw DimensionError("Pca::project: width mismatch");
    const Eigen::VectorXd centered = Eigen::Map<const Eigen::VectorXd>(x.data(), mean.size()) - mean;
    const Eigen::VectorXd y = components * centered;
    return {y.data(), y.data() + y.size()};
  }
};

/// Principal directions of `rows` (each of equal width). Component signs are fixed
/// so that the largest-magnitude entry is positive.
inline Pca fit_pca(const FeatureRows& rows, std::size_t dim) {
  if (rows.empty()) throw InputError("fit_pca: no rows");
  const auto width = static_cast<Eigen::Index>(rows[0].size());
  if (dim == 0 || static_cast<Eigen::Index>(dim) > width) {
    throw InputError("pca_dim must lie in [1, feature width]");
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != width) throw DimensionError("fit_pca: ragged rows");
    x.row(static_cast<Eigen::Index>(r)) = Eigen::Map<const Eigen::RowVectorXd>(rows[r].data(), width);
  }
  Pca pca;
  pca.mean = x.colwise().mean().transpose();
  x.rowwise() -= pca.mean.transpose();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  pca.components.resize(static_cast<Eigen::Index>(dim), width);
  for (std::size_t k = 0; k < dim; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(width - 1 - static_cast<Eigen::Index>(k));  // ascending order
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    pca.components.row(static_cast<Eigen::Index>(k)) = v.transpose();
  }
  return pca;
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

struct VerificationReport {
  double accuracy = 0.0;                // mean held-out fold accuracy
  std::vector<double> fold_accuracy;
  std::vector<double> fold_threshold;
  double threshold = 0.0;               // mean of the fold thresholds
  std::size_t pca_dim = 0;
  std::vector<int> fold_of_pair;
  std::vector<double> scores;           // each pair scored under its held-out fold's PCA
  std::vector<RocPoint> roc;
};

/// Threshold maximizing accuracy of "same iff score > threshold" over the given pairs.
/// Candidates are midpoints between consecutive distinct scores plus both ends.
inline double best_threshold(const std::vector<double>& scores, const std::vector<bool>& same) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // threshold below every score: everything called "same"
  long correct = static_cast<long>(std::count(same.begin(), same.end(), true));
  long best = correct;
  double best_t = scores.empty() ? 0.0 : scores[order.front()] - 1e-9;
  for (std::size_t k = 0; k < order.size(); ++k) {
    correct += same[order[k]] ? -1 : 1;  // this pair moves to "different"
    if (k + 1 < order.size() && scores[order[k + 1]] == scores[order[k]]) continue;
    if (correct > best) {
      best = correct;
      best_t = k + 1 < order.size() ? 0.5 * (scores[order[k]] + scores[order[k + 1]]) : scores[order[k]] + 1e-9;
    }
  }
  return best_t;
}

inline std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<bool>& same) {
  const auto pos = static_cast<double>(std::count(same.begin(), same.end(), true));
  const auto neg = static_cast<double>(same.size()) - pos;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> roc{{0.0, 0.0, order.empty() ? 0.0 : scores[order[0]] + 1e-9}};
  double tp = 0.0, fp = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (same[order[k]] ? tp : fp) += 1.0;
    if (k + 1 < order.size() && scores[order[k + 1]] == scores[order[k]]) continue;
    roc.push_back({neg > 0 ? fp / neg : 0.0, pos > 0 ? tp / pos : 0.0, scores[order[k]]});
  }
  return roc;
}

/**
 * k-fold verification over pairs of rows of `features`. Folds are contiguous
 * blocks of the pair list. For each fold, PCA and the threshold are fit on the
 * other folds only (PCA on the distinct images those pairs reference).
 */
inline VerificationReport evaluate_verification(const FeatureRows& features, const std::vector<VerificationPair>& pairs,
                                                std::size_t pca_dim, std::size_t folds = 10) {
  if (folds < 2 || pairs.size() < folds) throw InputError("need at least 2 folds and one pair per fold");
  if (features.empty()) throw InputError("no features");
  if (pca_dim > features[0].size()) throw InputError("pca_dim exceeds feature width");
  VerificationReport rep;
  rep.pca_dim = pca_dim;
  rep.fold_of_pair.resize(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) rep.fold_of_pair[i] = static_cast<int>(i * folds / pairs.size());
  std::vector<bool> same(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].first >= features.size() || pairs[i].second >= features.size()) throw InputError("pair index out of range");
    same[i] = pairs[i].same;
  }
  rep.scores.assign(pairs.size(), 0.0);
  for (std::size_t f = 0; f < folds; ++f) {
    std::set<std::size_t> fit_images;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (rep.fold_of_pair[i] == static_cast<int>(f)) continue;
      fit_images.insert(pairs[i].first);
      fit_images.insert(pairs[i].second);
    }
    std::optional<Pca> pca;
    if (pca_dim > 0) {
      FeatureRows fit_rows;
      for (std::size_t idx : fit_images) fit_rows.push_back(features[idx]);
      pca = fit_pca(fit_rows, pca_dim);
    }
    auto score = [&](const VerificationPair& p) {
      if (!pca) return cosine_similarity(features[p.first], features[p.second]);
      return cosine_similarity(pca->project(features[p.first]), pca->project(features[p.second]));
    };
    std::vector<double> train_scores;
    std::vector<bool> train_same;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (rep.fold_of_pair[i] == static_cast<int>(f)) {
        rep.scores[i] = score(pairs[i]);
      } else {
        train_scores.push_back(score(pairs[i]));
        train_same.push_back(same[i]);
      }
    }
    const double t = best_threshold(train_scores, train_same);
    std::size_t correct = 0, count = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (rep.fold_of_pair[i] != static_cast<int>(f)) continue;
      correct += (rep.scores[i] > t) == same[i];
      ++count;
    }
    rep.fold_threshold.push_back(t);
    rep.fold_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(count));
  }
  rep.accuracy = std::accumulate(rep.fold_accuracy.begin(), rep.fold_accuracy.end(), 0.0) / static_cast<double>(folds);
  rep.threshold = std::accumulate(rep.fold_threshold.begin(), rep.fold_threshold.end(), 0.0) / static_cast<double>(folds);
  rep.roc = roc_curve(rep.scores, same);
  return rep;
}

/// Mirror-averaged embeddings of every test observation.
inline FeatureRows test_embeddings(const PipelineState& state, const DatasetSplit& split, std::size_t workers = 1) {
  FeatureRows rows(split.test.size());
  parallel_chunks(split.test.size(), workers, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) rows[i] = extract_embedding(state, split.test[i].image, true);
  });
  return rows;
}

inline std::size_t default_pca_dim(const PipelineState& state) {
  return std::min<std::size_t>(static_cast<std::size_t>(state.config.rec.feature_width), 32);
}

inline VerificationReport evaluate_verification(const PipelineState& state, const DatasetSplit& split,
                                                std::size_t pca_dim, std::size_t folds = 10, std::size_t workers = 1) {
  if (pca_dim > static_cast<std::size_t>(state.config.rec.feature_width)) {
    throw InputError("pca_dim exceeds feature width");
  }
  return evaluate_verification(test_embeddings(state, split, workers), split.pairs, pca_dim, folds);
}

}  // namespace stnalign

#endif  // STNALIGN_VERIFICATION_HPP_
