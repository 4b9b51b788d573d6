// SPDX-License-Identifier: Apache-2.0
//
// Verification metrics: cosine scoring, 10-fold accuracy with exhaustive
// threshold selection, step-function TAR@FAR, ROC points, and demographic
// bias statistics (average / sample STD / skewed error ratio).

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"

namespace faceadapt {

/// Cosine of the angle between two embeddings. Magnitudes are divided out,
/// so any positive rescaling of either side leaves the score unchanged.
template <typename Scalar>
Scalar similarity(const VecX<Scalar>& a, const VecX<Scalar>& b) {
  if (a.size() != b.size())
    throw DataError("embedding sizes differ (" + std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()) + ")");
  if (a.size() == 0) throw DataError("empty embedding");
  const Scalar na = a.norm(), nb = b.norm();
  if (na == Scalar(0) || nb == Scalar(0)) throw DataError("zero-norm embedding");
  return a.dot(b) / (na * nb);
}

/// One scored verification pair. `fold` only matters for tenfold_accuracy.
struct ScoredPair {
  double score = 0.0;
  bool genuine = false;
  int fold = 0;
};

constexpr int kNumFolds = 10;

struct TenfoldResult {
  double accuracy = 0.0;  // percent, mean over held-out folds
  std::array<double, kNumFolds> fold_accuracy{};
  std::array<double, kNumFolds> fold_threshold{};
};

namespace detail {

// Best-accuracy threshold over `train`. Candidates are the midpoints between
// adjacent distinct scores plus one sentinel below the min and one above the
// max, so accept-everything and reject-everything are both representable.
// Ties resolve to the smallest candidate. Classification rule: score >= tau
// is called genuine.
inline double select_threshold(std::vector<ScoredPair> train) {
  std::sort(train.begin(), train.end(),
            [](const ScoredPair& x, const ScoredPair& y) { return x.score < y.score; });
  const std::size_t n = train.size();
  std::int64_t correct = 0;
  for (const auto& p : train) correct += p.genuine ? 1 : 0;  // tau below everything
  std::int64_t best = correct;
  double best_tau = train.front().score - 1.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    std::int64_t gen = 0, imp = 0;
    while (j < n && train[j].score == train[i].score) {
      (train[j].genuine ? gen : imp) += 1;
      ++j;
    }
    correct += imp - gen;  // tau moved past this tie block
    const double tau =
        (j < n) ? (train[i].score + train[j].score) / 2.0 : train[i].score + 1.0;
    if (correct > best) {
      best = correct;
      best_tau = tau;
    }
    i = j;
  }
  return best_tau;
}

}  // namespace detail

/// 10-fold cross-validated verification accuracy (percent). For each fold the
/// threshold is picked by exhaustive search over the other nine folds, then
/// applied to the held-out fold; the reported accuracy is the unweighted mean
/// of the ten held-out accuracies.
inline TenfoldResult tenfold_accuracy(const std::vector<ScoredPair>& pairs) {
  std::array<std::int64_t, kNumFolds> count{};
  for (const auto& p : pairs) {
    if (p.fold < 0 || p.fold >= kNumFolds)
      throw DataError("pair fold " + std::to_string(p.fold) + " outside 0..9");
    ++count[std::size_t(p.fold)];
  }
  for (int f = 0; f < kNumFolds; ++f)
    if (count[std::size_t(f)] == 0)
      throw DataError("fold " + std::to_string(f) + " has no pairs");

  TenfoldResult res;
  double sum = 0.0;
  for (int f = 0; f < kNumFolds; ++f) {
    std::vector<ScoredPair> train;
    train.reserve(pairs.size());
    for (const auto& p : pairs)
      if (p.fold != f) train.push_back(p);
    const double tau = detail::select_threshold(train);
    std::int64_t correct = 0;
    for (const auto& p : pairs)
      if (p.fold == f && (p.score >= tau) == p.genuine) ++correct;
    const double acc = 100.0 * double(correct) / double(count[std::size_t(f)]);
    res.fold_accuracy[std::size_t(f)] = acc;
    res.fold_threshold[std::size_t(f)] = tau;
    sum += acc;
  }
  res.accuracy = sum / double(kNumFolds);
  return res;
}

/// TAR at one FAR target, step-function convention.
struct TarFarPoint {
  double far_target = 0.0;
  double threshold = 0.0;
  double tar = 0.0;           // fraction of genuine scores >= threshold
  double achieved_far = 0.0;  // fraction of impostor scores >= threshold
  bool unattainable = false;  // fewer impostors than 1/target; computed at FAR=0
};

/// True-acceptance rate at each FAR target. The threshold is the smallest
/// observed score tau with FAR(tau) <= target (a sentinel above the max covers
/// FAR = 0 when no observed score reaches it); no interpolation. A target
/// below 1/(impostor count) is unattainable and is reported with the flag set,
/// computed at the strictest achievable FAR.
inline std::vector<TarFarPoint> tar_at_far(const std::vector<ScoredPair>& pairs,
                                           const std::vector<double>& far_targets) {
  std::vector<double> gen, imp;
  for (const auto& p : pairs) (p.genuine ? gen : imp).push_back(p.score);
  if (gen.empty() || imp.empty())
    throw DataError("TAR@FAR needs at least one genuine and one impostor pair");
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());

  std::vector<double> cand;
  cand.reserve(gen.size() + imp.size() + 1);
  cand.insert(cand.end(), gen.begin(), gen.end());
  cand.insert(cand.end(), imp.begin(), imp.end());
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  cand.push_back(cand.back() + 1.0);

  const double M = double(imp.size());
  const double G = double(gen.size());
  auto at_least = [](const std::vector<double>& v, double tau) {
    return double(v.end() - std::lower_bound(v.begin(), v.end(), tau));
  };

  std::vector<TarFarPoint> out;
  out.reserve(far_targets.size());
  for (double target : far_targets) {
    if (target < 0.0) throw ConfigError("negative FAR target");
    TarFarPoint pt;
    pt.far_target = target;
    pt.unattainable = !(1.0 / M <= target);
    for (double tau : cand) {
      if (at_least(imp, tau) / M <= target) {
        pt.threshold = tau;
        break;
      }
    }
    pt.achieved_far = at_least(imp, pt.threshold) / M;
    pt.tar = at_least(gen, pt.threshold) / G;
    out.push_back(pt);
  }
  return out;
}

struct RocPoint {
  double threshold = 0.0;
  double far = 0.0;
  double tar = 0.0;
};

/// Empirical ROC as a step function: one point per distinct score, descending
/// threshold order, plus a leading sentinel so the curve starts at (0, 0).
/// The final point (threshold = min score) is always (1, 1).
inline std::vector<RocPoint> roc_points(const std::vector<ScoredPair>& pairs) {
  std::vector<double> gen, imp;
  for (const auto& p : pairs) (p.genuine ? gen : imp).push_back(p.score);
  if (gen.empty() || imp.empty())
    throw DataError("ROC needs at least one genuine and one impostor pair");
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());

  std::vector<double> ts;
  ts.reserve(gen.size() + imp.size() + 1);
  ts.insert(ts.end(), gen.begin(), gen.end());
  ts.insert(ts.end(), imp.begin(), imp.end());
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  ts.push_back(ts.back() + 1.0);
  std::reverse(ts.begin(), ts.end());

  auto at_least = [](const std::vector<double>& v, double tau) {
    return double(v.end() - std::lower_bound(v.begin(), v.end(), tau));
  };
  std::vector<RocPoint> out;
  out.reserve(ts.size());
  for (double tau : ts)
    out.push_back({tau, at_least(imp, tau) / double(imp.size()),
                   at_least(gen, tau) / double(gen.size())});
  return out;
}

/// Demographic fairness block. Error = 100 - accuracy; SER is the ratio of the
/// worst group error to the best. A perfect group (error 0) makes SER infinite
/// and sets the flag.
struct BiasBlock {
  std::map<std::string, double> group_accuracy;  // percent, keyed by group name
  double average = 0.0;
  double std_dev = 0.0;  // sample standard deviation (divisor n-1)
  double ser = 1.0;
  bool ser_infinite = false;
};

/// Bias statistics over per-group accuracies. Accumulation follows the sorted
/// group order of the map, so results do not depend on insertion order.
inline BiasBlock bias_report(const std::map<std::string, double>& group_accuracy) {
  if (group_accuracy.size() < 2)
    throw DataError("bias report needs at least 2 groups, got " +
                    std::to_string(group_accuracy.size()));
  for (const auto& [name, acc] : group_accuracy)
    if (!(acc >= 0.0 && acc <= 100.0))
      throw DataError("group '" + name + "' accuracy " + std::to_string(acc) +
                      " outside [0, 100]");

  BiasBlock blk;
  blk.group_accuracy = group_accuracy;
  const double n = double(group_accuracy.size());
  double sum = 0.0;
  for (const auto& [name, acc] : blk.group_accuracy) sum += acc;
  blk.average = sum / n;
  double ss = 0.0;
  for (const auto& [name, acc] : blk.group_accuracy)
    ss += (acc - blk.average) * (acc - blk.average);
  blk.std_dev = std::sqrt(ss / (n - 1.0));

  double emax = 0.0, emin = std::numeric_limits<double>::infinity();
  for (const auto& [name, acc] : blk.group_accuracy) {
    const double err = 100.0 - acc;
    emax = std::max(emax, err);
    emin = std::min(emin, err);
  }
  if (emin == 0.0 && emax > 0.0) {
    blk.ser_infinite = true;
    blk.ser = std::numeric_limits<double>::infinity();
  } else {
    blk.ser = emax == 0.0 ? 1.0 : emax / emin;  // all-perfect groups are unskewed
  }
  return blk;
}

/// Bias statistics from raw per-group verification sets: each group is scored
/// with the 10-fold protocol first, then the accuracy stats above apply.
inline BiasBlock bias_report(const std::map<std::string, std::vector<ScoredPair>>& groups) {
  std::map<std::string, double> acc;
  for (const auto& [name, pairs] : groups) {
    if (pairs.empty()) throw DataError("group '" + name + "' has zero pairs");
    acc[name] = tenfold_accuracy(pairs).accuracy;
  }
  return bias_report(acc);
}

}  // namespace faceadapt
