// SPDX-License-Identifier: Apache-2.0
//
// Evaluation harness: runs named pair protocols against a backbone, scoring
// each pair by cosine similarity of CLS embeddings. Embeddings are computed
// once per unique image path and cached; every metric lands in one
// MetricReport that serializes deterministically (same inputs, same bytes).

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "faceadapt/augment.hpp"
#include "faceadapt/image.hpp"
#include "faceadapt/manifest.hpp"
#include "faceadapt/metrics.hpp"
#include "faceadapt/vit.hpp"

namespace faceadapt {

/// One named benchmark: a pair protocol scored as a unit. With two or more
/// benchmarks the report also carries a bias block over their accuracies.
struct EvalBenchmark {
  std::string name;
  PairProtocol protocol;
};

template <typename Scalar>
struct EvalOptions {
  std::vector<double> far_targets = {1e-3, 1e-4, 1e-5};
  Normalization<Scalar> norm = Normalization<Scalar>::uniform(1, Scalar(0.5), Scalar(0.5));
  bool keep_roc = true;
  bool use_cache = true;  // scoring is identical either way; off means recompute
};

struct BenchmarkResult {
  std::string name;
  std::size_t pairs = 0;
  TenfoldResult tenfold;
  std::vector<TarFarPoint> tar;
  std::vector<RocPoint> roc;
};

struct MetricReport {
  std::vector<BenchmarkResult> benchmarks;
  std::optional<BiasBlock> bias;  // present with >= 2 benchmarks
};

namespace detail {

template <typename Scalar>
class EmbeddingCache {
 public:
  EmbeddingCache(const ViTBackbone<Scalar>& bb, const EvalOptions<Scalar>& opts)
      : bb_(bb), opts_(opts) {}

  VecX<Scalar> get(const std::string& path) {
    if (opts_.use_cache) {
      auto it = cache_.find(path);
      if (it != cache_.end()) return it->second;
    }
    Image<Scalar> img = load_image<Scalar>(path);
    img = preprocess(img, bb_.cfg.image_size, /*train_mode=*/false, /*seed=*/0,
                     AugmentPolicy::none(), opts_.norm);
    VecX<Scalar> e = extract_embedding(bb_, img);
    if (opts_.use_cache) cache_.emplace(path, e);
    return e;
  }

 private:
  const ViTBackbone<Scalar>& bb_;
  const EvalOptions<Scalar>& opts_;
  std::unordered_map<std::string, VecX<Scalar>> cache_;
};

}  // namespace detail

/// Scores one protocol with a shared embedding cache.
template <typename Scalar>
std::vector<ScoredPair> score_pairs(detail::EmbeddingCache<Scalar>& cache,
                                    const PairProtocol& proto) {
  std::vector<ScoredPair> out;
  out.reserve(proto.pairs.size());
  for (const auto& p : proto.pairs) {
    ScoredPair sp;
    sp.score = double(similarity(cache.get(p.a), cache.get(p.b)));
    sp.genuine = p.genuine;
    sp.fold = p.fold;
    out.push_back(sp);
  }
  return out;
}

template <typename Scalar>
MetricReport evaluate(const ViTBackbone<Scalar>& bb, const std::vector<EvalBenchmark>& benchmarks,
                      const EvalOptions<Scalar>& opts = {}) {
  if (benchmarks.empty()) throw DataError("no benchmarks to evaluate");
  detail::EmbeddingCache<Scalar> cache(bb, opts);
  MetricReport report;
  for (const auto& bm : benchmarks) {
    if (bm.protocol.pairs.empty())
      throw DataError("benchmark '" + bm.name + "' has no pairs");
    const auto scored = score_pairs(cache, bm.protocol);
    BenchmarkResult res;
    res.name = bm.name;
    res.pairs = scored.size();
    res.tenfold = tenfold_accuracy(scored);
    res.tar = tar_at_far(scored, opts.far_targets);
    if (opts.keep_roc) res.roc = roc_points(scored);
    report.benchmarks.push_back(std::move(res));
  }
  if (report.benchmarks.size() >= 2) {
    std::map<std::string, double> acc;
    for (const auto& b : report.benchmarks) acc[b.name] = b.tenfold.accuracy;
    if (acc.size() != report.benchmarks.size())
      throw ConfigError("benchmark names must be unique for the bias block");
    report.bias = bias_report(acc);
  }
  return report;
}

/// JSON form of the report (ROC curves are summarized by point count; the
/// full curves go to their own two-column files). nlohmann objects keep keys
/// sorted, so the dump is deterministic.
inline nlohmann::json report_json(const MetricReport& report) {
  nlohmann::json root;
  nlohmann::json bms = nlohmann::json::object();
  for (const auto& b : report.benchmarks) {
    nlohmann::json jb;
    jb["pairs"] = b.pairs;
    jb["accuracy"] = b.tenfold.accuracy;
    jb["fold_accuracy"] = b.tenfold.fold_accuracy;
    jb["fold_threshold"] = b.tenfold.fold_threshold;
    nlohmann::json tars = nlohmann::json::array();
    for (const auto& t : b.tar) {
      nlohmann::json jt;
      jt["far_target"] = t.far_target;
      jt["threshold"] = t.threshold;
      jt["tar"] = t.tar;
      jt["achieved_far"] = t.achieved_far;
      jt["unattainable"] = t.unattainable;
      tars.push_back(jt);
    }
    jb["tar_at_far"] = tars;
    jb["roc_points"] = b.roc.size();
    bms[b.name] = jb;
  }
  root["benchmarks"] = bms;
  if (report.bias) {
    nlohmann::json jb;
    jb["group_accuracy"] = report.bias->group_accuracy;
    jb["average"] = report.bias->average;
    jb["std"] = report.bias->std_dev;
    jb["ser"] = report.bias->ser_infinite ? nlohmann::json("inf")
                                          : nlohmann::json(report.bias->ser);
    jb["ser_infinite"] = report.bias->ser_infinite;
    root["bias"] = jb;
  }
  return root;
}

/// Writes report.json, summary.csv, and one roc-<benchmark>.csv per kept ROC
/// curve into `out_dir`. Same report in, byte-identical files out.
inline void write_report(const MetricReport& report, const std::filesystem::path& out_dir) {
  if (report.benchmarks.empty()) throw DataError("empty report");
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "report.json", std::ios::binary);
    if (!out) throw DataError("cannot write '" + (out_dir / "report.json").string() + "'");
    out << report_json(report).dump(2) << "\n";
  }
  char buf[64];
  {
    std::ofstream out(out_dir / "summary.csv", std::ios::binary);
    if (!out) throw DataError("cannot write '" + (out_dir / "summary.csv").string() + "'");
    out << "benchmark,pairs,accuracy";
    for (const auto& t : report.benchmarks.front().tar) {
      std::snprintf(buf, sizeof buf, "%g", t.far_target);
      out << ",tar_at_far_" << buf;
    }
    out << "\n";
    for (const auto& b : report.benchmarks) {
      std::snprintf(buf, sizeof buf, "%.6f", b.tenfold.accuracy);
      out << b.name << "," << b.pairs << "," << buf;
      for (const auto& t : b.tar) {
        std::snprintf(buf, sizeof buf, "%.6f", t.tar);
        out << "," << buf << (t.unattainable ? "*" : "");
      }
      out << "\n";
    }
    if (report.bias) {
      std::snprintf(buf, sizeof buf, "%.6f", report.bias->average);
      out << "bias_average,," << buf << "\n";
      std::snprintf(buf, sizeof buf, "%.6f", report.bias->std_dev);
      out << "bias_std,," << buf << "\n";
      if (report.bias->ser_infinite) {
        out << "bias_ser,,inf\n";
      } else {
        std::snprintf(buf, sizeof buf, "%.6f", report.bias->ser);
        out << "bias_ser,," << buf << "\n";
      }
    }
  }
  for (const auto& b : report.benchmarks) {
    if (b.roc.empty()) continue;
    std::ofstream out(out_dir / ("roc-" + b.name + ".csv"), std::ios::binary);
    if (!out) throw DataError("cannot write ROC for '" + b.name + "'");
    out << "far,tar\n";
    for (const auto& p : b.roc) {
      std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", p.far, p.tar);
      out << buf;
    }
  }
}

}  // namespace faceadapt
