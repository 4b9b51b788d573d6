// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifests, identity subsetting, and verification pair protocols.
//
// Manifest files are plain delimited text with a `path,identity,group`
// header (group optional). Relative image paths are resolved against the
// manifest's own directory at load time. Class indices are assigned by
// sorting identity ids, so they are stable for a given identity set.
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"

namespace faceadapt {

struct ManifestRecord {
  std::string path;
  std::string identity;
  std::string group;  // empty when absent
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::map<std::string, std::vector<std::size_t>> by_identity;  // id -> record rows
  std::map<std::string, Index> class_index;                     // id -> 0..C-1

  Index num_classes() const { return Index(class_index.size()); }

  void build_index() {
    by_identity.clear();
    class_index.clear();
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].identity.empty())
        throw DataError("manifest row " + std::to_string(i + 1) + " has an empty identity");
      by_identity[records[i].identity].push_back(i);
    }
    Index next = 0;
    for (const auto& [id, rows] : by_identity) class_index[id] = next++;
  }

  bool has_groups() const {
    for (const auto& r : records)
      if (!r.group.empty()) return true;
    return false;
  }

  static DatasetManifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
    const auto base = path.parent_path();
    DatasetManifest m;
    std::string line;
    if (!std::getline(in, line)) throw DataError("manifest '" + path.string() + "' is empty");
    if (line != "path,identity,group" && line != "path,identity")
      throw DataError("manifest '" + path.string() +
                      "' must start with a 'path,identity[,group]' header");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream row(line);
      ManifestRecord rec;
      if (!std::getline(row, rec.path, ',') || !std::getline(row, rec.identity, ','))
        throw DataError("manifest line " + std::to_string(lineno) + " is malformed");
      std::getline(row, rec.group, ',');
      if (!base.empty() && std::filesystem::path(rec.path).is_relative())
        rec.path = (base / rec.path).string();
      m.records.push_back(std::move(rec));
    }
    m.build_index();
    return m;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    const bool groups = has_groups();
    out << (groups ? "path,identity,group" : "path,identity") << "\n";
    const auto base = path.parent_path();
    for (const auto& r : records) {
      auto p = std::filesystem::path(r.path);
      // Prefer a path relative to the manifest so the tree stays movable.
      if (!base.empty()) {
        auto rel = std::filesystem::relative(p, base);
        if (!rel.empty() && rel.native()[0] != '.') p = rel;
      }
      out << p.string() << "," << r.identity;
      if (groups) out << "," << r.group;
      out << "\n";
    }
    if (!out) throw DataError("failed writing '" + path.string() + "'");
  }
};

enum class DepthMode { RandomIdentities, TopByImageCount };

inline DepthMode parse_depth_mode(const std::string& s) {
  if (s == "random_identities") return DepthMode::RandomIdentities;
  if (s == "top_by_image_count") return DepthMode::TopByImageCount;
  throw ConfigError("unknown depth mode '" + s + "'");
}

struct SubsetSpec {
  Index n = 0;
  DepthMode mode = DepthMode::RandomIdentities;
  std::uint64_t seed = 0;
};

/// Keeps all images of n selected identities. random_identities ranks each
/// identity by a seeded hash, which makes smaller subsets prefixes of larger
/// ones under the same seed; top_by_image_count ranks by image count with
/// identity-id tie-breaks.
inline DatasetManifest subset(const DatasetManifest& m, const SubsetSpec& spec) {
  const Index total = m.num_classes();
  if (spec.n < 1 || spec.n > total)
    throw ConfigError("subset width " + std::to_string(spec.n) + " outside 1.." +
                      std::to_string(total));
  std::vector<std::string> ids;
  ids.reserve(std::size_t(total));
  for (const auto& [id, rows] : m.by_identity) ids.push_back(id);

  if (spec.mode == DepthMode::RandomIdentities) {
    std::stable_sort(ids.begin(), ids.end(), [&](const auto& a, const auto& b) {
      const auto pa = mix_seed(spec.seed, fnv1a64(a));
      const auto pb = mix_seed(spec.seed, fnv1a64(b));
      return pa != pb ? pa < pb : a < b;
    });
  } else {
    std::stable_sort(ids.begin(), ids.end(), [&](const auto& a, const auto& b) {
      const auto ca = m.by_identity.at(a).size(), cb = m.by_identity.at(b).size();
      return ca != cb ? ca > cb : a < b;
    });
  }
  std::set<std::string> keep(ids.begin(), ids.begin() + spec.n);

  DatasetManifest out;
  for (const auto& r : m.records)
    if (keep.count(r.identity)) out.records.push_back(r);
  out.build_index();
  return out;
}

struct PairRecord {
  std::string a;
  std::string b;
  bool genuine = false;
  int fold = 0;  // 0..9
};

struct PairProtocol {
  std::vector<PairRecord> pairs;

  static PairProtocol load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open pair file '" + path.string() + "'");
    const auto base = path.parent_path();
    PairProtocol proto;
    std::string line;
    if (!std::getline(in, line)) throw DataError("pair file '" + path.string() + "' is empty");
    bool with_fold = line == "pathA,pathB,label,fold";
    if (!with_fold && line != "pathA,pathB,label")
      throw DataError("pair file '" + path.string() +
                      "' must start with a 'pathA,pathB,label[,fold]' header");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream row(line);
      PairRecord rec;
      std::string label, fold;
      if (!std::getline(row, rec.a, ',') || !std::getline(row, rec.b, ',') ||
          !std::getline(row, label, ','))
        throw DataError("pair line " + std::to_string(lineno) + " is malformed");
      if (label == "genuine") rec.genuine = true;
      else if (label == "impostor") rec.genuine = false;
      else throw DataError("pair line " + std::to_string(lineno) + ": label '" + label +
                           "' is not genuine/impostor");
      if (with_fold) {
        if (!std::getline(row, fold, ','))
          throw DataError("pair line " + std::to_string(lineno) + " is missing its fold");
        rec.fold = std::stoi(fold);
        if (rec.fold < 0 || rec.fold > 9)
          throw DataError("pair line " + std::to_string(lineno) + ": fold outside 0..9");
      }
      for (auto* p : {&rec.a, &rec.b})
        if (!base.empty() && std::filesystem::path(*p).is_relative())
          *p = (base / *p).string();
      proto.pairs.push_back(std::move(rec));
    }
    return proto;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out << "pathA,pathB,label,fold\n";
    const auto base = path.parent_path();
    auto rel = [&](const std::string& s) {
      auto p = std::filesystem::path(s);
      if (!base.empty()) {
        auto r = std::filesystem::relative(p, base);
        if (!r.empty() && r.native()[0] != '.') return r.string();
      }
      return p.string();
    };
    for (const auto& p : pairs)
      out << rel(p.a) << "," << rel(p.b) << "," << (p.genuine ? "genuine" : "impostor")
          << "," << p.fold << "\n";
    if (!out) throw DataError("failed writing '" + path.string() + "'");
  }
};

/// Balanced genuine/impostor protocol over a manifest. Pairs are sampled
/// without replacement per label; folds cycle 0..9 within each label so
/// every fold stays balanced. Needs at least one identity with two images
/// (genuine side) and two identities (impostor side).
inline PairProtocol build_balanced_pairs(const DatasetManifest& m, std::size_t per_label,
                                         std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> genuine, impostor;
  const auto& recs = m.records;
  for (const auto& [id, rows] : m.by_identity)
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = i + 1; j < rows.size(); ++j)
        genuine.emplace_back(rows[i], rows[j]);
  for (auto a = m.by_identity.begin(); a != m.by_identity.end(); ++a)
    for (auto b = std::next(a); b != m.by_identity.end(); ++b)
      for (auto ra : a->second)
        for (auto rb : b->second) impostor.emplace_back(ra, rb);
  if (genuine.empty() || impostor.empty())
    throw DataError("manifest cannot form both genuine and impostor pairs");

  Rng rng(derive_seed(seed, "pair-protocol"));
  rng.shuffle(genuine);
  rng.shuffle(impostor);
  const std::size_t n = std::min({per_label, genuine.size(), impostor.size()});

  PairProtocol proto;
  for (std::size_t k = 0; k < n; ++k) {
    proto.pairs.push_back({recs[genuine[k].first].path, recs[genuine[k].second].path, true,
                           int(k % 10)});
    proto.pairs.push_back({recs[impostor[k].first].path, recs[impostor[k].second].path, false,
                           int(k % 10)});
  }
  return proto;
}

}  // namespace faceadapt
