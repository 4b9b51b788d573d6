// SPDX-License-Identifier: Apache-2.0
//
// Backbone serialization and foreign-weight import.
//
// Canonical parameter names (shapes in comments, d = d_model, P = patch_dim,
// T = seq_len, M = d_mlp):
//   patch_embed.weight d x P      patch_embed.bias d
//   cls_token d                   pos_embed T x d
//   blocks.{i}.ln1.weight/.bias   blocks.{i}.ln2.weight/.bias
//   blocks.{i}.attn.{q,k,v,o}.weight d x d and .bias d
//   blocks.{i}.mlp.fc1.weight M x d  .bias M
//   blocks.{i}.mlp.fc2.weight d x M  .bias d
//   norm.weight d                 norm.bias d
//
// Mapping files translate foreign layouts into canonical names, one rule per
// line: `canonical <- source [transform ...]`. `{i}` expands over blocks.
// Transforms: squeeze, flatten, transpose, split3:q|k|v, optional; the
// special source `zeros` fills with zeros. `@norm m1,m2,m3 s1,s2,s3` records
// the pixel normalization the source model expects. Imported positional
// tables are resampled bicubically when the grid size differs.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"
#include "faceadapt/container.hpp"
#include "faceadapt/vit.hpp"

namespace faceadapt {

// ---------------------------------------------------------------------------
// Canonical save / load
// ---------------------------------------------------------------------------

template <typename Scalar>
Container backbone_container(const ViTBackbone<Scalar>& bb) {
  Container c;
  c.set_matrix("patch_embed.weight", bb.patch_embed.W);
  c.set_vector("patch_embed.bias", bb.patch_embed.b);
  c.set_vector("cls_token", bb.cls_token);
  c.set_matrix("pos_embed", bb.pos_embed);
  for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
    const auto& blk = bb.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    c.set_vector(p + "ln1.weight", blk.ln1.gamma);
    c.set_vector(p + "ln1.bias", blk.ln1.beta);
    c.set_matrix(p + "attn.q.weight", blk.attn.q.W);
    c.set_vector(p + "attn.q.bias", blk.attn.q.b);
    c.set_matrix(p + "attn.k.weight", blk.attn.k.W);
    c.set_vector(p + "attn.k.bias", blk.attn.k.b);
    c.set_matrix(p + "attn.v.weight", blk.attn.v.W);
    c.set_vector(p + "attn.v.bias", blk.attn.v.b);
    c.set_matrix(p + "attn.o.weight", blk.attn.o.W);
    c.set_vector(p + "attn.o.bias", blk.attn.o.b);
    c.set_vector(p + "ln2.weight", blk.ln2.gamma);
    c.set_vector(p + "ln2.bias", blk.ln2.beta);
    c.set_matrix(p + "mlp.fc1.weight", blk.fc1.W);
    c.set_vector(p + "mlp.fc1.bias", blk.fc1.b);
    c.set_matrix(p + "mlp.fc2.weight", blk.fc2.W);
    c.set_vector(p + "mlp.fc2.bias", blk.fc2.b);
  }
  c.set_vector("norm.weight", bb.norm.gamma);
  c.set_vector("norm.bias", bb.norm.beta);
  c.metadata["image_size"] = std::to_string(bb.cfg.image_size);
  c.metadata["patch_size"] = std::to_string(bb.cfg.patch_size);
  c.metadata["channels"] = std::to_string(bb.cfg.channels);
  c.metadata["d_model"] = std::to_string(bb.cfg.d_model);
  c.metadata["n_heads"] = std::to_string(bb.cfg.n_heads);
  c.metadata["n_layers"] = std::to_string(bb.cfg.n_layers);
  c.metadata["mlp_ratio"] = std::to_string(bb.cfg.mlp_ratio);
  return c;
}

/// Hash of the frozen weights in canonical form; adapters never contribute.
template <typename Scalar>
std::string backbone_fingerprint(const ViTBackbone<Scalar>& bb) {
  return backbone_container(bb).fingerprint();
}

template <typename Scalar>
void save_backbone(const ViTBackbone<Scalar>& bb, const std::filesystem::path& path) {
  backbone_container(bb).save(path);
}

inline ViTConfig config_from_metadata(const std::map<std::string, std::string>& md) {
  ViTConfig cfg;
  auto need = [&](const char* key) {
    auto it = md.find(key);
    if (it == md.end())
      throw DataError(std::string("backbone file metadata is missing '") + key + "'");
    return it->second;
  };
  cfg.image_size = std::stol(need("image_size"));
  cfg.patch_size = std::stol(need("patch_size"));
  cfg.channels = std::stol(need("channels"));
  cfg.d_model = std::stol(need("d_model"));
  cfg.n_heads = std::stol(need("n_heads"));
  cfg.n_layers = std::stol(need("n_layers"));
  cfg.mlp_ratio = std::stod(need("mlp_ratio"));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Mapping tables
// ---------------------------------------------------------------------------

struct MappingRule {
  std::string canonical;
  std::string source;                   // "zeros" fills without a source tensor
  std::vector<std::string> transforms;  // squeeze | flatten | transpose | split3:x | optional
};

struct MappingTable {
  std::vector<MappingRule> rules;
  std::vector<double> norm_mean, norm_std;  // empty unless @norm present

  static MappingTable parse_text(const std::string& text) {
    MappingTable t;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream row(line);
      std::string first;
      if (!(row >> first)) continue;
      if (first == "@norm") {
        std::string means, stds;
        if (!(row >> means >> stds))
          throw ConfigError("mapping line " + std::to_string(lineno) +
                            ": @norm needs mean and std lists");
        auto parse_list = [&](const std::string& s) {
          std::vector<double> out;
          std::istringstream ls(s);
          std::string item;
          while (std::getline(ls, item, ',')) out.push_back(std::stod(item));
          return out;
        };
        t.norm_mean = parse_list(means);
        t.norm_std = parse_list(stds);
        if (t.norm_mean.size() != t.norm_std.size() || t.norm_mean.empty())
          throw ConfigError("mapping line " + std::to_string(lineno) +
                            ": @norm lists must be nonempty and equal length");
        continue;
      }
      MappingRule rule;
      rule.canonical = first;
      std::string arrow;
      if (!(row >> arrow >> rule.source) || arrow != "<-")
        throw ConfigError("mapping line " + std::to_string(lineno) +
                          ": expected 'canonical <- source [transform ...]'");
      std::string tr;
      while (row >> tr) rule.transforms.push_back(tr);
      t.rules.push_back(std::move(rule));
    }
    return t;
  }

  static MappingTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open mapping file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
  }

  /// Concrete canonical->rule map with {i} expanded over block indices.
  std::map<std::string, MappingRule> expand(Index n_layers) const {
    std::map<std::string, MappingRule> out;
    auto substitute = [](std::string s, const std::string& idx) {
      for (auto pos = s.find("{i}"); pos != std::string::npos; pos = s.find("{i}"))
        s.replace(pos, 3, idx);
      return s;
    };
    for (const auto& r : rules) {
      if (r.canonical.find("{i}") == std::string::npos) {
        out[r.canonical] = r;
        continue;
      }
      for (Index i = 0; i < n_layers; ++i) {
        const auto idx = std::to_string(i);
        MappingRule concrete = r;
        concrete.canonical = substitute(r.canonical, idx);
        concrete.source = substitute(r.source, idx);
        out[concrete.canonical] = std::move(concrete);
      }
    }
    return out;
  }
};

struct LoadReport {
  std::vector<std::string> loaded;     // canonical names filled from the source
  std::vector<std::string> defaulted;  // zeros / absent-optional entries
  bool pos_embed_resampled = false;
  std::string fingerprint;
  std::vector<double> norm_mean, norm_std;
};

namespace detail {

struct Shaped {
  std::vector<std::int64_t> shape;
  std::vector<double> values;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

inline Shaped to_shaped(const HostTensor& t) {
  Shaped s;
  s.shape = t.shape;
  s.values.resize(std::size_t(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) s.values[std::size_t(i)] = t.at(i);
  return s;
}

inline std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i)
    s += (i ? "x" : "") + std::to_string(shape[i]);
  return s.empty() ? "scalar" : s;
}

inline void apply_transform(Shaped& t, const std::string& tr, const std::string& canonical) {
  if (tr == "optional") return;  // handled by the caller
  if (tr == "squeeze") {
    while (t.shape.size() > 1 && t.shape.front() == 1) t.shape.erase(t.shape.begin());
    return;
  }
  if (tr == "flatten") {
    if (t.shape.size() < 2) return;
    std::int64_t rest = 1;
    for (std::size_t i = 1; i < t.shape.size(); ++i) rest *= t.shape[i];
    t.shape = {t.shape[0], rest};
    return;
  }
  if (tr == "transpose") {
    if (t.shape.size() != 2)
      throw DataError("transpose needs a 2-D tensor for '" + canonical + "'");
    Shaped out;
    out.shape = {t.shape[1], t.shape[0]};
    out.values.resize(t.values.size());
    for (std::int64_t i = 0; i < t.shape[0]; ++i)
      for (std::int64_t j = 0; j < t.shape[1]; ++j)
        out.values[std::size_t(j * t.shape[0] + i)] =
            t.values[std::size_t(i * t.shape[1] + j)];
    t = std::move(out);
    return;
  }
  if (tr.rfind("split3:", 0) == 0) {
    const std::string which = tr.substr(7);
    std::int64_t idx;
    if (which == "q" || which == "0") idx = 0;
    else if (which == "k" || which == "1") idx = 1;
    else if (which == "v" || which == "2") idx = 2;
    else throw ConfigError("bad split3 selector '" + which + "' for '" + canonical + "'");
    if (t.shape.empty() || t.shape[0] % 3 != 0)
      throw DataError("split3 source for '" + canonical + "' has first dim " +
                      std::to_string(t.shape.empty() ? 0 : t.shape[0]) +
                      ", not divisible by 3");
    const std::int64_t third = t.shape[0] / 3;
    std::int64_t stride = 1;
    for (std::size_t i = 1; i < t.shape.size(); ++i) stride *= t.shape[i];
    Shaped out;
    out.shape = t.shape;
    out.shape[0] = third;
    out.values.assign(t.values.begin() + idx * third * stride,
                      t.values.begin() + (idx + 1) * third * stride);
    t = std::move(out);
    return;
  }
  throw ConfigError("unknown mapping transform '" + tr + "' for '" + canonical + "'");
}

// Catmull-Rom weights for the four taps around a sample at fraction t.
inline std::array<double, 4> cubic_weights(double t) {
  const double t2 = t * t, t3 = t2 * t;
  return {-0.5 * t3 + t2 - 0.5 * t, 1.5 * t3 - 2.5 * t2 + 1.0,
          -1.5 * t3 + 2.0 * t2 + 0.5 * t, 0.5 * t3 - 0.5 * t2};
}

}  // namespace detail

/// Resamples a square positional grid (rows of `src`, row-major g x g) to a
/// new side length with separable Catmull-Rom interpolation, half-pixel
/// centred like the image resizer.
template <typename Scalar>
MatX<Scalar> interpolate_pos_grid(const MatX<Scalar>& src, Index dst_side) {
  const Index n = src.rows();
  const Index side = Index(std::lround(std::sqrt(double(n))));
  if (side * side != n)
    throw DataError("positional grid with " + std::to_string(n) + " rows is not square");
  if (side == dst_side) return src;
  const Index d = src.cols();
  const double scale = double(side) / double(dst_side);
  auto tap = [&](Index v) { return std::clamp(v, Index(0), side - 1); };
  MatX<Scalar> dst(dst_side * dst_side, d);
  for (Index y = 0; y < dst_side; ++y) {
    const double fy = (y + 0.5) * scale - 0.5;
    const Index y0 = Index(std::floor(fy));
    const auto wy = detail::cubic_weights(fy - double(y0));
    for (Index x = 0; x < dst_side; ++x) {
      const double fx = (x + 0.5) * scale - 0.5;
      const Index x0 = Index(std::floor(fx));
      const auto wx = detail::cubic_weights(fx - double(x0));
      VecX<double> acc = VecX<double>::Zero(d);
      for (int iy = -1; iy <= 2; ++iy)
        for (int ix = -1; ix <= 2; ++ix) {
          const Index sy = tap(y0 + iy), sx = tap(x0 + ix);
          acc += wy[std::size_t(iy + 1)] * wx[std::size_t(ix + 1)] *
                 src.row(sy * side + sx).transpose().template cast<double>();
        }
      dst.row(y * dst_side + x) = acc.template cast<Scalar>().transpose();
    }
  }
  return dst;
}

/// Populates a backbone of the given config from a foreign container through
/// a mapping table. Canonical names without a rule map to themselves.
template <typename Scalar>
ViTBackbone<Scalar> load_backbone_weights(const Container& src, const MappingTable& mapping,
                                          const ViTConfig& cfg, LoadReport* report = nullptr) {
  cfg.validate();
  ViTBackbone<Scalar> bb = make_random_backbone<Scalar>(cfg, 0);
  const auto rules = mapping.expand(cfg.n_layers);
  LoadReport local;

  auto fetch = [&](const std::string& canonical,
                   const std::vector<std::int64_t>& want) -> std::optional<detail::Shaped> {
    MappingRule rule{canonical, canonical, {}};
    if (auto it = rules.find(canonical); it != rules.end()) rule = it->second;
    const bool optional =
        std::find(rule.transforms.begin(), rule.transforms.end(), "optional") !=
        rule.transforms.end();
    if (rule.source == "zeros") {
      detail::Shaped z;
      z.shape = want;
      z.values.assign(std::size_t(detail::Shaped{want, {}}.numel()), 0.0);
      local.defaulted.push_back(canonical);
      return z;
    }
    if (!src.has(rule.source)) {
      if (optional) {
        local.defaulted.push_back(canonical);
        return std::nullopt;
      }
      throw DataError("missing required parameter '" + canonical + "' (source name '" +
                      rule.source + "')");
    }
    auto shaped = detail::to_shaped(src.at(rule.source));
    for (const auto& tr : rule.transforms) detail::apply_transform(shaped, tr, canonical);
    local.loaded.push_back(canonical);
    return shaped;
  };

  auto as_matrix = [&](const detail::Shaped& s, Index rows, Index cols,
                       const std::string& canonical) {
    if (s.shape.size() != 2 || s.shape[0] != rows || s.shape[1] != cols)
      throw DataError("shape conflict for '" + canonical + "': got " +
                      detail::shape_string(s.shape) + ", expected " + std::to_string(rows) +
                      "x" + std::to_string(cols));
    MatX<Scalar> m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j)
        m(i, j) = Scalar(s.values[std::size_t(i * cols + j)]);
    return m;
  };
  auto as_vector = [&](const detail::Shaped& s, Index len, const std::string& canonical) {
    if (s.shape.size() != 1 || s.shape[0] != len)
      throw DataError("shape conflict for '" + canonical + "': got " +
                      detail::shape_string(s.shape) + ", expected " + std::to_string(len));
    VecX<Scalar> v(len);
    for (Index i = 0; i < len; ++i) v(i) = Scalar(s.values[std::size_t(i)]);
    return v;
  };

  auto load_matrix = [&](MatX<Scalar>& dst, const std::string& canonical, Index rows,
                         Index cols) {
    if (auto s = fetch(canonical, {rows, cols}))
      dst = as_matrix(*s, rows, cols, canonical);
    else
      dst.setZero(rows, cols);
  };
  auto load_vector = [&](VecX<Scalar>& dst, const std::string& canonical, Index len) {
    if (auto s = fetch(canonical, {len}))
      dst = as_vector(*s, len, canonical);
    else
      dst = VecX<Scalar>::Zero(len);
  };

  load_matrix(bb.patch_embed.W, "patch_embed.weight", cfg.d_model, cfg.patch_dim());
  load_vector(bb.patch_embed.b, "patch_embed.bias", cfg.d_model);
  load_vector(bb.cls_token, "cls_token", cfg.d_model);

  // Positional table: accept a different grid size and resample it.
  if (auto s = fetch("pos_embed", {cfg.seq_len(), cfg.d_model})) {
    if (s->shape.size() != 2 || s->shape[1] != cfg.d_model)
      throw DataError("shape conflict for 'pos_embed': got " +
                      detail::shape_string(s->shape) + ", expected Nx" +
                      std::to_string(cfg.d_model));
    MatX<Scalar> table = as_matrix(*s, Index(s->shape[0]), cfg.d_model, "pos_embed");
    if (table.rows() != cfg.seq_len()) {
      MatX<Scalar> grid = interpolate_pos_grid(
          MatX<Scalar>(table.bottomRows(table.rows() - 1)), cfg.grid());
      MatX<Scalar> out(cfg.seq_len(), cfg.d_model);
      out.row(0) = table.row(0);  // CLS position carries over untouched
      out.bottomRows(cfg.n_patches()) = grid;
      table = std::move(out);
      local.pos_embed_resampled = true;
    }
    bb.pos_embed = std::move(table);
  } else {
    bb.pos_embed.setZero(cfg.seq_len(), cfg.d_model);
  }

  for (Index i = 0; i < cfg.n_layers; ++i) {
    auto& blk = bb.blocks[std::size_t(i)];
    const std::string p = "blocks." + std::to_string(i) + ".";
    load_vector(blk.ln1.gamma, p + "ln1.weight", cfg.d_model);
    load_vector(blk.ln1.beta, p + "ln1.bias", cfg.d_model);
    load_matrix(blk.attn.q.W, p + "attn.q.weight", cfg.d_model, cfg.d_model);
    load_vector(blk.attn.q.b, p + "attn.q.bias", cfg.d_model);
    load_matrix(blk.attn.k.W, p + "attn.k.weight", cfg.d_model, cfg.d_model);
    load_vector(blk.attn.k.b, p + "attn.k.bias", cfg.d_model);
    load_matrix(blk.attn.v.W, p + "attn.v.weight", cfg.d_model, cfg.d_model);
    load_vector(blk.attn.v.b, p + "attn.v.bias", cfg.d_model);
    load_matrix(blk.attn.o.W, p + "attn.o.weight", cfg.d_model, cfg.d_model);
    load_vector(blk.attn.o.b, p + "attn.o.bias", cfg.d_model);
    load_vector(blk.ln2.gamma, p + "ln2.weight", cfg.d_model);
    load_vector(blk.ln2.beta, p + "ln2.bias", cfg.d_model);
    load_matrix(blk.fc1.W, p + "mlp.fc1.weight", cfg.d_mlp(), cfg.d_model);
    load_vector(blk.fc1.b, p + "mlp.fc1.bias", cfg.d_mlp());
    load_matrix(blk.fc2.W, p + "mlp.fc2.weight", cfg.d_model, cfg.d_mlp());
    load_vector(blk.fc2.b, p + "mlp.fc2.bias", cfg.d_model);
  }
  load_vector(bb.norm.gamma, "norm.weight", cfg.d_model);
  load_vector(bb.norm.beta, "norm.bias", cfg.d_model);

  local.fingerprint = backbone_fingerprint(bb);
  local.norm_mean = mapping.norm_mean;
  local.norm_std = mapping.norm_std;
  if (report) *report = std::move(local);
  return bb;
}

/// Loads a canonically saved backbone, config from metadata.
template <typename Scalar>
ViTBackbone<Scalar> load_backbone(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  const ViTConfig cfg = config_from_metadata(c.metadata);
  return load_backbone_weights<Scalar>(c, MappingTable{}, cfg, nullptr);
}

}  // namespace faceadapt
