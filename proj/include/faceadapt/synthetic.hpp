// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic identity dataset. Every identity owns a fixed band-limited
// sinusoid template; each image re-renders that template under a small random
// shift, brightness change and pixel noise. Same-identity images therefore
// correlate strongly while different identities are near-orthogonal, which is
// exactly the structure verification metrics need, with no face data at all.
#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"
#include "faceadapt/image.hpp"
#include "faceadapt/manifest.hpp"

namespace faceadapt {

struct SyntheticConfig {
  Index n_identities = 10;
  Index images_per_identity = 20;
  Index image_size = 56;
  Index n_groups = 2;            // 0 disables group labels
  std::uint64_t seed = 7;
  Index first_image_index = 0;   // raise to render extra, held-out images
  double noise = 0.06;
  double max_shift = 2.5;        // pixels, continuous
  double brightness_lo = 0.85;
  double brightness_hi = 1.15;
};

namespace detail {

struct SinusoidTemplate {
  struct Component {
    double fx, fy, phase, amp;
  };
  std::vector<Component> parts;

  double operator()(double x, double y, double size) const {
    double v = 0.5;
    for (const auto& c : parts)
      v += c.amp * std::sin(2.0 * std::numbers::pi * (c.fx * x + c.fy * y) / size + c.phase);
    return v;
  }
};

inline SinusoidTemplate identity_template(std::uint64_t id_seed) {
  Rng rng(id_seed);
  SinusoidTemplate t;
  for (int k = 0; k < 5; ++k) {
    SinusoidTemplate::Component c;
    c.fx = rng.uniform(0.5, 3.0);
    c.fy = rng.uniform(0.5, 3.0);
    c.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    c.amp = 0.28 / double(k + 1);
    t.parts.push_back(c);
  }
  return t;
}

}  // namespace detail

inline std::string synthetic_identity_name(Index i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "id%04lld", static_cast<long long>(i));
  return buf;
}

/// Renders one image of one identity. Pure in (config, identity index,
/// absolute image index).
template <typename Scalar = float>
Image<Scalar> render_synthetic_image(const SyntheticConfig& cfg, Index identity,
                                     Index image_index) {
  const auto id_seed = derive_seed(cfg.seed, "identity:" + synthetic_identity_name(identity));
  const auto tmpl = detail::identity_template(id_seed);
  Rng rng(mix_seed(id_seed, std::uint64_t(image_index)));
  const double dx = rng.uniform(-cfg.max_shift, cfg.max_shift);
  const double dy = rng.uniform(-cfg.max_shift, cfg.max_shift);
  const double gain = rng.uniform(cfg.brightness_lo, cfg.brightness_hi);
  const double bias = rng.uniform(-0.05, 0.05);

  const Index s = cfg.image_size;
  Image<Scalar> img = Image<Scalar>::zero(1, s, s);
  auto& p = img.planes[0];
  for (Index y = 0; y < s; ++y)
    for (Index x = 0; x < s; ++x) {
      double v = tmpl(double(x) - dx, double(y) - dy, double(s)) * gain + bias;
      v += cfg.noise * rng.gaussian();
      p(y, x) = Scalar(std::clamp(v, 0.0, 1.0));
    }
  return img;
}

/// Writes images under out_dir/<identity>/<index>.pgm and returns the
/// manifest (absolute paths, group labels round-robin when enabled).
inline DatasetManifest generate_synthetic_dataset(const SyntheticConfig& cfg,
                                                  const std::filesystem::path& out_dir) {
  if (cfg.n_identities < 1 || cfg.images_per_identity < 1 || cfg.image_size < 1)
    throw ConfigError("synthetic dataset counts must be positive");
  DatasetManifest m;
  for (Index i = 0; i < cfg.n_identities; ++i) {
    const std::string id = synthetic_identity_name(i);
    const auto dir = out_dir / id;
    std::filesystem::create_directories(dir);
    for (Index j = 0; j < cfg.images_per_identity; ++j) {
      const Index idx = cfg.first_image_index + j;
      const auto img = render_synthetic_image<float>(cfg, i, idx);
      char name[32];
      std::snprintf(name, sizeof(name), "%04lld.pgm", static_cast<long long>(idx));
      const auto file = dir / name;
      save_image(file, img);
      ManifestRecord rec;
      rec.path = file.string();
      rec.identity = id;
      if (cfg.n_groups > 0)
        rec.group = "g" + std::to_string(static_cast<long long>(i % cfg.n_groups));
      m.records.push_back(std::move(rec));
    }
  }
  m.build_index();
  return m;
}

}  // namespace faceadapt
