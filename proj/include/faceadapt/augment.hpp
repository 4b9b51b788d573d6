// SPDX-License-Identifier: Apache-2.0
//
// Deterministic preprocessing: resize, horizontal flip, a RandAug-style
// operation pool, and channel normalization. All randomness flows from the
// seed passed to preprocess(); eval mode touches no RNG at all.
//
// The operation pool keeps magnitudes gentle and excludes rotations and
// shears, which wreck aligned faces. Magnitude m in [0, 30] maps to the
// fraction m/30 of each operation's full strength.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "faceadapt/common.hpp"
#include "faceadapt/image.hpp"

namespace faceadapt {

template <typename Scalar>
struct Normalization {
  VecX<Scalar> mean;
  VecX<Scalar> stddev;

  static Normalization uniform(Index channels, Scalar m, Scalar s) {
    Normalization n;
    n.mean = VecX<Scalar>::Constant(channels, m);
    n.stddev = VecX<Scalar>::Constant(channels, s);
    return n;
  }
};

enum class AugOp {
  AutoContrast,
  Equalize,
  Posterize,
  Solarize,
  Brightness,
  Contrast,
  Color,
  Sharpness,
  TranslateX,
  TranslateY,
};

inline constexpr std::array<AugOp, 10> kAugOps = {
    AugOp::AutoContrast, AugOp::Equalize,  AugOp::Posterize, AugOp::Solarize,
    AugOp::Brightness,   AugOp::Contrast,  AugOp::Color,     AugOp::Sharpness,
    AugOp::TranslateX,   AugOp::TranslateY};

struct AugmentPolicy {
  int num_ops = 4;
  int magnitude = 16;  // 0..30
  double flip_prob = 0.5;

  static AugmentPolicy none() { return {0, 0, 0.0}; }
};

namespace detail {

template <typename Scalar>
void clamp01(Image<Scalar>& img) {
  for (auto& p : img.planes)
    p = p.array().cwiseMax(Scalar(0)).cwiseMin(Scalar(1)).matrix();
}

template <typename Scalar>
MatX<Scalar> luminance(const Image<Scalar>& img) {
  if (img.channels() == 3)
    return Scalar(0.299) * img.planes[0] + Scalar(0.587) * img.planes[1] +
           Scalar(0.114) * img.planes[2];
  return img.planes[0];
}

template <typename Scalar>
void auto_contrast(Image<Scalar>& img) {
  for (auto& p : img.planes) {
    const Scalar lo = p.minCoeff(), hi = p.maxCoeff();
    if (hi > lo) p = ((p.array() - lo) / (hi - lo)).matrix();
  }
}

template <typename Scalar>
void equalize(Image<Scalar>& img) {
  for (auto& p : img.planes) {
    std::array<int, 256> hist{};
    for (Index y = 0; y < p.rows(); ++y)
      for (Index x = 0; x < p.cols(); ++x) {
        int b = int(std::clamp(double(p(y, x)) * 255.0, 0.0, 255.0));
        ++hist[std::size_t(b)];
      }
    std::array<double, 256> lut{};
    const double total = double(p.size());
    long cum = 0;
    long cdf_min = 0;
    for (int b = 0; b < 256; ++b)
      if (hist[std::size_t(b)] > 0) {
        cdf_min = hist[std::size_t(b)];
        break;
      }
    if (total <= double(cdf_min)) continue;  // single-value plane
    for (int b = 0; b < 256; ++b) {
      cum += hist[std::size_t(b)];
      lut[std::size_t(b)] = double(cum - cdf_min) / (total - double(cdf_min));
    }
    for (Index y = 0; y < p.rows(); ++y)
      for (Index x = 0; x < p.cols(); ++x) {
        int b = int(std::clamp(double(p(y, x)) * 255.0, 0.0, 255.0));
        p(y, x) = Scalar(lut[std::size_t(b)]);
      }
  }
}

template <typename Scalar>
void posterize(Image<Scalar>& img, double f) {
  const int bits = 8 - int(std::lround(4.0 * f));  // 8 down to 4
  const int mask = ~((1 << (8 - bits)) - 1) & 0xff;
  for (auto& p : img.planes)
    for (Index y = 0; y < p.rows(); ++y)
      for (Index x = 0; x < p.cols(); ++x) {
        int b = int(std::clamp(double(p(y, x)) * 255.0, 0.0, 255.0));
        p(y, x) = Scalar(double(b & mask) / 255.0);
      }
}

template <typename Scalar>
void solarize(Image<Scalar>& img, double f) {
  const Scalar threshold = Scalar(1.0 - f);
  for (auto& p : img.planes)
    p = ((p.array() < threshold).select(p.array(), Scalar(1) - p.array())).matrix();
}

// PIL-style enhancement: blend between a degenerate image and the original.
// factor 1 keeps the input; the sign of the excursion is a coin flip.
inline double enhance_factor(double f, Rng& rng) {
  const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
  return 1.0 + sign * 0.9 * f;
}

template <typename Scalar>
void brightness(Image<Scalar>& img, double factor) {
  for (auto& p : img.planes) p *= Scalar(factor);
}

template <typename Scalar>
void contrast(Image<Scalar>& img, double factor) {
  const Scalar mu = luminance(img).mean();
  for (auto& p : img.planes)
    p = (mu + Scalar(factor) * (p.array() - mu)).matrix();
}

template <typename Scalar>
void color(Image<Scalar>& img, double factor) {
  if (img.channels() != 3) return;  // saturation needs color planes
  const MatX<Scalar> g = luminance(img);
  for (auto& p : img.planes) p = g + Scalar(factor) * (p - g);
}

template <typename Scalar>
void sharpness(Image<Scalar>& img, double factor) {
  for (auto& p : img.planes) {
    if (p.rows() < 3 || p.cols() < 3) continue;
    MatX<Scalar> smooth = p;
    for (Index y = 1; y + 1 < p.rows(); ++y)
      for (Index x = 1; x + 1 < p.cols(); ++x)
        smooth(y, x) = (p.block(y - 1, x - 1, 3, 3).sum() + Scalar(4) * p(y, x)) / Scalar(13);
    p = smooth + Scalar(factor) * (p - smooth);
  }
}

template <typename Scalar>
void translate(Image<Scalar>& img, bool horizontal, Index shift) {
  if (shift == 0) return;
  for (auto& p : img.planes) {
    MatX<Scalar> moved = MatX<Scalar>::Constant(p.rows(), p.cols(), Scalar(0.5));
    for (Index y = 0; y < p.rows(); ++y)
      for (Index x = 0; x < p.cols(); ++x) {
        const Index sy = horizontal ? y : y - shift;
        const Index sx = horizontal ? x - shift : x;
        if (sy >= 0 && sy < p.rows() && sx >= 0 && sx < p.cols())
          moved(y, x) = p(sy, sx);
      }
    p = std::move(moved);
  }
}

template <typename Scalar>
void apply_op(Image<Scalar>& img, AugOp op, double f, Rng& rng) {
  switch (op) {
    case AugOp::AutoContrast: auto_contrast(img); break;
    case AugOp::Equalize: equalize(img); break;
    case AugOp::Posterize: posterize(img, f); break;
    case AugOp::Solarize: solarize(img, f); break;
    case AugOp::Brightness: brightness(img, enhance_factor(f, rng)); break;
    case AugOp::Contrast: contrast(img, enhance_factor(f, rng)); break;
    case AugOp::Color: color(img, enhance_factor(f, rng)); break;
    case AugOp::Sharpness: sharpness(img, enhance_factor(f, rng)); break;
    case AugOp::TranslateX:
    case AugOp::TranslateY: {
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const Index side = op == AugOp::TranslateX ? img.width() : img.height();
      const Index shift = Index(std::lround(sign * f * 0.2 * double(side)));
      translate(img, op == AugOp::TranslateX, shift);
      break;
    }
  }
  clamp01(img);
}

}  // namespace detail

/// Resize, optional stochastic augmentation, then normalization. Given the
/// same inputs and seed the result is identical; eval mode never consults
/// the seed.
template <typename Scalar>
Image<Scalar> preprocess(const Image<Scalar>& img, Index target_size, bool train_mode,
                         std::uint64_t seed, const AugmentPolicy& policy,
                         const Normalization<Scalar>& norm) {
  if (img.channels() == 0) throw DataError("empty image");
  if (norm.mean.size() != img.channels() || norm.stddev.size() != img.channels())
    throw DataError("normalization channel count does not match image");
  Image<Scalar> out = resize_bilinear(img, target_size, target_size);
  if (train_mode) {
    Rng rng(seed);
    if (rng.bernoulli(policy.flip_prob)) out = hflip(out);
    const double f = std::clamp(policy.magnitude / 30.0, 0.0, 1.0);
    for (int k = 0; k < policy.num_ops; ++k) {
      const auto op = kAugOps[std::size_t(rng.uniform_int(kAugOps.size()))];
      detail::apply_op(out, op, f, rng);
    }
  }
  for (Index c = 0; c < out.channels(); ++c) {
    auto& p = out.planes[std::size_t(c)];
    p = ((p.array() - norm.mean(c)) / norm.stddev(c)).matrix();
  }
  return out;
}

}  // namespace faceadapt
