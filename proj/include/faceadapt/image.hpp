// SPDX-License-Identifier: Apache-2.0
//
// Planar images and the small amount of raster IO the toolkit needs. Images
// are kept as per-channel matrices with values in [0, 1]; files are 8-bit
// binary PGM (single channel) or PPM (three channels).
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"

namespace faceadapt {

template <typename Scalar>
struct Image {
  std::vector<MatX<Scalar>> planes;  // each height x width

  Index channels() const { return Index(planes.size()); }
  Index height() const { return planes.empty() ? 0 : planes[0].rows(); }
  Index width() const { return planes.empty() ? 0 : planes[0].cols(); }

  static Image zero(Index c, Index h, Index w) {
    Image img;
    img.planes.assign(std::size_t(c), MatX<Scalar>::Zero(h, w));
    return img;
  }
};

namespace detail {

inline int next_pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one unsigned decimal.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) return -1;
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace detail

/// Reads a binary PGM (P5) or PPM (P6) file into [0, 1] planes.
template <typename Scalar = float>
Image<Scalar> load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path.string() + "'");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  int channels = 0;
  if (magic[0] == 'P' && magic[1] == '5') channels = 1;
  else if (magic[0] == 'P' && magic[1] == '6') channels = 3;
  else throw DataError("'" + path.string() + "' is not a binary PGM/PPM file");

  const int w = detail::next_pnm_token(in);
  const int h = detail::next_pnm_token(in);
  const int maxval = detail::next_pnm_token(in);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw DataError("unsupported PNM geometry or depth in '" + path.string() + "'");
  // Header ends with exactly one whitespace byte (already consumed by the
  // token reader), then raw samples follow row by row, channels interleaved.
  std::vector<unsigned char> raw(std::size_t(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (!in) throw DataError("truncated pixel data in '" + path.string() + "'");

  Image<Scalar> img = Image<Scalar>::zero(channels, h, w);
  std::size_t idx = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.planes[c](y, x) = Scalar(raw[idx++]) / Scalar(255);
  return img;
}

/// Writes 8-bit PGM for one plane, PPM for three. Values clamped to [0, 1].
template <typename Scalar>
void save_image(const std::filesystem::path& path, const Image<Scalar>& img) {
  const Index c = img.channels();
  if (c != 1 && c != 3) throw DataError("only 1- or 3-channel images can be saved");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << (c == 1 ? "P5" : "P6") << "\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<unsigned char> raw;
  raw.reserve(std::size_t(img.width()) * img.height() * c);
  for (Index y = 0; y < img.height(); ++y)
    for (Index x = 0; x < img.width(); ++x)
      for (Index ch = 0; ch < c; ++ch) {
        const double v = std::clamp(double(img.planes[ch](y, x)), 0.0, 1.0);
        raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
  out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

/// Bilinear resampling with half-pixel-centred coordinates.
template <typename Scalar>
Image<Scalar> resize_bilinear(const Image<Scalar>& src, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw DataError("resize target must be positive");
  if (src.height() == out_h && src.width() == out_w) return src;
  const double sy = double(src.height()) / double(out_h);
  const double sx = double(src.width()) / double(out_w);
  Image<Scalar> dst = Image<Scalar>::zero(src.channels(), out_h, out_w);
  for (Index y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(src.height() - 1));
    const Index y0 = Index(fy);
    const Index y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - double(y0);
    for (Index x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(src.width() - 1));
      const Index x0 = Index(fx);
      const Index x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - double(x0);
      for (Index c = 0; c < src.channels(); ++c) {
        const auto& p = src.planes[std::size_t(c)];
        const double top = (1.0 - wx) * p(y0, x0) + wx * p(y0, x1);
        const double bot = (1.0 - wx) * p(y1, x0) + wx * p(y1, x1);
        dst.planes[std::size_t(c)](y, x) = Scalar((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return dst;
}

template <typename Scalar>
Image<Scalar> hflip(const Image<Scalar>& src) {
  Image<Scalar> dst = src;
  for (auto& p : dst.planes) p = p.rowwise().reverse().eval();
  return dst;
}

}  // namespace faceadapt
