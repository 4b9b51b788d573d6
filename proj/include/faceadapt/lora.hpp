// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters for frozen linear layers. An adapter holds A (r x in) and
// B (out x r); the adapted layer computes y = W0 x + b + scale * B (A x) with
// W0 frozen. B starts at zero so a freshly attached adapter is an identity
// change, and merging folds scale * B * A back into a plain weight matrix.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"

namespace faceadapt {

enum class ScalingMode { Standard, RankStabilized };

inline const char* scaling_mode_name(ScalingMode m) {
  return m == ScalingMode::Standard ? "standard" : "rank_stabilized";
}

inline ScalingMode parse_scaling_mode(const std::string& s) {
  if (s == "standard") return ScalingMode::Standard;
  if (s == "rank_stabilized" || s == "rslora") return ScalingMode::RankStabilized;
  throw ConfigError("unknown scaling mode '" + s + "'");
}

template <typename Scalar>
struct LoraAdapter {
  MatX<Scalar> A;  // rank x in
  MatX<Scalar> B;  // out x rank
  MatX<Scalar> gA;
  MatX<Scalar> gB;
  Index rank = 0;
  Scalar alpha = 0;
  ScalingMode mode = ScalingMode::RankStabilized;

  Scalar scale() const {
    if (mode == ScalingMode::Standard) return alpha / Scalar(rank);
    return alpha / Scalar(std::sqrt(double(rank)));
  }

  void zero_grad() {
    gA.setZero();
    gB.setZero();
  }
};

/// A starts from N(0, 1/in) entries, B from zeros, so the initial update
/// B * A is exactly zero. Ranks above min(out, in) are rejected; ranks above
/// half that no longer save parameters and only draw a warning.
template <typename Scalar>
LoraAdapter<Scalar> init_adapter(Index out, Index in, Index rank, Scalar alpha,
                                 ScalingMode mode, Rng& rng) {
  if (rank < 1) throw ConfigError("adapter rank must be at least 1");
  const Index full = std::min(out, in);
  if (rank > full)
    throw ConfigError("adapter rank " + std::to_string(rank) +
                      " exceeds min(out, in) = " + std::to_string(full));
  if (rank > full / 2)
    warn("adapter rank " + std::to_string(rank) + " exceeds min(out, in)/2 = " +
         std::to_string(full / 2) + "; no parameter savings over a dense update");
  LoraAdapter<Scalar> ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.mode = mode;
  ad.A.resize(rank, in);
  fill_gaussian(ad.A, rng, Scalar(1.0 / std::sqrt(double(in))));
  ad.B = MatX<Scalar>::Zero(out, rank);
  ad.gA = MatX<Scalar>::Zero(rank, in);
  ad.gB = MatX<Scalar>::Zero(out, rank);
  return ad;
}

template <typename Scalar>
LoraAdapter<Scalar> init_adapter(Index out, Index in, Index rank, Scalar alpha,
                                 ScalingMode mode, std::uint64_t seed) {
  Rng rng(seed);
  return init_adapter<Scalar>(out, in, rank, alpha, mode, rng);
}

/// y = W0 x + b + scale * B (A x), one column vector.
template <typename Scalar>
VecX<Scalar> adapter_forward(const MatX<Scalar>& W0, const VecX<Scalar>& b,
                             const LoraAdapter<Scalar>& ad, const VecX<Scalar>& x) {
  VecX<Scalar> y = W0 * x + b;
  y.noalias() += ad.scale() * (ad.B * (ad.A * x));
  return y;
}

/// Batched rows: X is n x in, result n x out. U = X * A^T (n x rank) is
/// returned through `U` for reuse in the backward pass.
template <typename Scalar>
MatX<Scalar> adapter_forward_batch(const MatX<Scalar>& W0, const VecX<Scalar>& b,
                                   const LoraAdapter<Scalar>& ad, const MatX<Scalar>& X,
                                   MatX<Scalar>& U) {
  U.noalias() = X * ad.A.transpose();
  MatX<Scalar> Y = X * W0.transpose();
  Y.rowwise() += b.transpose();
  Y.noalias() += ad.scale() * (U * ad.B.transpose());
  return Y;
}

/// Accumulates adapter gradients from dY (n x out) and returns dX (n x in).
/// X and U must be the values from adapter_forward_batch.
template <typename Scalar>
MatX<Scalar> adapter_backward_batch(const MatX<Scalar>& W0, LoraAdapter<Scalar>& ad,
                                    const MatX<Scalar>& X, const MatX<Scalar>& U,
                                    const MatX<Scalar>& dY) {
  const Scalar s = ad.scale();
  ad.gB.noalias() += s * (dY.transpose() * U);
  MatX<Scalar> dU = s * (dY * ad.B);
  ad.gA.noalias() += dU.transpose() * X;
  MatX<Scalar> dX = dY * W0;
  dX.noalias() += dU * ad.A;
  return dX;
}

/// W0 + scale * B * A, leaving the adapter untouched.
template <typename Scalar>
MatX<Scalar> merge_adapter(const MatX<Scalar>& W0, const LoraAdapter<Scalar>& ad) {
  return W0 + ad.scale() * (ad.B * ad.A);
}

}  // namespace faceadapt
