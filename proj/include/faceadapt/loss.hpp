// SPDX-License-Identifier: Apache-2.0
//
// CosFace margin-penalty classification head. Class weights and embeddings
// are L2-normalized, the target cosine is reduced by the margin m, and all
// logits are multiplied by the scale s before cross-entropy. The head only
// exists during training; merged exports never carry it.
//
// An optional linear neck (projection applied before normalization) can be
// enabled; it is part of the discarded classification stage, so verification
// embeddings always come straight from the backbone.
#pragma once

#include <cmath>
#include <vector>

#include "faceadapt/common.hpp"

namespace faceadapt {

inline constexpr double kNormEps = 1e-12;

template <typename Scalar>
struct CosFaceHead {
  MatX<Scalar> W;     // classes x feature dim
  MatX<Scalar> neck;  // 0 x 0 when disabled, else neck_dim x d_model
  Scalar margin = Scalar(0.3);
  Scalar scale = Scalar(64);
  MatX<Scalar> gW;
  MatX<Scalar> gneck;

  bool has_neck() const { return neck.size() > 0; }
  Index num_classes() const { return W.rows(); }

  void zero_grad() {
    gW.setZero();
    if (has_neck()) gneck.setZero();
  }
};

/// Head over `classes` classes for d_model-dim embeddings. neck_dim 0 keeps
/// the default direct head; a positive neck_dim inserts the linear neck.
template <typename Scalar>
CosFaceHead<Scalar> init_head(Index classes, Index d_model, Scalar margin, Scalar scale,
                              std::uint64_t seed, Index neck_dim = 0) {
  if (classes < 2) throw ConfigError("CosFace head needs at least 2 classes");
  if (margin < 0 || margin >= 1) throw ConfigError("margin must lie in [0, 1)");
  if (scale <= 0) throw ConfigError("scale must be positive");
  CosFaceHead<Scalar> head;
  head.margin = margin;
  head.scale = scale;
  const Index dim = neck_dim > 0 ? neck_dim : d_model;
  Rng wrng(derive_seed(seed, "head:weights"));
  head.W.resize(classes, dim);
  fill_gaussian(head.W, wrng, Scalar(1.0 / std::sqrt(double(dim))));
  if (neck_dim > 0) {
    Rng nrng(derive_seed(seed, "head:neck"));
    head.neck.resize(neck_dim, d_model);
    fill_gaussian(head.neck, nrng, Scalar(1.0 / std::sqrt(double(d_model))));
    head.gneck = MatX<Scalar>::Zero(neck_dim, d_model);
  }
  head.gW = MatX<Scalar>::Zero(classes, dim);
  return head;
}

namespace detail {

template <typename Scalar>
VecX<Scalar> l2_normalize(const VecX<Scalar>& v, Scalar* norm_out = nullptr) {
  const Scalar n = std::max(v.norm(), Scalar(kNormEps));
  if (norm_out) *norm_out = n;
  return v / n;
}

}  // namespace detail

/// Penalized logits for one embedding: s*(cos(theta_y) - m) at the label,
/// s*cos(theta_j) elsewhere.
template <typename Scalar>
VecX<Scalar> cosface_logits(const CosFaceHead<Scalar>& head, const VecX<Scalar>& embedding,
                            Index label) {
  if (label < 0 || label >= head.num_classes())
    throw DataError("label " + std::to_string(label) + " outside 0.." +
                    std::to_string(head.num_classes() - 1));
  VecX<Scalar> z = head.has_neck() ? VecX<Scalar>(head.neck * embedding) : embedding;
  if (z.norm() == Scalar(0)) throw DataError("zero-norm embedding cannot be scored");
  const VecX<Scalar> zhat = detail::l2_normalize(z);
  VecX<Scalar> logits(head.num_classes());
  for (Index c = 0; c < head.num_classes(); ++c) {
    const VecX<Scalar> what = detail::l2_normalize(VecX<Scalar>(head.W.row(c).transpose()));
    logits(c) = what.dot(zhat);
  }
  logits(label) -= head.margin;
  return logits * head.scale;
}

/// Mean cross-entropy of cosface logits over a batch (embeddings row-wise).
template <typename Scalar>
Scalar cosface_loss(const CosFaceHead<Scalar>& head, const MatX<Scalar>& embeddings,
                    const std::vector<Index>& labels) {
  if (embeddings.rows() == 0) throw DataError("empty batch");
  if (Index(labels.size()) != embeddings.rows())
    throw DataError("label count does not match batch size");
  Scalar total = 0;
  for (Index i = 0; i < embeddings.rows(); ++i) {
    VecX<Scalar> logits =
        cosface_logits(head, VecX<Scalar>(embeddings.row(i).transpose()), labels[i]);
    const Scalar m = logits.maxCoeff();
    const Scalar lse = m + std::log((logits.array() - m).exp().sum());
    total += lse - logits(labels[i]);
  }
  return total / Scalar(embeddings.rows());
}

/// Loss plus gradients: accumulates into head.gW (and head.gneck), returns
/// d loss / d embeddings for the backbone backward pass.
template <typename Scalar>
Scalar cosface_loss_backward(CosFaceHead<Scalar>& head, const MatX<Scalar>& embeddings,
                             const std::vector<Index>& labels, MatX<Scalar>& dEmb) {
  const Index B = embeddings.rows();
  if (B == 0) throw DataError("empty batch");
  if (Index(labels.size()) != B) throw DataError("label count does not match batch size");
  const Index C = head.num_classes();

  // Normalized class weights and their norms, shared across the batch.
  MatX<Scalar> What(C, head.W.cols());
  VecX<Scalar> wnorm(C);
  for (Index c = 0; c < C; ++c) {
    wnorm(c) = std::max(head.W.row(c).norm(), Scalar(kNormEps));
    What.row(c) = head.W.row(c) / wnorm(c);
  }

  dEmb.setZero(B, embeddings.cols());
  Scalar total = 0;
  for (Index i = 0; i < B; ++i) {
    const Index y = labels[i];
    if (y < 0 || y >= C)
      throw DataError("label " + std::to_string(y) + " outside 0.." + std::to_string(C - 1));
    const VecX<Scalar> e = embeddings.row(i).transpose();
    const VecX<Scalar> z = head.has_neck() ? VecX<Scalar>(head.neck * e) : e;
    Scalar znorm;
    const VecX<Scalar> zhat = detail::l2_normalize(z, &znorm);

    VecX<Scalar> cos = What * zhat;
    VecX<Scalar> logits = cos * head.scale;
    logits(y) -= head.scale * head.margin;

    const Scalar mx = logits.maxCoeff();
    VecX<Scalar> p = (logits.array() - mx).exp();
    const Scalar z_sum = p.sum();
    p /= z_sum;
    total += mx + std::log(z_sum) - logits(y);

    VecX<Scalar> dlogits = p / Scalar(B);
    dlogits(y) -= Scalar(1) / Scalar(B);
    const VecX<Scalar> dcos = dlogits * head.scale;

    // Through the weight normalization, per class.
    for (Index c = 0; c < C; ++c) {
      if (dcos(c) == Scalar(0)) continue;
      const VecX<Scalar> dwhat = dcos(c) * zhat;
      head.gW.row(c) +=
          ((dwhat - What.row(c).transpose() * What.row(c).dot(dwhat)) / wnorm(c)).transpose();
    }
    // Through the embedding normalization.
    const VecX<Scalar> dzhat = What.transpose() * dcos;
    const VecX<Scalar> dz = (dzhat - zhat * zhat.dot(dzhat)) / znorm;
    if (head.has_neck()) {
      head.gneck.noalias() += dz * e.transpose();
      dEmb.row(i) = (head.neck.transpose() * dz).transpose();
    } else {
      dEmb.row(i) = dz.transpose();
    }
  }
  return total / Scalar(B);
}

}  // namespace faceadapt
