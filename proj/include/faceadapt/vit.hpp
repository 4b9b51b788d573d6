// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm Vision Transformer with low-rank adapters on the attention q and
// v projections. The backbone is frozen; only adapters receive gradients, so
// the hand-written backward pass propagates activation gradients through
// every block but accumulates parameter gradients solely into adapters.
//
// Token matrices are row-per-token. Batched entry points stack the B per-
// image sequences vertically into a (B*T) x d matrix so the projections run
// as single GEMMs; attention itself loops per image and head.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "faceadapt/common.hpp"
#include "faceadapt/image.hpp"
#include "faceadapt/lora.hpp"

namespace faceadapt {

struct ViTConfig {
  Index image_size = 56;
  Index patch_size = 14;
  Index channels = 1;
  Index d_model = 192;
  Index n_heads = 3;
  Index n_layers = 4;
  double mlp_ratio = 4.0;

  void validate() const {
    if (image_size < 1 || patch_size < 1 || channels < 1 || d_model < 1 ||
        n_heads < 1 || n_layers < 1 || mlp_ratio <= 0)
      throw ConfigError("all ViT dimensions must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " is not divisible by n_heads " + std::to_string(n_heads));
  }

  Index grid() const { return image_size / patch_size; }
  Index n_patches() const { return grid() * grid(); }
  Index seq_len() const { return n_patches() + 1; }
  Index d_k() const { return d_model / n_heads; }
  Index patch_dim() const { return channels * patch_size * patch_size; }
  Index d_mlp() const { return Index(std::lround(mlp_ratio * double(d_model))); }
};

template <typename Scalar>
struct Linear {
  MatX<Scalar> W;  // out x in
  VecX<Scalar> b;  // out
};

template <typename Scalar>
struct LayerNormParams {
  VecX<Scalar> gamma;
  VecX<Scalar> beta;
};

inline constexpr double kLayerNormEps = 1e-6;

/// Row-wise layer norm. When xhat/inv are given they receive the normalized
/// rows and the 1/sqrt(var+eps) factors needed by the backward pass.
template <typename Scalar>
MatX<Scalar> layer_norm(const LayerNormParams<Scalar>& p, const MatX<Scalar>& X,
                        MatX<Scalar>* xhat_out = nullptr, VecX<Scalar>* inv_out = nullptr) {
  const Index n = X.rows(), d = X.cols();
  MatX<Scalar> xhat(n, d);
  VecX<Scalar> inv(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar mu = X.row(i).mean();
    const Scalar var = (X.row(i).array() - mu).square().sum() / Scalar(d);
    inv(i) = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    xhat.row(i) = (X.row(i).array() - mu) * inv(i);
  }
  MatX<Scalar> y = (xhat.array().rowwise() * p.gamma.transpose().array()).matrix();
  y.rowwise() += p.beta.transpose();
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_out) *inv_out = std::move(inv);
  return y;
}

/// Gradient through layer_norm w.r.t. its input (gamma/beta are frozen).
template <typename Scalar>
MatX<Scalar> layer_norm_backward(const LayerNormParams<Scalar>& p, const MatX<Scalar>& xhat,
                                 const VecX<Scalar>& inv, const MatX<Scalar>& dY) {
  const Index n = xhat.rows(), d = xhat.cols();
  MatX<Scalar> dX(n, d);
  for (Index i = 0; i < n; ++i) {
    const auto dxhat = (dY.row(i).array() * p.gamma.transpose().array()).eval();
    const Scalar s1 = dxhat.sum();
    const Scalar s2 = (dxhat * xhat.row(i).array()).sum();
    dX.row(i) =
        (inv(i) / Scalar(d)) * (Scalar(d) * dxhat - s1 - xhat.row(i).array() * s2);
  }
  return dX;
}

template <typename Scalar>
MatX<Scalar> gelu(const MatX<Scalar>& X) {
  const Scalar inv_sqrt2 = Scalar(1) / Scalar(std::sqrt(2.0));
  return X.unaryExpr([inv_sqrt2](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  });
}

/// Elementwise d gelu(x)/dx evaluated at the pre-activation.
template <typename Scalar>
MatX<Scalar> gelu_grad(const MatX<Scalar>& X) {
  const Scalar inv_sqrt2 = Scalar(1) / Scalar(std::sqrt(2.0));
  const Scalar inv_sqrt2pi = Scalar(1) / Scalar(std::sqrt(2.0 * 3.14159265358979323846));
  return X.unaryExpr([inv_sqrt2, inv_sqrt2pi](Scalar x) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2));
    const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * inv_sqrt2pi;
    return cdf + x * pdf;
  });
}

/// Softmax(Q Kᵀ / sqrt(d_k)) V for one head; rows attend over rows.
template <typename Scalar>
MatX<Scalar> attention_head(const MatX<Scalar>& Q, const MatX<Scalar>& K,
                            const MatX<Scalar>& V) {
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(Q.cols()));
  MatX<Scalar> S = (Q * K.transpose()) * scale;
  for (Index i = 0; i < S.rows(); ++i) {
    const Scalar m = S.row(i).maxCoeff();
    S.row(i) = (S.row(i).array() - m).exp();
    S.row(i) /= S.row(i).sum();
  }
  return S * V;
}

template <typename Scalar>
struct AttentionLayer {
  Linear<Scalar> q, k, v, o;
  std::vector<LoraAdapter<Scalar>> adapters_q, adapters_v;  // empty = unadapted
  bool per_head = false;
};

template <typename Scalar>
struct Block {
  LayerNormParams<Scalar> ln1, ln2;
  AttentionLayer<Scalar> attn;
  Linear<Scalar> fc1, fc2;
};

template <typename Scalar>
struct ViTBackbone {
  ViTConfig cfg;
  Linear<Scalar> patch_embed;  // d_model x patch_dim
  VecX<Scalar> cls_token;
  MatX<Scalar> pos_embed;      // seq_len x d_model
  std::vector<Block<Scalar>> blocks;
  LayerNormParams<Scalar> norm;

  bool has_adapters() const {
    for (const auto& blk : blocks)
      if (!blk.attn.adapters_q.empty() || !blk.attn.adapters_v.empty()) return true;
    return false;
  }

  template <typename Fn>  // Fn(block_idx, proj 'q'|'v', adapter_idx, LoraAdapter&)
  void for_each_adapter(Fn&& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      for (std::size_t a = 0; a < blocks[i].attn.adapters_q.size(); ++a)
        fn(Index(i), 'q', Index(a), blocks[i].attn.adapters_q[a]);
      for (std::size_t a = 0; a < blocks[i].attn.adapters_v.size(); ++a)
        fn(Index(i), 'v', Index(a), blocks[i].attn.adapters_v[a]);
    }
  }

  void zero_adapter_grads() {
    for_each_adapter([](Index, char, Index, LoraAdapter<Scalar>& ad) { ad.zero_grad(); });
  }

  Index adapter_parameter_count() const {
    Index n = 0;
    const_cast<ViTBackbone*>(this)->for_each_adapter(
        [&](Index, char, Index, LoraAdapter<Scalar>& ad) { n += ad.A.size() + ad.B.size(); });
    return n;
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Random frozen backbone. Every tensor draws from its own stream keyed by
/// its canonical name, so the layout is reproducible parameter by parameter.
template <typename Scalar>
ViTBackbone<Scalar> make_random_backbone(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ViTBackbone<Scalar> bb;
  bb.cfg = cfg;
  auto draw = [&](MatX<Scalar>& m, Index rows, Index cols, const std::string& name,
                  double stddev) {
    Rng rng(derive_seed(seed, "backbone:" + name));
    m.resize(rows, cols);
    fill_gaussian(m, rng, Scalar(stddev));
  };
  const double wstd = 1.0 / std::sqrt(double(cfg.d_model));
  draw(bb.patch_embed.W, cfg.d_model, cfg.patch_dim(), "patch_embed.weight",
       1.0 / std::sqrt(double(cfg.patch_dim())));
  bb.patch_embed.b = VecX<Scalar>::Zero(cfg.d_model);
  MatX<Scalar> tmp;
  draw(tmp, 1, cfg.d_model, "cls_token", 0.02);
  bb.cls_token = tmp.row(0).transpose();
  draw(bb.pos_embed, cfg.seq_len(), cfg.d_model, "pos_embed", 0.02);
  bb.blocks.resize(std::size_t(cfg.n_layers));
  for (Index i = 0; i < cfg.n_layers; ++i) {
    auto& blk = bb.blocks[std::size_t(i)];
    const std::string prefix = "blocks." + std::to_string(i) + ".";
    blk.ln1.gamma = VecX<Scalar>::Ones(cfg.d_model);
    blk.ln1.beta = VecX<Scalar>::Zero(cfg.d_model);
    blk.ln2 = blk.ln1;
    auto init_proj = [&](Linear<Scalar>& lin, const char* name) {
      draw(lin.W, cfg.d_model, cfg.d_model, prefix + name + ".weight", wstd);
      lin.b = VecX<Scalar>::Zero(cfg.d_model);
    };
    init_proj(blk.attn.q, "attn.q");
    init_proj(blk.attn.k, "attn.k");
    init_proj(blk.attn.v, "attn.v");
    init_proj(blk.attn.o, "attn.o");
    draw(blk.fc1.W, cfg.d_mlp(), cfg.d_model, prefix + "mlp.fc1.weight", wstd);
    blk.fc1.b = VecX<Scalar>::Zero(cfg.d_mlp());
    draw(blk.fc2.W, cfg.d_model, cfg.d_mlp(), prefix + "mlp.fc2.weight",
         1.0 / std::sqrt(double(cfg.d_mlp())));
    blk.fc2.b = VecX<Scalar>::Zero(cfg.d_model);
  }
  bb.norm.gamma = VecX<Scalar>::Ones(cfg.d_model);
  bb.norm.beta = VecX<Scalar>::Zero(cfg.d_model);
  return bb;
}

/// Attaches fresh adapters to the q and v projections of every block: one
/// fused d_model-wide adapter each by default, or one per head.
template <typename Scalar>
void attach_adapters(ViTBackbone<Scalar>& bb, Index rank, Scalar alpha, ScalingMode mode,
                     bool per_head, std::uint64_t seed) {
  const Index d = bb.cfg.d_model;
  const Index out = per_head ? bb.cfg.d_k() : d;
  const Index count = per_head ? bb.cfg.n_heads : 1;
  for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
    auto& attn = bb.blocks[i].attn;
    attn.per_head = per_head;
    attn.adapters_q.clear();
    attn.adapters_v.clear();
    for (Index a = 0; a < count; ++a) {
      const std::string base =
          "adapter:" + std::to_string(i) + ":" + std::to_string(a) + ":";
      attn.adapters_q.push_back(
          init_adapter<Scalar>(out, d, rank, alpha, mode, derive_seed(seed, base + "q")));
      attn.adapters_v.push_back(
          init_adapter<Scalar>(out, d, rank, alpha, mode, derive_seed(seed, base + "v")));
    }
  }
}

/// Copy of the backbone with every adapter folded into its projection weight
/// and the adapter structures dropped. Inference cost equals the plain model.
template <typename Scalar>
ViTBackbone<Scalar> merged_backbone(const ViTBackbone<Scalar>& bb) {
  ViTBackbone<Scalar> out = bb;
  for (auto& blk : out.blocks) {
    auto fold = [](Linear<Scalar>& lin, const std::vector<LoraAdapter<Scalar>>& ads) {
      for (std::size_t a = 0; a < ads.size(); ++a) {
        const Index off = Index(a) * ads[a].B.rows();
        lin.W.middleRows(off, ads[a].B.rows()).noalias() +=
            ads[a].scale() * ads[a].B * ads[a].A;
      }
    };
    fold(blk.attn.q, blk.attn.adapters_q);
    fold(blk.attn.v, blk.attn.adapters_v);
    blk.attn.adapters_q.clear();
    blk.attn.adapters_v.clear();
    blk.attn.per_head = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename Scalar>
struct BlockCache {
  MatX<Scalar> xhat1, ln1_out;
  VecX<Scalar> inv1;
  std::vector<MatX<Scalar>> Uq, Uv;  // one per adapter
  MatX<Scalar> Q, K, V;
  std::vector<MatX<Scalar>> P;       // batch*heads row-softmax matrices
  MatX<Scalar> xhat2;
  VecX<Scalar> inv2;
  MatX<Scalar> h;                    // pre-GELU activations
};

template <typename Scalar>
struct ForwardCache {
  Index batch = 0;
  std::vector<BlockCache<Scalar>> blocks;
  MatX<Scalar> xhatF;
  VecX<Scalar> invF;
};

namespace detail {

/// X W^T + b plus every adapter's contribution on its column slice.
template <typename Scalar>
MatX<Scalar> project_adapted(const Linear<Scalar>& lin,
                             const std::vector<LoraAdapter<Scalar>>& adapters,
                             const MatX<Scalar>& X, std::vector<MatX<Scalar>>* Us) {
  MatX<Scalar> Y = X * lin.W.transpose();
  Y.rowwise() += lin.b.transpose();
  if (Us) Us->clear();
  for (std::size_t a = 0; a < adapters.size(); ++a) {
    const auto& ad = adapters[a];
    const Index w = ad.B.rows();
    const Index off = Index(a) * w;
    MatX<Scalar> U = X * ad.A.transpose();
    Y.middleCols(off, w).noalias() += ad.scale() * (U * ad.B.transpose());
    if (Us) Us->push_back(std::move(U));
  }
  return Y;
}

/// Backward of project_adapted: accumulates adapter gradients and adds both
/// the frozen-weight and adapter terms of dX.
template <typename Scalar>
void project_adapted_backward(const Linear<Scalar>& lin,
                              std::vector<LoraAdapter<Scalar>>& adapters,
                              const MatX<Scalar>& X, const std::vector<MatX<Scalar>>& Us,
                              const MatX<Scalar>& dY, MatX<Scalar>& dX) {
  dX.noalias() += dY * lin.W;
  for (std::size_t a = 0; a < adapters.size(); ++a) {
    auto& ad = adapters[a];
    const Index w = ad.B.rows();
    const Index off = Index(a) * w;
    const auto dYs = dY.middleCols(off, w);
    const Scalar s = ad.scale();
    ad.gB.noalias() += s * (dYs.transpose() * Us[a]);
    MatX<Scalar> dU = s * (dYs * ad.B);
    ad.gA.noalias() += dU.transpose() * X;
    dX.noalias() += dU * ad.A;
  }
}

}  // namespace detail

/// Attention sub-layer on already-normalized tokens, batched. X is
/// (batch*seq) x d_model; per-image sequences are contiguous row groups.
template <typename Scalar>
MatX<Scalar> multi_head_attention(const AttentionLayer<Scalar>& attn, const MatX<Scalar>& X,
                                  Index batch, Index n_heads,
                                  BlockCache<Scalar>* cache = nullptr) {
  const Index d = attn.q.W.rows();
  const Index T = X.rows() / batch;
  const Index dk = d / n_heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dk));

  MatX<Scalar> Q = detail::project_adapted(attn.q, attn.adapters_q, X, cache ? &cache->Uq : nullptr);
  MatX<Scalar> K = X * attn.k.W.transpose();
  K.rowwise() += attn.k.b.transpose();
  MatX<Scalar> V = detail::project_adapted(attn.v, attn.adapters_v, X, cache ? &cache->Uv : nullptr);

  MatX<Scalar> O(X.rows(), d);
  if (cache) cache->P.clear();
  for (Index img = 0; img < batch; ++img) {
    const Index r0 = img * T;
    for (Index h = 0; h < n_heads; ++h) {
      const Index c0 = h * dk;
      MatX<Scalar> S = (Q.block(r0, c0, T, dk) * K.block(r0, c0, T, dk).transpose()) * scale;
      for (Index i = 0; i < T; ++i) {
        const Scalar m = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - m).exp();
        S.row(i) /= S.row(i).sum();
      }
      O.block(r0, c0, T, dk).noalias() = S * V.block(r0, c0, T, dk);
      if (cache) cache->P.push_back(std::move(S));
    }
  }
  if (cache) {
    cache->Q = std::move(Q);
    cache->K = std::move(K);
    cache->V = std::move(V);
  }
  MatX<Scalar> Y = O * attn.o.W.transpose();
  Y.rowwise() += attn.o.b.transpose();
  return Y;
}

/// Full backbone forward over stacked token sequences. Returns the CLS
/// embedding of each image as a batch x d_model matrix. Pass a cache to
/// enable a later backward_tokens call.
template <typename Scalar>
MatX<Scalar> forward_tokens(const ViTBackbone<Scalar>& bb, MatX<Scalar> X, Index batch,
                            ForwardCache<Scalar>* cache = nullptr) {
  const auto& cfg = bb.cfg;
  const Index T = cfg.seq_len();
  if (X.rows() != batch * T || X.cols() != cfg.d_model)
    throw DataError("token matrix shape does not match the backbone configuration");
  if (cache) {
    cache->batch = batch;
    cache->blocks.assign(std::size_t(cfg.n_layers), {});
  }
  for (Index l = 0; l < cfg.n_layers; ++l) {
    const auto& blk = bb.blocks[std::size_t(l)];
    BlockCache<Scalar>* bc = cache ? &cache->blocks[std::size_t(l)] : nullptr;
    MatX<Scalar> n1 = layer_norm(blk.ln1, X, bc ? &bc->xhat1 : nullptr, bc ? &bc->inv1 : nullptr);
    MatX<Scalar> a = multi_head_attention(blk.attn, n1, batch, cfg.n_heads, bc);
    if (bc) bc->ln1_out = std::move(n1);
    X += a;
    MatX<Scalar> n2 = layer_norm(blk.ln2, X, bc ? &bc->xhat2 : nullptr, bc ? &bc->inv2 : nullptr);
    MatX<Scalar> h = n2 * blk.fc1.W.transpose();
    h.rowwise() += blk.fc1.b.transpose();
    MatX<Scalar> m = gelu(h) * blk.fc2.W.transpose();
    m.rowwise() += blk.fc2.b.transpose();
    if (bc) bc->h = std::move(h);
    X += m;
  }
  MatX<Scalar> y = layer_norm(bb.norm, X, cache ? &cache->xhatF : nullptr,
                              cache ? &cache->invF : nullptr);
  MatX<Scalar> emb(batch, cfg.d_model);
  for (Index img = 0; img < batch; ++img) emb.row(img) = y.row(img * T);
  return emb;
}

/// Backward from embedding gradients into adapter gradients (accumulated).
template <typename Scalar>
void backward_tokens(ViTBackbone<Scalar>& bb, const ForwardCache<Scalar>& cache,
                     const MatX<Scalar>& dEmb) {
  const auto& cfg = bb.cfg;
  const Index T = cfg.seq_len();
  const Index batch = cache.batch;
  const Index dk = cfg.d_k();
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dk));

  MatX<Scalar> dY = MatX<Scalar>::Zero(batch * T, cfg.d_model);
  for (Index img = 0; img < batch; ++img) dY.row(img * T) = dEmb.row(img);
  MatX<Scalar> dX = layer_norm_backward(bb.norm, cache.xhatF, cache.invF, dY);

  for (Index l = cfg.n_layers - 1; l >= 0; --l) {
    auto& blk = bb.blocks[std::size_t(l)];
    const auto& bc = cache.blocks[std::size_t(l)];

    // MLP branch: dX covers x2 = x1 + MLP(LN2(x1)).
    MatX<Scalar> da = dX * blk.fc2.W;                       // grad at gelu output
    MatX<Scalar> dh = (da.array() * gelu_grad(bc.h).array()).matrix();
    MatX<Scalar> dn2 = dh * blk.fc1.W;
    dX += layer_norm_backward(blk.ln2, bc.xhat2, bc.inv2, dn2);

    // Attention branch: x1 = x0 + O(attn(LN1(x0))).
    MatX<Scalar> dO = dX * blk.attn.o.W;                    // grad at concat output
    MatX<Scalar> dQ = MatX<Scalar>::Zero(batch * T, cfg.d_model);
    MatX<Scalar> dK = dQ, dV = dQ;
    for (Index img = 0; img < batch; ++img) {
      const Index r0 = img * T;
      for (Index h = 0; h < cfg.n_heads; ++h) {
        const Index c0 = h * dk;
        const auto& P = bc.P[std::size_t(img * cfg.n_heads + h)];
        const auto dOh = dO.block(r0, c0, T, dk);
        const auto Vh = bc.V.block(r0, c0, T, dk);
        MatX<Scalar> dP = dOh * Vh.transpose();
        dV.block(r0, c0, T, dk).noalias() = P.transpose() * dOh;
        MatX<Scalar> dS(T, T);
        for (Index i = 0; i < T; ++i) {
          const Scalar dot = dP.row(i).dot(P.row(i));
          dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
        }
        dS *= scale;
        dQ.block(r0, c0, T, dk).noalias() = dS * bc.K.block(r0, c0, T, dk);
        dK.block(r0, c0, T, dk).noalias() = dS.transpose() * bc.Q.block(r0, c0, T, dk);
      }
    }
    MatX<Scalar> dn1 = MatX<Scalar>::Zero(batch * T, cfg.d_model);
    detail::project_adapted_backward(blk.attn.q, blk.attn.adapters_q, bc.ln1_out, bc.Uq, dQ, dn1);
    dn1.noalias() += dK * blk.attn.k.W;
    detail::project_adapted_backward(blk.attn.v, blk.attn.adapters_v, bc.ln1_out, bc.Uv, dV, dn1);
    dX += layer_norm_backward(blk.ln1, bc.xhat1, bc.inv1, dn1);
  }
}

// ---------------------------------------------------------------------------
// Image entry points
// ---------------------------------------------------------------------------

/// Patch tokens + CLS + positional embeddings for one preprocessed image.
/// Row 0 is the CLS token; patches follow in row-major grid order, each
/// flattened channel-major.
template <typename Scalar>
MatX<Scalar> patchify_and_embed(const ViTBackbone<Scalar>& bb, const Image<Scalar>& img) {
  const auto& cfg = bb.cfg;
  if (img.height() != cfg.image_size || img.width() != cfg.image_size)
    throw DataError("image is " + std::to_string(img.height()) + "x" +
                    std::to_string(img.width()) + " but the backbone expects " +
                    std::to_string(cfg.image_size));
  if (img.channels() != cfg.channels)
    throw DataError("image has " + std::to_string(img.channels()) +
                    " channels but the backbone expects " + std::to_string(cfg.channels));
  const Index g = cfg.grid(), ps = cfg.patch_size;
  MatX<Scalar> X(cfg.seq_len(), cfg.d_model);
  X.row(0) = bb.cls_token.transpose();
  VecX<Scalar> flat(cfg.patch_dim());
  for (Index py = 0; py < g; ++py)
    for (Index px = 0; px < g; ++px) {
      Index k = 0;
      for (Index c = 0; c < cfg.channels; ++c)
        for (Index y = 0; y < ps; ++y)
          for (Index x = 0; x < ps; ++x)
            flat(k++) = img.planes[std::size_t(c)](py * ps + y, px * ps + x);
      X.row(1 + py * g + px) = (bb.patch_embed.W * flat + bb.patch_embed.b).transpose();
    }
  X += bb.pos_embed;
  return X;
}

/// Stacks patchify_and_embed over a batch into a (batch*seq) x d matrix.
template <typename Scalar>
MatX<Scalar> embed_batch(const ViTBackbone<Scalar>& bb,
                         const std::vector<Image<Scalar>>& images) {
  const Index T = bb.cfg.seq_len();
  MatX<Scalar> X(Index(images.size()) * T, bb.cfg.d_model);
  for (std::size_t i = 0; i < images.size(); ++i)
    X.middleRows(Index(i) * T, T) = patchify_and_embed(bb, images[i]);
  return X;
}

/// CLS embedding for a single already-embedded token sequence.
template <typename Scalar>
VecX<Scalar> forward_from_tokens(const ViTBackbone<Scalar>& bb, const MatX<Scalar>& tokens) {
  return forward_tokens(bb, tokens, 1).row(0).transpose();
}

/// CLS embedding for one preprocessed image.
template <typename Scalar>
VecX<Scalar> extract_embedding(const ViTBackbone<Scalar>& bb, const Image<Scalar>& img) {
  return forward_from_tokens(bb, patchify_and_embed(bb, img));
}

}  // namespace faceadapt
