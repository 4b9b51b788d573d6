// SPDX-License-Identifier: Apache-2.0
// Fine-tuning loop: frozen backbone, trainable adapters + margin head,
// cosine-decayed decoupled-weight-decay Adam, per-epoch checkpoints.
//
// Checkpoint layout (one container file per epoch):
//   <block>.fused.<q|v>.<A|B>      adapter factors, width-wise adapters
//   <block>.head<h>.<q|v>.<A|B>    adapter factors, per-head adapters
//   head.weight, head.neck         margin-head parameters
//   opt.<key>.m / opt.<key>.v      Adam moments per trainable tensor
// Metadata carries the backbone fingerprint, schedule position and the
// adapter/head hyperparameters. It never records filesystem paths, so a
// checkpoint can move between machines with the data it was trained on.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "faceadapt/augment.hpp"
#include "faceadapt/container.hpp"
#include "faceadapt/image.hpp"
#include "faceadapt/loss.hpp"
#include "faceadapt/manifest.hpp"
#include "faceadapt/optimizer.hpp"
#include "faceadapt/vit.hpp"
#include "faceadapt/vit_io.hpp"

namespace faceadapt {

struct TrainConfig {
  Index epochs = 40;       // full-scale preset; desk runs pass smaller values
  Index batch_size = 512;  // full-scale default; desk presets drop this to 64
  double base_lr = 1e-4;
  double weight_decay = 0.05;
  double margin = 0.3;
  double scale = 64.0;
  Index rank = 16;
  double alpha = 16.0;
  ScalingMode mode = ScalingMode::RankStabilized;
  bool per_head = false;
  Index neck_dim = 0;
  double grad_clip = 0.0;  // global-norm clip, off unless positive
  std::uint64_t seed = 7;
  AugmentPolicy augment;
  std::vector<double> norm_mean = {0.5};
  std::vector<double> norm_std = {0.5};

  void validate() const {
    // epochs == 0 is allowed: it emits the initial checkpoint and stops.
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (base_lr <= 0) throw ConfigError("base_lr must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (grad_clip < 0) throw ConfigError("grad_clip must be non-negative");
    if (rank < 1) throw ConfigError("rank must be positive");
    if (alpha <= 0) throw ConfigError("alpha must be positive");
    if (margin < 0 || margin >= 1) throw ConfigError("margin must be in [0, 1)");
    if (scale <= 0) throw ConfigError("scale must be positive");
    if (neck_dim < 0) throw ConfigError("neck_dim must be non-negative");
    if (norm_mean.empty() || norm_mean.size() != norm_std.size())
      throw ConfigError("norm_mean and norm_std must be nonempty and equal length");
  }
};

struct TrainResult {
  std::vector<double> losses;  // one entry per optimization step
  std::vector<double> lrs;
  std::int64_t steps = 0;
  std::filesystem::path last_checkpoint;
};

inline std::string adapter_key(Index block, char proj, Index idx, bool per_head) {
  return std::to_string(block) + "." + (per_head ? "head" + std::to_string(idx) : "fused") +
         "." + proj + ".";
}

namespace detail {

inline std::string fmt_g(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", v);
  return b;
}

inline std::string meta_get(const Container& c, const std::string& key) {
  auto it = c.metadata.find(key);
  if (it == c.metadata.end()) throw DataError("checkpoint metadata missing '" + key + "'");
  return it->second;
}

template <typename Scalar>
Normalization<Scalar> build_norm(const TrainConfig& cfg, Index channels) {
  if (Index(cfg.norm_mean.size()) == channels) {
    Normalization<Scalar> n;
    n.mean.resize(channels);
    n.stddev.resize(channels);
    for (Index c = 0; c < channels; ++c) {
      n.mean(c) = Scalar(cfg.norm_mean[std::size_t(c)]);
      n.stddev(c) = Scalar(cfg.norm_std[std::size_t(c)]);
    }
    return n;
  }
  if (cfg.norm_mean.size() == 1)
    return Normalization<Scalar>::uniform(channels, Scalar(cfg.norm_mean[0]),
                                          Scalar(cfg.norm_std[0]));
  throw ConfigError("normalization lists have " + std::to_string(cfg.norm_mean.size()) +
                    " entries for " + std::to_string(channels) + " channels");
}

template <typename Scalar>
void check_adapter_layout(const ViTBackbone<Scalar>& bb, const TrainConfig& cfg) {
  const Index count = cfg.per_head ? bb.cfg.n_heads : 1;
  for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
    const auto& attn = bb.blocks[i].attn;
    if (Index(attn.adapters_q.size()) != count || Index(attn.adapters_v.size()) != count ||
        attn.per_head != cfg.per_head)
      throw ConfigError("block " + std::to_string(i) +
                        " does not carry the configured q/v adapters");
    for (const auto& ad : attn.adapters_q)
      if (ad.rank != cfg.rank || Scalar(cfg.alpha) != ad.alpha || ad.mode != cfg.mode)
        throw ConfigError("adapter hyperparameters disagree with the train config");
  }
}

}  // namespace detail

template <typename Scalar>
void register_trainables(AdamW<Scalar>& opt, ViTBackbone<Scalar>& bb,
                         CosFaceHead<Scalar>& head) {
  bb.for_each_adapter([&](Index blk, char proj, Index idx, LoraAdapter<Scalar>& ad) {
    const bool ph = bb.blocks[std::size_t(blk)].attn.per_head;
    const std::string base = adapter_key(blk, proj, idx, ph);
    opt.add(base + "A", ad.A, ad.gA);
    opt.add(base + "B", ad.B, ad.gB);
  });
  opt.add("head.weight", head.W, head.gW);
  if (head.has_neck()) opt.add("head.neck", head.neck, head.gneck);
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, ViTBackbone<Scalar>& bb,
                     const CosFaceHead<Scalar>& head, const AdamW<Scalar>& opt,
                     const TrainConfig& cfg, Index epoch, std::int64_t step,
                     std::int64_t total_steps) {
  Container c;
  bb.for_each_adapter([&](Index blk, char proj, Index idx, LoraAdapter<Scalar>& ad) {
    const bool ph = bb.blocks[std::size_t(blk)].attn.per_head;
    const std::string base = adapter_key(blk, proj, idx, ph);
    c.set_matrix(base + "A", ad.A);
    c.set_matrix(base + "B", ad.B);
  });
  c.set_matrix("head.weight", head.W);
  if (head.has_neck()) c.set_matrix("head.neck", head.neck);
  opt.save_state(c);

  c.metadata["fingerprint"] = backbone_fingerprint(bb);
  c.metadata["epoch"] = std::to_string(epoch);
  c.metadata["step"] = std::to_string(step);
  c.metadata["total_steps"] = std::to_string(total_steps);
  c.metadata["rank"] = std::to_string(cfg.rank);
  c.metadata["alpha"] = detail::fmt_g(cfg.alpha);
  c.metadata["mode"] = scaling_mode_name(cfg.mode);
  c.metadata["per_head"] = cfg.per_head ? "1" : "0";
  c.metadata["classes"] = std::to_string(head.num_classes());
  c.metadata["neck_dim"] = std::to_string(head.has_neck() ? head.neck.rows() : 0);
  c.metadata["epochs"] = std::to_string(cfg.epochs);
  c.metadata["batch_size"] = std::to_string(cfg.batch_size);
  c.metadata["base_lr"] = detail::fmt_g(cfg.base_lr);
  c.metadata["weight_decay"] = detail::fmt_g(cfg.weight_decay);
  c.metadata["margin"] = detail::fmt_g(cfg.margin);
  c.metadata["scale"] = detail::fmt_g(cfg.scale);
  c.metadata["seed"] = std::to_string(cfg.seed);
  c.save(path);
}

/// Loads adapter factors and head weights from a checkpoint into an
/// already-shaped backbone/head pair. Optimizer restore is optional.
template <typename Scalar>
void restore_checkpoint(const Container& c, ViTBackbone<Scalar>& bb, CosFaceHead<Scalar>& head,
                        AdamW<Scalar>* opt = nullptr) {
  const std::string fp = backbone_fingerprint(bb);
  const std::string want = detail::meta_get(c, "fingerprint");
  if (fp != want)
    throw DataError("checkpoint was written for a different backbone (fingerprint " + want +
                    ", ours " + fp + ")");
  bb.for_each_adapter([&](Index blk, char proj, Index idx, LoraAdapter<Scalar>& ad) {
    const bool ph = bb.blocks[std::size_t(blk)].attn.per_head;
    const std::string base = adapter_key(blk, proj, idx, ph);
    ad.A = c.matrix<Scalar>(base + "A");
    ad.B = c.matrix<Scalar>(base + "B");
    ad.zero_grad();
  });
  head.W = c.matrix<Scalar>("head.weight");
  if (c.has("head.neck"))
    head.neck = c.matrix<Scalar>("head.neck");
  else
    head.neck.resize(0, 0);
  head.gW = MatX<Scalar>::Zero(head.W.rows(), head.W.cols());
  head.gneck = MatX<Scalar>::Zero(head.neck.rows(), head.neck.cols());
  if (opt) opt->load_state(c, std::stoll(detail::meta_get(c, "step")));
}

inline void check_checkpoint_config(const Container& c, const TrainConfig& cfg) {
  if (std::stoll(detail::meta_get(c, "rank")) != cfg.rank ||
      std::stod(detail::meta_get(c, "alpha")) != cfg.alpha ||
      detail::meta_get(c, "mode") != scaling_mode_name(cfg.mode) ||
      (detail::meta_get(c, "per_head") == "1") != cfg.per_head)
    throw ConfigError("checkpoint adapter settings (rank " + detail::meta_get(c, "rank") +
                      ", alpha " + detail::meta_get(c, "alpha") + ", " +
                      detail::meta_get(c, "mode") +
                      ") do not match the requested configuration");
}

namespace detail {

template <typename Scalar>
TrainResult train_loop(ViTBackbone<Scalar>& bb, CosFaceHead<Scalar>& head,
                       const DatasetManifest& manifest, const TrainConfig& cfg,
                       const std::filesystem::path& out_dir, AdamW<Scalar>& opt,
                       Index start_epoch, std::int64_t start_step) {
  const Index n = Index(manifest.records.size());
  const Index steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = std::int64_t(cfg.epochs) * steps_per_epoch;
  const auto norm = build_norm<Scalar>(cfg, bb.cfg.channels);

  std::filesystem::create_directories(out_dir);
  const auto metrics_path = out_dir / "metrics.csv";
  std::ofstream metrics(metrics_path,
                        start_step == 0 ? std::ios::trunc : std::ios::app);
  if (!metrics) throw DataError("cannot write '" + metrics_path.string() + "'");
  if (start_step == 0) metrics << "step,epoch,lr,loss\n";

  auto checkpoint_name = [&](Index epoch) {
    char b[48];
    std::snprintf(b, sizeof b, "checkpoint-epoch-%04lld.st", (long long)epoch);
    return out_dir / b;
  };

  TrainResult result;
  result.steps = start_step;
  if (start_epoch == 0) {
    save_checkpoint(checkpoint_name(0), bb, head, opt, cfg, 0, 0, total_steps);
    result.last_checkpoint = checkpoint_name(0);
  }

  const std::uint64_t order_seed = derive_seed(cfg.seed, "epoch-order");
  const std::uint64_t aug_seed = derive_seed(cfg.seed, "augment");
  std::int64_t step = start_step;

  for (Index epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(order_seed, std::uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    for (Index b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const Index bs = std::min(cfg.batch_size, n - b0);
      std::vector<Image<Scalar>> batch;
      batch.reserve(std::size_t(bs));
      std::vector<Index> labels;
      labels.reserve(std::size_t(bs));
      for (Index k = 0; k < bs; ++k) {
        const auto& rec = manifest.records[order[std::size_t(b0 + k)]];
        Image<Scalar> img = load_image<Scalar>(rec.path);
        const std::uint64_t s =
            mix_seed(mix_seed(aug_seed, std::uint64_t(epoch)), std::uint64_t(b0 + k));
        batch.push_back(preprocess(img, bb.cfg.image_size, true, s, cfg.augment, norm));
        labels.push_back(manifest.class_index.at(rec.identity));
      }

      bb.zero_adapter_grads();
      head.zero_grad();
      ForwardCache<Scalar> cache;
      MatX<Scalar> E = forward_tokens(bb, embed_batch(bb, batch), bs, &cache);
      MatX<Scalar> dE;
      const double loss = double(cosface_loss_backward(head, E, labels, dE));
      if (!std::isfinite(loss))
        throw DataError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                        std::to_string(epoch) + "); try a lower base_lr or gradient clipping");
      backward_tokens(bb, cache, dE);
      if (cfg.grad_clip > 0) opt.clip_gradients(Scalar(cfg.grad_clip));

      const double lr = cosine_lr(step, total_steps, cfg.base_lr);
      opt.step(lr);

      metrics << step << "," << epoch << "," << fmt_g(lr) << "," << fmt_g(loss) << "\n";
      result.losses.push_back(loss);
      result.lrs.push_back(lr);
      ++step;
    }
    metrics.flush();
    save_checkpoint(checkpoint_name(epoch + 1), bb, head, opt, cfg, epoch + 1, step,
                    total_steps);
    result.last_checkpoint = checkpoint_name(epoch + 1);
  }
  result.steps = step;
  return result;
}

}  // namespace detail

/// Trains adapters + head against the manifest. The backbone's base weights
/// are read-only throughout; only adapter factors and the head move.
template <typename Scalar>
TrainResult finetune(ViTBackbone<Scalar>& bb, CosFaceHead<Scalar>& head,
                     const DatasetManifest& manifest, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir) {
  cfg.validate();
  if (manifest.records.empty()) throw DataError("training manifest is empty");
  detail::check_adapter_layout(bb, cfg);
  if (head.num_classes() != manifest.num_classes())
    throw ConfigError("head covers " + std::to_string(head.num_classes()) +
                      " classes but the manifest has " +
                      std::to_string(manifest.num_classes()));
  AdamW<Scalar> opt(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  register_trainables(opt, bb, head);
  return detail::train_loop(bb, head, manifest, cfg, out_dir, opt, 0, 0);
}

/// Continues a run from a per-epoch checkpoint. Step-for-step identical to
/// the uninterrupted run: schedule position, sample order and augmentation
/// seeds are all pure functions of (seed, epoch, position).
template <typename Scalar>
TrainResult resume(const std::filesystem::path& checkpoint, ViTBackbone<Scalar>& bb,
                   CosFaceHead<Scalar>& head, const DatasetManifest& manifest,
                   const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  if (manifest.records.empty()) throw DataError("training manifest is empty");
  detail::check_adapter_layout(bb, cfg);
  const Container c = Container::load(checkpoint);
  check_checkpoint_config(c, cfg);
  if (std::stoll(detail::meta_get(c, "classes")) != head.num_classes())
    throw ConfigError("checkpoint head has " + detail::meta_get(c, "classes") +
                      " classes, ours has " + std::to_string(head.num_classes()));
  AdamW<Scalar> opt(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  register_trainables(opt, bb, head);
  restore_checkpoint(c, bb, head, &opt);
  const Index start_epoch = Index(std::stoll(detail::meta_get(c, "epoch")));
  const std::int64_t start_step = std::stoll(detail::meta_get(c, "step"));
  return detail::train_loop(bb, head, manifest, cfg, out_dir, opt, start_epoch, start_step);
}

/// Copy of `base` with the checkpoint's adapters attached and restored —
/// the backbone exactly as the training run last saw it.
template <typename Scalar>
ViTBackbone<Scalar> adapted_backbone(const Container& c, const ViTBackbone<Scalar>& base) {
  ViTBackbone<Scalar> bb = base;
  attach_adapters(bb, Index(std::stoll(detail::meta_get(c, "rank"))),
                  Scalar(std::stod(detail::meta_get(c, "alpha"))),
                  parse_scaling_mode(detail::meta_get(c, "mode")),
                  detail::meta_get(c, "per_head") == "1", 0);
  CosFaceHead<Scalar> head;  // throwaway: restore needs one to fill
  head.W = MatX<Scalar>::Zero(2, 2);
  head.gW = head.W;
  restore_checkpoint(c, bb, head);
  return bb;
}

template <typename Scalar>
ViTBackbone<Scalar> adapted_backbone(const std::filesystem::path& checkpoint,
                                     const ViTBackbone<Scalar>& base) {
  return adapted_backbone(Container::load(checkpoint), base);
}

/// Standalone backbone with the checkpoint's adapters folded in. The result
/// carries no adapter structures and matches adapter-mode inference.
template <typename Scalar>
ViTBackbone<Scalar> export_merged(const std::filesystem::path& checkpoint,
                                  const ViTBackbone<Scalar>& base) {
  return merged_backbone(adapted_backbone(Container::load(checkpoint), base));
}

}  // namespace faceadapt
