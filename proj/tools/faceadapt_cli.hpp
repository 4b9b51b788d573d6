// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. Every run resolves one RunConfig (file + flag
// overrides, flags win), writes the resolved snapshot before any other
// output, and keeps all writes inside its output location. Exit codes:
// 0 success, 1 runtime failure, 2 bad configuration or usage.

#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "faceadapt/evaluate.hpp"
#include "faceadapt/runconfig.hpp"
#include "faceadapt/synthetic.hpp"
#include "faceadapt/trainer.hpp"
#include "faceadapt/vit_io.hpp"

namespace faceadapt::cli {

namespace detail {

// Relative outputs land under FACEADAPT_RUN_ROOT when it is set.
inline std::filesystem::path resolve_out(const std::string& out) {
  if (out.empty())
    throw ConfigError("an output location is required (--out or config key 'out')");
  std::filesystem::path p(out);
  if (p.is_relative())
    if (const char* root = std::getenv("FACEADAPT_RUN_ROOT"); root && *root)
      p = std::filesystem::path(root) / p;
  return p;
}

inline void write_snapshot(const RunConfig& rc, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write '" + file.string() + "'");
  out << resolved_run_config(rc).dump(2) << "\n";
}

// Table-style rounding: half away from zero at 2 decimals, with a nudge so
// binary noise right at the .xx5 boundary (78.565 stored as 78.56499...9)
// still rounds the way the decimal value would.
inline double half_up2(double x) { return std::floor(x * 100.0 + 0.5 + 1e-9) / 100.0; }

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

struct Opts {
  std::string config, manifest, protocol, checkpoint, base, out, mode, resume;
  std::string accuracies, group_names;
  std::int64_t epochs = 0, batch = 0, rank = 0, neck = 0, width = 0;
  std::int64_t identities = 0, per_id = 0, size = 0, groups = 0, pairs = 0;
  double lr = 0, wd = 0, margin = 0, scale = 0, alpha = 0, clip = 0, noise = 0;
  std::uint64_t seed = 7;
  bool per_head = false, print_config = false;
};

inline RunConfig base_config(const Opts& o) {
  return o.config.empty() ? parse_run_config(nlohmann::json::object())
                          : load_run_config(o.config);
}

// --seed names the global seed, so derived module seeds follow it again.
inline void override_seed(RunConfig& rc, std::uint64_t seed) {
  rc.train.seed = seed;
  rc.subset.seed = derive_seed(seed, "subset");
  rc.synth.seed = derive_seed(seed, "synth");
}

inline void maybe_print(const RunConfig& rc, bool wanted) {
  if (wanted) std::printf("%s\n", resolved_run_config(rc).dump(2).c_str());
}

inline int cmd_train(const CLI::App& sub, Opts& o) {
  RunConfig rc = base_config(o);
  rc.command = "train";
  if (sub.count("--manifest")) rc.manifest = o.manifest;
  if (sub.count("--out")) rc.out = o.out;
  if (sub.count("--epochs")) rc.train.epochs = Index(o.epochs);
  if (sub.count("--batch")) rc.train.batch_size = Index(o.batch);
  if (sub.count("--lr")) rc.train.base_lr = o.lr;
  if (sub.count("--wd")) rc.train.weight_decay = o.wd;
  if (sub.count("--margin")) rc.train.margin = o.margin;
  if (sub.count("--scale")) rc.train.scale = o.scale;
  if (sub.count("--rank")) rc.train.rank = Index(o.rank);
  if (sub.count("--alpha")) rc.train.alpha = o.alpha;
  if (sub.count("--mode")) rc.train.mode = parse_scaling_mode(o.mode);
  if (sub.count("--per-head")) rc.train.per_head = true;
  if (sub.count("--neck")) rc.train.neck_dim = Index(o.neck);
  if (sub.count("--clip")) rc.train.grad_clip = o.clip;
  if (sub.count("--seed")) override_seed(rc, o.seed);
  if (sub.count("--width")) rc.subset.n = Index(o.width);
  if (sub.count("--resume")) rc.checkpoint = o.resume;
  rc.vit.validate();
  rc.train.validate();
  if (rc.manifest.empty())
    throw ConfigError("train needs a manifest (--manifest or config key 'manifest')");

  const auto out = resolve_out(rc.out);
  rc.out = out.string();
  auto manifest = DatasetManifest::load(rc.manifest);
  if (rc.subset.n > 0) manifest = subset(manifest, rc.subset);

  ViTBackbone<float> bb;
  const bool fresh = rc.base_model.empty();
  if (fresh) {
    bb = make_random_backbone<float>(rc.vit, derive_seed(rc.train.seed, "backbone"));
    rc.base_model = (out / "base-model.st").string();
  } else {
    bb = load_backbone<float>(rc.base_model);
    rc.vit = bb.cfg;
  }
  maybe_print(rc, o.print_config);
  write_snapshot(rc, out / "config.json");
  if (fresh) save_backbone(bb, out / "base-model.st");

  attach_adapters(bb, rc.train.rank, float(rc.train.alpha), rc.train.mode,
                  rc.train.per_head, derive_seed(rc.train.seed, "adapters"));
  auto head = init_head<float>(manifest.num_classes(), bb.cfg.d_model,
                               float(rc.train.margin), float(rc.train.scale),
                               derive_seed(rc.train.seed, "head"), rc.train.neck_dim);
  const TrainResult res =
      rc.checkpoint.empty() ? finetune(bb, head, manifest, rc.train, out)
                            : resume(rc.checkpoint, bb, head, manifest, rc.train, out);
  std::printf("trained %lld steps on %zu images (%lld classes)\n",
              (long long)res.steps, manifest.records.size(),
              (long long)manifest.num_classes());
  if (!res.losses.empty())
    std::printf("loss %.6f -> %.6f\n", res.losses.front(), res.losses.back());
  std::printf("last checkpoint %s\n", res.last_checkpoint.string().c_str());
  return 0;
}

inline int cmd_evaluate(const CLI::App& sub, Opts& o) {
  RunConfig rc = base_config(o);
  rc.command = "evaluate";
  if (sub.count("--base")) rc.base_model = o.base;
  if (sub.count("--checkpoint")) rc.checkpoint = o.checkpoint;
  if (sub.count("--protocol")) rc.protocol = o.protocol;
  if (sub.count("--out")) rc.out = o.out;
  if (rc.base_model.empty())
    throw ConfigError("evaluate needs a base model (--base or config key 'base_model')");
  if (rc.protocol.empty())
    throw ConfigError("evaluate needs a pair protocol (--protocol or config key 'protocol')");

  const auto out = resolve_out(rc.out);
  rc.out = out.string();
  auto bb = load_backbone<float>(rc.base_model);
  rc.vit = bb.cfg;
  if (!rc.checkpoint.empty()) bb = adapted_backbone(std::filesystem::path(rc.checkpoint), bb);
  maybe_print(rc, o.print_config);
  write_snapshot(rc, out / "config.json");

  std::vector<EvalBenchmark> bms;
  for (const auto& file : split_csv(rc.protocol)) {
    if (file.empty()) throw ConfigError("empty protocol path in '" + rc.protocol + "'");
    EvalBenchmark bm;
    bm.name = std::filesystem::path(file).stem().string();
    bm.protocol = PairProtocol::load(file);
    bms.push_back(std::move(bm));
  }
  EvalOptions<float> opts;
  opts.far_targets = rc.far_targets;
  opts.norm = faceadapt::detail::build_norm<float>(rc.train, bb.cfg.channels);
  const auto report = evaluate(bb, bms, opts);
  write_report(report, out);

  for (const auto& b : report.benchmarks)
    std::printf("%s accuracy %.2f\n", b.name.c_str(), half_up2(b.tenfold.accuracy));
  if (report.bias) {
    std::printf("bias average %.2f std %.2f ", half_up2(report.bias->average),
                half_up2(report.bias->std_dev));
    if (report.bias->ser_infinite) std::printf("ser inf\n");
    else std::printf("ser %.2f\n", half_up2(report.bias->ser));
  }
  std::printf("report written to %s\n", out.string().c_str());
  return 0;
}

inline int cmd_merge(const CLI::App& sub, Opts& o) {
  RunConfig rc = base_config(o);
  rc.command = "merge";
  if (sub.count("--checkpoint")) rc.checkpoint = o.checkpoint;
  if (sub.count("--base")) rc.base_model = o.base;
  if (sub.count("--out")) rc.out = o.out;
  if (rc.checkpoint.empty())
    throw ConfigError("merge needs a checkpoint (--checkpoint or config key 'checkpoint')");
  if (rc.base_model.empty())
    throw ConfigError("merge needs a base model (--base or config key 'base_model')");

  const auto out = resolve_out(rc.out);
  rc.out = out.string();
  const auto merged = export_merged(rc.checkpoint, load_backbone<float>(rc.base_model));
  rc.vit = merged.cfg;
  maybe_print(rc, o.print_config);
  write_snapshot(rc, out.string() + ".config.json");
  save_backbone(merged, out);
  std::printf("merged %s into %s (fingerprint %s)\n", rc.checkpoint.c_str(),
              out.string().c_str(), backbone_fingerprint(merged).c_str());
  return 0;
}

inline int cmd_subset(const CLI::App& sub, Opts& o) {
  RunConfig rc = base_config(o);
  rc.command = "subset";
  if (sub.count("--manifest")) rc.manifest = o.manifest;
  if (sub.count("--width")) rc.subset.n = Index(o.width);
  if (sub.count("--mode")) rc.subset.mode = parse_depth_mode(o.mode);
  if (sub.count("--seed")) rc.subset.seed = o.seed;
  if (sub.count("--out")) rc.out = o.out;
  if (rc.manifest.empty())
    throw ConfigError("subset needs a manifest (--manifest or config key 'manifest')");

  const auto out = resolve_out(rc.out);
  rc.out = out.string();
  const auto sub_manifest = subset(DatasetManifest::load(rc.manifest), rc.subset);
  maybe_print(rc, o.print_config);
  write_snapshot(rc, out.string() + ".config.json");
  sub_manifest.save(out);
  std::printf("kept %lld identities, %zu images -> %s\n",
              (long long)sub_manifest.num_classes(), sub_manifest.records.size(),
              out.string().c_str());
  return 0;
}

inline int cmd_synth(const CLI::App& sub, Opts& o) {
  RunConfig rc = base_config(o);
  rc.command = "synth";
  if (sub.count("--identities")) rc.synth.n_identities = Index(o.identities);
  if (sub.count("--per-id")) rc.synth.images_per_identity = Index(o.per_id);
  if (sub.count("--size")) rc.synth.image_size = Index(o.size);
  if (sub.count("--groups")) rc.synth.n_groups = Index(o.groups);
  if (sub.count("--noise")) rc.synth.noise = o.noise;
  if (sub.count("--pairs")) rc.synth_pairs = Index(o.pairs);
  if (sub.count("--seed")) rc.synth.seed = o.seed;
  if (sub.count("--out")) rc.out = o.out;
  if (rc.synth.n_identities < 1) throw ConfigError("synth.identities must be positive");
  if (rc.synth.images_per_identity < 1) throw ConfigError("synth.per_id must be positive");
  if (rc.synth_pairs < 1) throw ConfigError("synth.pairs must be positive");

  const auto out = resolve_out(rc.out);
  rc.out = out.string();
  maybe_print(rc, o.print_config);
  write_snapshot(rc, out / "config.json");
  const auto manifest = generate_synthetic_dataset(rc.synth, out / "images");
  manifest.save(out / "manifest.csv");
  const auto proto = build_balanced_pairs(manifest, std::size_t(rc.synth_pairs), rc.synth.seed);
  proto.save(out / "pairs.csv");
  std::printf("generated %lld identities x %lld images under %s\n",
              (long long)rc.synth.n_identities, (long long)rc.synth.images_per_identity,
              out.string().c_str());
  std::printf("manifest %s\n", (out / "manifest.csv").string().c_str());
  std::printf("pairs %s (%zu pairs)\n", (out / "pairs.csv").string().c_str(),
              proto.pairs.size());
  return 0;
}

inline int cmd_report_bias(const Opts& o) {
  if (o.accuracies.empty()) throw ConfigError("report-bias needs --accuracies");
  std::map<std::string, double> acc;
  const auto values = split_csv(o.accuracies);
  std::vector<std::string> names;
  if (!o.group_names.empty()) {
    names = split_csv(o.group_names);
    if (names.size() != values.size())
      throw ConfigError("--groups lists " + std::to_string(names.size()) +
                        " names for " + std::to_string(values.size()) + " accuracies");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(values[i], &used);
      if (used != values[i].size()) throw std::invalid_argument(values[i]);
    } catch (const std::exception&) {
      throw ConfigError("--accuracies entry '" + values[i] + "' is not a number");
    }
    acc[names.empty() ? "g" + std::to_string(i) : names[i]] = v;
  }
  const auto blk = bias_report(acc);
  for (const auto& [name, a] : blk.group_accuracy)
    std::printf("group %s %.2f\n", name.c_str(), half_up2(a));
  std::printf("average %.2f\n", half_up2(blk.average));
  std::printf("std %.2f\n", half_up2(blk.std_dev));
  if (blk.ser_infinite) std::printf("ser inf\n");
  else std::printf("ser %.2f\n", half_up2(blk.ser));
  return 0;
}

}  // namespace detail

/// Parses and dispatches. `args` holds the arguments without the program
/// name, in command-line order.
inline int run(std::vector<std::string> args) {
  CLI::App app{"LoRA adapter fine-tuning and biometric evaluation for ViT backbones"};
  app.require_subcommand(1);
  detail::Opts o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run config; flags override its values");
    sub->add_flag("--print-config", o.print_config, "print the resolved config");
  };

  auto* train = app.add_subcommand("train", "fine-tune adapters + head on a manifest");
  add_common(train);
  train->add_option("--manifest", o.manifest, "training manifest csv");
  train->add_option("--out", o.out, "run directory");
  train->add_option("--epochs", o.epochs, "training epochs");
  train->add_option("--batch", o.batch, "batch size");
  train->add_option("--lr", o.lr, "base learning rate");
  train->add_option("--wd", o.wd, "decoupled weight decay");
  train->add_option("--margin", o.margin, "additive cosine margin");
  train->add_option("--scale", o.scale, "logit scale");
  train->add_option("--rank", o.rank, "adapter rank");
  train->add_option("--alpha", o.alpha, "adapter alpha");
  train->add_option("--mode", o.mode, "standard | rank_stabilized");
  train->add_flag("--per-head", o.per_head, "one adapter pair per attention head");
  train->add_option("--neck", o.neck, "head neck dimension (0 = off)");
  train->add_option("--clip", o.clip, "gradient clip norm (0 = off)");
  train->add_option("--seed", o.seed, "global seed");
  train->add_option("--width", o.width, "train on a width subset of the manifest");
  train->add_option("--resume", o.resume, "checkpoint to continue from");

  auto* evaluate = app.add_subcommand("evaluate", "score pair protocols against a model");
  add_common(evaluate);
  evaluate->add_option("--base", o.base, "base backbone file");
  evaluate->add_option("--checkpoint", o.checkpoint, "adapter checkpoint (optional)");
  evaluate->add_option("--protocol", o.protocol, "pair protocol csv (comma-separated list)");
  evaluate->add_option("--out", o.out, "report directory");

  auto* merge = app.add_subcommand("merge", "fold a checkpoint's adapters into the base");
  add_common(merge);
  merge->add_option("--checkpoint", o.checkpoint, "adapter checkpoint");
  merge->add_option("--base", o.base, "base backbone file");
  merge->add_option("--out", o.out, "merged backbone output file");

  auto* subset_cmd = app.add_subcommand("subset", "keep n identities of a manifest");
  add_common(subset_cmd);
  subset_cmd->add_option("--manifest", o.manifest, "input manifest csv");
  subset_cmd->add_option("--width", o.width, "identities to keep");
  subset_cmd->add_option("--mode", o.mode, "random_identities | top_by_image_count");
  subset_cmd->add_option("--seed", o.seed, "selection seed");
  subset_cmd->add_option("--out", o.out, "output manifest csv");

  auto* synth = app.add_subcommand("synth", "generate a synthetic identity dataset");
  add_common(synth);
  synth->add_option("--identities", o.identities, "identity count");
  synth->add_option("--per-id", o.per_id, "images per identity");
  synth->add_option("--size", o.size, "image size in pixels");
  synth->add_option("--groups", o.groups, "demographic-style group count (0 = none)");
  synth->add_option("--noise", o.noise, "pixel noise level");
  synth->add_option("--pairs", o.pairs, "verification pairs per label");
  synth->add_option("--seed", o.seed, "generator seed");
  synth->add_option("--out", o.out, "dataset directory");

  auto* bias = app.add_subcommand("report-bias", "bias stats from per-group accuracies");
  bias->add_option("--accuracies", o.accuracies, "comma-separated accuracies (percent)");
  bias->add_option("--groups", o.group_names, "comma-separated group names");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return detail::cmd_train(*train, o);
    if (evaluate->parsed()) return detail::cmd_evaluate(*evaluate, o);
    if (merge->parsed()) return detail::cmd_merge(*merge, o);
    if (subset_cmd->parsed()) return detail::cmd_subset(*subset_cmd, o);
    if (synth->parsed()) return detail::cmd_synth(*synth, o);
    if (bias->parsed()) return detail::cmd_report_bias(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace faceadapt::cli
