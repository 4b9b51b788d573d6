// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "faceadapt/synthetic.hpp"
#include "faceadapt/trainer.hpp"

using namespace faceadapt;
namespace fs = std::filesystem;

namespace {

ViTConfig toy_vit() {
  ViTConfig cfg;
  cfg.image_size = 28;
  cfg.patch_size = 7;
  cfg.channels = 1;
  cfg.d_model = 24;
  cfg.n_heads = 3;
  cfg.n_layers = 2;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("faceadapt_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetManifest toy_dataset(const fs::path& dir, Index ids = 3, Index per_id = 6) {
  SyntheticConfig sc;
  sc.n_identities = ids;
  sc.images_per_identity = per_id;
  sc.image_size = 28;
  sc.n_groups = 0;
  sc.seed = 405;
  return generate_synthetic_dataset(sc, dir);
}

TrainConfig toy_train(Index epochs, Index batch) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.base_lr = 1e-3;
  cfg.rank = 2;
  cfg.alpha = 4.0;
  cfg.seed = 99;
  return cfg;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and monotonicity") {
  CHECK(cosine_lr(0, 100, 1e-4) == 1e-4);  // exact, not approximate
  CHECK(cosine_lr(100, 100, 1e-4) == 0.0);
  CHECK(cosine_lr(50, 100, 2e-4) == doctest::Approx(1e-4).epsilon(1e-12));
  double prev = cosine_lr(0, 317, 1e-4);
  for (std::int64_t s = 1; s <= 317; ++s) {
    const double cur = cosine_lr(s, 317, 1e-4);
    CHECK(cur <= prev);
    prev = cur;
  }
  CHECK(cosine_lr(5, 0, 3e-4) == 3e-4);  // degenerate horizon: constant
}

TEST_CASE("adaptive update with constant gradient moves by lr per step") {
  // With bias correction, a constant gradient gives mhat/sqrt(vhat) = 1, so
  // each step shifts the parameter by exactly lr (up to eps).
  AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  MatX<double> theta = MatX<double>::Constant(1, 1, 1.0);
  MatX<double> grad = MatX<double>::Constant(1, 1, 1.0);
  opt.add("theta", theta, grad);
  opt.step(0.1);
  CHECK(theta(0, 0) == doctest::Approx(0.9).epsilon(1e-7));
  opt.step(0.1);
  CHECK(theta(0, 0) == doctest::Approx(0.8).epsilon(1e-7));
  CHECK(opt.steps_taken() == 2);
}

TEST_CASE("weight decay is decoupled from the adaptive term") {
  AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-8, 0.05});
  MatX<double> theta = MatX<double>::Constant(1, 1, 2.0);
  MatX<double> grad = MatX<double>::Zero(1, 1);
  opt.add("theta", theta, grad);
  opt.step(0.1);
  // zero gradient: only the decay term fires, theta -= lr * wd * theta
  CHECK(theta(0, 0) == 2.0 - 0.1 * 0.05 * 2.0);
}

TEST_CASE("gradient clipping rescales the global norm") {
  AdamW<double> opt;
  MatX<double> a = MatX<double>::Zero(2, 2), ga(2, 2);
  MatX<double> b = MatX<double>::Zero(1, 3), gb(1, 3);
  ga << 3, 0, 0, 0;
  gb << 0, 4, 0;
  opt.add("a", a, ga);
  opt.add("b", b, gb);
  CHECK(opt.clip_gradients(10.0) == doctest::Approx(5.0));  // under the cap: untouched
  CHECK(ga(0, 0) == 3.0);
  CHECK(opt.clip_gradients(1.0) == doctest::Approx(5.0));
  CHECK(ga(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(gb(0, 1) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("one training step updates exactly the advertised parameters") {
  const auto data_dir = fresh_dir("census_data");
  const auto run_dir = fresh_dir("census_run");
  const auto manifest = toy_dataset(data_dir, 3, 2);  // 6 images

  auto bb = make_random_backbone<float>(toy_vit(), 500);
  TrainConfig tc = toy_train(1, 6);  // one step total
  attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 501);
  auto head = init_head<float>(manifest.num_classes(), toy_vit().d_model, float(tc.margin),
                               float(tc.scale), 502);

  const std::string frozen_before = backbone_fingerprint(bb);
  std::map<std::string, MatX<float>> before;
  bb.for_each_adapter([&](Index blk, char proj, Index idx, LoraAdapter<float>& ad) {
    const auto key = adapter_key(blk, proj, idx, false);
    before[key + "A"] = ad.A;
    before[key + "B"] = ad.B;
  });
  before["head.weight"] = head.W;

  const auto result = finetune(bb, head, manifest, tc, run_dir);
  CHECK(result.steps == 1);
  CHECK(backbone_fingerprint(bb) == frozen_before);  // base weights untouched

  Index changed = 0;
  auto count_changed = [&](const MatX<float>& now, const MatX<float>& was) {
    for (Index i = 0; i < now.rows(); ++i)
      for (Index j = 0; j < now.cols(); ++j)
        if (now(i, j) != was(i, j)) ++changed;
  };
  bb.for_each_adapter([&](Index blk, char proj, Index idx, LoraAdapter<float>& ad) {
    const auto key = adapter_key(blk, proj, idx, false);
    count_changed(ad.A, before.at(key + "A"));
    count_changed(ad.B, before.at(key + "B"));
  });
  count_changed(head.W, before.at("head.weight"));

  // every block contributes q and v adapters of rank r: 2 * r * (d_out + d_in)
  const Index d = toy_vit().d_model;
  const Index expected = toy_vit().n_layers * 2 * tc.rank * (d + d) + head.W.size();
  CHECK(changed == expected);
  CHECK(changed == bb.adapter_parameter_count() + head.W.size());
}

TEST_CASE("zero-epoch run emits an initial checkpoint that merges to the base model") {
  const auto data_dir = fresh_dir("zerostep_data");
  const auto run_dir = fresh_dir("zerostep_run");
  const auto manifest = toy_dataset(data_dir, 2, 2);

  auto bb = make_random_backbone<float>(toy_vit(), 510);
  const auto base = bb;  // adapter-free copy
  TrainConfig tc = toy_train(0, 4);
  attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 511);
  auto head = init_head<float>(2, toy_vit().d_model, float(tc.margin), float(tc.scale), 512);

  const auto result = finetune(bb, head, manifest, tc, run_dir);
  CHECK(result.steps == 0);
  CHECK(fs::exists(result.last_checkpoint));

  const Container c = Container::load(result.last_checkpoint);
  bool any_b = false;
  for (const auto& [name, t] : c.tensors)
    if (name.size() > 2 && name.substr(name.size() - 2) == ".B")
      for (std::int64_t i = 0; i < t.numel(); ++i)
        if (t.at(i) != 0.0) any_b = true;
  CHECK(!any_b);

  auto merged = export_merged(result.last_checkpoint, base);
  CHECK(!merged.has_adapters());
  CHECK(merged.blocks[0].attn.q.W == base.blocks[0].attn.q.W);
  CHECK(merged.blocks[1].attn.v.W == base.blocks[1].attn.v.W);

  SyntheticConfig probe;
  probe.image_size = 28;
  probe.seed = 513;
  const auto img = render_synthetic_image<float>(probe, 0, 0);
  CHECK(extract_embedding(merged, img) == extract_embedding(base, img));
}

TEST_CASE("loss trends down and the schedule follows the cosine curve") {
  const auto data_dir = fresh_dir("trend_data");
  const auto run_dir = fresh_dir("trend_run");
  const auto manifest = toy_dataset(data_dir, 3, 6);  // 18 images

  auto bb = make_random_backbone<float>(toy_vit(), 520);
  TrainConfig tc = toy_train(8, 6);  // 3 steps per epoch, 24 total
  attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 521);
  auto head = init_head<float>(3, toy_vit().d_model, float(tc.margin), float(tc.scale), 522);

  const auto result = finetune(bb, head, manifest, tc, run_dir);
  REQUIRE(result.steps == 24);
  REQUIRE(result.losses.size() == 24);
  for (double l : result.losses) CHECK(std::isfinite(l));
  for (std::size_t s = 0; s < result.lrs.size(); ++s)
    CHECK(result.lrs[s] == cosine_lr(std::int64_t(s), 24, tc.base_lr));
  CHECK(result.lrs[0] == tc.base_lr);

  const double first = (result.losses[0] + result.losses[1] + result.losses[2]) / 3;
  const double last = (result.losses[21] + result.losses[22] + result.losses[23]) / 3;
  CHECK(last < first);

  // metrics log: header plus one line per step
  std::ifstream metrics(run_dir / "metrics.csv");
  REQUIRE(metrics.good());
  std::string line;
  std::getline(metrics, line);
  CHECK(line == "step,epoch,lr,loss");
  int rows = 0;
  while (std::getline(metrics, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 24);
}

TEST_CASE("interrupted and uninterrupted runs are step-for-step identical") {
  const auto data_dir = fresh_dir("resume_data");
  const auto manifest = toy_dataset(data_dir, 3, 4);  // 12 images
  const auto cfg_vit = toy_vit();
  TrainConfig tc = toy_train(4, 4);  // 3 steps per epoch, 12 steps total

  const auto dir_full = fresh_dir("resume_full");
  TrainResult full;
  {
    auto bb = make_random_backbone<float>(cfg_vit, 530);
    attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 531);
    auto head = init_head<float>(3, cfg_vit.d_model, float(tc.margin), float(tc.scale), 532);
    full = finetune(bb, head, manifest, tc, dir_full);
  }

  // pretend the full run died after epoch 2: restart from its checkpoint
  const auto dir_cont = fresh_dir("resume_cont");
  TrainResult cont;
  {
    auto bb = make_random_backbone<float>(cfg_vit, 530);
    attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 531);
    auto head = init_head<float>(3, cfg_vit.d_model, float(tc.margin), float(tc.scale), 532);
    cont = resume(dir_full / "checkpoint-epoch-0002.st", bb, head, manifest, tc, dir_cont);
  }

  // the continued run replays exactly the tail of the schedule
  REQUIRE(full.lrs.size() == 12);
  REQUIRE(cont.lrs.size() == 6);
  for (std::size_t i = 0; i < cont.lrs.size(); ++i) CHECK(cont.lrs[i] == full.lrs[i + 6]);
  CHECK(std::abs(cont.losses.back() - full.losses.back()) <= 1e-6);

  // final checkpoints carry bit-identical tensors
  const Container a = Container::load(dir_full / "checkpoint-epoch-0004.st");
  const Container b = Container::load(dir_cont / "checkpoint-epoch-0004.st");
  CHECK(a.fingerprint() == b.fingerprint());
}

TEST_CASE("resume guards") {
  const auto data_dir = fresh_dir("guard_data");
  const auto run_dir = fresh_dir("guard_run");
  const auto manifest = toy_dataset(data_dir, 2, 3);
  const auto cfg_vit = toy_vit();
  TrainConfig tc = toy_train(1, 6);

  auto bb = make_random_backbone<float>(cfg_vit, 540);
  attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 541);
  auto head = init_head<float>(2, cfg_vit.d_model, float(tc.margin), float(tc.scale), 542);
  const auto result = finetune(bb, head, manifest, tc, run_dir);

  SUBCASE("different backbone fingerprint is a hard error") {
    auto other = make_random_backbone<float>(cfg_vit, 939);
    attach_adapters(other, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 541);
    auto head2 = init_head<float>(2, cfg_vit.d_model, float(tc.margin), float(tc.scale), 542);
    TrainConfig more = tc;
    more.epochs = 2;
    CHECK_THROWS_AS(resume(result.last_checkpoint, other, head2, manifest, more, run_dir),
                    DataError);
    CHECK_THROWS_AS(export_merged(result.last_checkpoint, other), DataError);
  }

  SUBCASE("adapter hyperparameter drift is rejected before weights load") {
    auto bb2 = make_random_backbone<float>(cfg_vit, 540);
    TrainConfig other = tc;
    other.rank = 4;
    other.epochs = 2;
    attach_adapters(bb2, other.rank, float(other.alpha), other.mode, other.per_head, 541);
    auto head2 = init_head<float>(2, cfg_vit.d_model, float(tc.margin), float(tc.scale), 542);
    try {
      resume(result.last_checkpoint, bb2, head2, manifest, other, run_dir);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("rank") != std::string::npos);
    }
  }
}

TEST_CASE("trained adapters merge to the same embeddings as adapter mode") {
  const auto data_dir = fresh_dir("merge_data");
  const auto run_dir = fresh_dir("merge_run");
  const auto manifest = toy_dataset(data_dir, 3, 4);
  const auto cfg_vit = toy_vit();

  auto bb = make_random_backbone<float>(cfg_vit, 550);
  const auto base = bb;
  TrainConfig tc = toy_train(3, 6);
  attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 551);
  auto head = init_head<float>(3, cfg_vit.d_model, float(tc.margin), float(tc.scale), 552);
  const auto result = finetune(bb, head, manifest, tc, run_dir);

  auto merged = export_merged(result.last_checkpoint, base);
  CHECK(!merged.has_adapters());

  SyntheticConfig probe;
  probe.image_size = 28;
  probe.seed = 553;
  probe.n_identities = 50;
  double worst = 0;
  for (Index i = 0; i < 50; ++i) {
    const auto img = render_synthetic_image<float>(probe, i, 0);
    const VecX<float> ea = extract_embedding(bb, img);      // adapter mode, post training
    const VecX<float> em = extract_embedding(merged, img);  // folded weights
    worst = std::max(worst, double((ea - em).cwiseAbs().maxCoeff()));
  }
  CHECK(worst <= 1e-5);

  // the exported container round-trips bit-exactly
  const auto exported = run_dir / "merged.st";
  save_backbone(merged, exported);
  auto loaded = load_backbone<float>(exported);
  CHECK(backbone_fingerprint(loaded) == backbone_fingerprint(merged));
  CHECK(extract_embedding(loaded, render_synthetic_image<float>(probe, 3, 0)) ==
        extract_embedding(merged, render_synthetic_image<float>(probe, 3, 0)));
}

TEST_CASE("exploding forward pass aborts with a finite-loss diagnostic") {
  const auto data_dir = fresh_dir("blowup_data");
  const auto run_dir = fresh_dir("blowup_run");
  const auto manifest = toy_dataset(data_dir, 2, 2);
  const auto cfg_vit = toy_vit();

  auto bb = make_random_backbone<float>(cfg_vit, 560);
  TrainConfig tc = toy_train(1, 4);
  attach_adapters(bb, tc.rank, float(tc.alpha), tc.mode, tc.per_head, 561);
  // big enough that scale * U * B^T overflows float to inf, and the
  // mixed-sign attention logits turn the softmax into NaN
  bb.blocks[0].attn.adapters_q[0].A(0, 0) = 1e20f;
  bb.blocks[0].attn.adapters_q[0].B.setConstant(1e30f);
  auto head = init_head<float>(2, cfg_vit.d_model, float(tc.margin), float(tc.scale), 562);
  try {
    finetune(bb, head, manifest, tc, run_dir);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
  }
}

TEST_CASE("config validation") {
  TrainConfig tc;
  tc.epochs = -1;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.base_lr = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.norm_mean = {0.5, 0.5};
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = TrainConfig{};
  CHECK(tc.epochs == 40);
  CHECK(tc.batch_size == 512);
  CHECK(tc.base_lr == 1e-4);
  CHECK(tc.weight_decay == 0.05);
  tc.validate();
}
