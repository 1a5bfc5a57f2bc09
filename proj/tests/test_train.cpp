// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "msanet/train.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace msanet;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.subnet_depths = {2, 1, 1, 1};
  return cfg;
}

std::vector<ImageSample> tiny_dataset(int count, std::uint64_t seed) {
  std::vector<ImageSample> out;
  for (int i = 0; i < count; ++i) {
    ImageSample s;
    s.clean = testsupport::make_clean_image(32, 32, 3, mix_seed(seed, static_cast<std::uint64_t>(i)));
    s.sigma = 30.0f;
    s.seed = mix_seed(seed, 100 + static_cast<std::uint64_t>(i));
    s.noisy = add_awgn(s.clean, s.sigma, s.seed);
    s.source_path = "mem" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("loss_lp", "[train]") {
  Tensor y = Tensor::uniform(Shape(1, 2, 3, 3), -1.0f, 1.0f, 1);
  SECTION("zero residual") { REQUIRE(loss_lp(nullptr, y, y, 2).data()[0] == 0.0f); }
  SECTION("constant residual 0.5 under L2") {
    Tensor yhat = add(nullptr, y, Tensor::constant(y.shape(), 0.5f));
    REQUIRE(loss_lp(nullptr, y, yhat, 2).data()[0] == Catch::Approx(0.25));
  }
  SECTION("constant residual -0.5 under L1") {
    Tensor yhat = add(nullptr, y, Tensor::constant(y.shape(), -0.5f));
    REQUIRE(loss_lp(nullptr, y, yhat, 1).data()[0] == Catch::Approx(0.5));
  }
  SECTION("shape mismatch") {
    REQUIRE_THROWS_AS(loss_lp(nullptr, y, Tensor::zeros(Shape(1, 2, 3, 4)), 2), ShapeError);
  }
  SECTION("L1 subgradient at zero residual is zero") {
    Tensor yhat = y.clone();
    yhat.set_requires_grad(true);
    Tape tape;
    Tensor loss = loss_lp(&tape, y, yhat, 1);
    tape.backward(loss);
    for (std::int64_t i = 0; i < yhat.numel(); ++i) REQUIRE(yhat.grad()[i] == 0.0f);
  }
}

TEST_CASE("cosine schedule", "[train]") {
  SECTION("endpoints and midpoint") {
    REQUIRE(cosine_lr(0, 1000, 1e-4f) == Catch::Approx(1e-4));
    REQUIRE(cosine_lr(1000, 1000, 1e-4f) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(cosine_lr(500, 1000, 1e-4f) == Catch::Approx(5e-5));
  }
  SECTION("monotonically non-increasing") {
    float prev = cosine_lr(0, 500, 1e-4f);
    for (int s = 1; s <= 500; ++s) {
      const float cur = cosine_lr(s, 500, 1e-4f);
      REQUIRE(cur <= prev);
      prev = cur;
    }
  }
  SECTION("argument validation") {
    REQUIRE_THROWS_AS(cosine_lr(1, 0, 1e-4f), ArgumentError);
    REQUIRE_THROWS_AS(cosine_lr(-1, 10, 1e-4f), ArgumentError);
    REQUIRE_THROWS_AS(cosine_lr(11, 10, 1e-4f), ArgumentError);
  }
}

TEST_CASE("adam", "[train]") {
  SECTION("first step moves by roughly lr against the gradient sign") {
    ParamStore ps;
    Tensor p = ps.add("w", Shape(1, 1, 1, 1), InitSpec::zero());
    p.values()[0] = 1.0f;
    p.ensure_grad();
    p.grad()[0] = 0.37f;
    AdamState adam(ps);
    adam.step(ps, 1e-2f);
    REQUIRE(p.values()[0] == Catch::Approx(1.0f - 1e-2f).epsilon(1e-3));
  }
  SECTION("zero gradients leave parameters unchanged") {
    ParamStore ps;
    Tensor p = ps.add("w", Shape(1, 2, 1, 1), InitSpec::zero());
    p.values() = {0.5f, -0.5f};
    AdamState adam(ps);
    adam.step(ps, 1e-2f);
    REQUIRE(p.values() == std::vector<float>{0.5f, -0.5f});
  }
  SECTION("missing gradient is a contract error") {
    ParamStore ps;
    Tensor p = ps.add("w", Shape(1, 1, 1, 1), InitSpec::zero());
    p.grad_values().clear();
    AdamState adam(ps);
    REQUIRE_THROWS_AS(adam.step(ps, 1e-2f), ContractError);
  }
  SECTION("matches the scalar reference on a quadratic bowl for 100 steps") {
    ParamStore ps;
    Tensor p = ps.add("w", Shape(1, 1, 1, 1), InitSpec::zero());
    p.values()[0] = 2.0f;
    AdamState adam(ps);
    oracle::ScalarAdam ref;
    float ref_param = 2.0f;
    for (int t = 0; t < 100; ++t) {
      const float g = 2.0f * p.values()[0];  // d/dw of w^2
      p.zero_grad();
      p.grad()[0] = g;
      adam.step(ps, 1e-2f);
      ref_param = ref.step(ref_param, 2.0f * ref_param, 1e-2f);
      REQUIRE(p.values()[0] == Catch::Approx(ref_param).epsilon(1e-6));
    }
  }
  SECTION("two identically seeded runs produce identical trajectories") {
    const auto run = [](std::uint64_t seed) {
      ParamStore ps;
      Tensor p = ps.add("w", Shape(1, 4, 1, 1), InitSpec::normal(1.0f));
      ps.initialize(seed);
      AdamState adam(ps);
      std::vector<float> trace;
      Rng rng(seed);
      for (int t = 0; t < 50; ++t) {
        p.zero_grad();
        for (int i = 0; i < 4; ++i) p.grad()[i] = rng.normal(0.0f, 1.0f);
        adam.step(ps, 1e-3f);
        for (int i = 0; i < 4; ++i) trace.push_back(p.values()[i]);
      }
      return trace;
    };
    REQUIRE(run(5) == run(5));
  }
}

TEST_CASE("checkpoint format", "[train]") {
  const std::string dir = testsupport::fresh_temp_dir("ckpt");
  ModelConfig cfg = tiny_config();
  Model model(cfg, 17);
  TrainerState state;
  state.adam = AdamState(model.params());
  state.global_step = 123;
  state.epochs_done = 4;
  TrainSchedule sched;
  const std::string path = dir + "/a.msan";

  SECTION("round trip restores every byte of state") {
    save_checkpoint(make_checkpoint(model, state, sched), path);
    const Checkpoint back = load_checkpoint(path);
    REQUIRE(!model_config_diff(back.config, cfg).has_value());
    for (const auto& e : model.params().entries()) {
      const Tensor* t = back.find(e.name);
      REQUIRE(t != nullptr);
      REQUIRE(t->values() == e.tensor.values());
      REQUIRE(back.find(e.name + ".m1") != nullptr);
      REQUIRE(back.find(e.name + ".m2") != nullptr);
    }
    REQUIRE(back.scalars.at("progress.global_step") == 123.0);
    REQUIRE(back.scalars.at("progress.epochs_done") == 4.0);

    Model restored(back.config, 999);
    TrainerState rstate;
    apply_checkpoint(back, restored, rstate);
    for (std::size_t i = 0; i < model.params().entries().size(); ++i) {
      REQUIRE(restored.params().entries()[i].tensor.values() ==
              model.params().entries()[i].tensor.values());
    }
    REQUIRE(rstate.global_step == 123);
    REQUIRE(rstate.epochs_done == 4);
  }
  SECTION("truncated files are format errors and build nothing") {
    save_checkpoint(make_checkpoint(model, state, sched), path);
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream(dir + "/cut.msan", std::ios::binary) << buf.substr(0, buf.size() / 2);
    REQUIRE_THROWS_AS(load_checkpoint(dir + "/cut.msan"), FormatError);
  }
  SECTION("bad magic reports the offset") {
    std::ofstream(dir + "/junk.msan", std::ios::binary) << "NOPE notacheckpoint";
    try {
      load_checkpoint(dir + "/junk.msan");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      REQUIRE(std::string(e.what()).find("offset 0") != std::string::npos);
    }
  }
  SECTION("config mismatch names the first differing field") {
    save_checkpoint(make_checkpoint(model, state, sched), path);
    ModelConfig other = cfg;
    other.in_channels = 1;
    Model wrong(other, 1);
    TrainerState s2;
    try {
      const Checkpoint back = load_checkpoint(path);
      apply_checkpoint(back, wrong, s2);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      REQUIRE(std::string(e.what()).find("in_channels") != std::string::npos);
    }
  }
}

TEST_CASE("fit", "[train]") {
  const std::vector<ImageSample> ds = tiny_dataset(2, 3);

  SECTION("zero epochs leave the model untouched and the report empty") {
    Model model(tiny_config(), 5);
    const std::vector<float> before = model.params().entries()[0].tensor.values();
    TrainSchedule sched;
    sched.epochs = 0;
    TrainerState state;
    const TrainingReport report = fit(model, ds, sched, state);
    REQUIRE(report.epochs.empty());
    REQUIRE(model.params().entries()[0].tensor.values() == before);
  }
  SECTION("fixed seeds reproduce the loss curve bitwise") {
    const auto run = [&] {
      Model model(tiny_config(), 5);
      TrainSchedule sched;
      sched.epochs = 2;
      sched.steps_per_epoch = 3;
      sched.patch = 16;
      sched.batch = 2;
      sched.seed = 9;
      TrainerState state;
      return fit(model, ds, sched, state);
    };
    const TrainingReport a = run();
    const TrainingReport b = run();
    REQUIRE(a.epochs.size() == b.epochs.size());
    for (std::size_t i = 0; i < a.epochs.size(); ++i) {
      REQUIRE(a.epochs[i].mean_loss == b.epochs[i].mean_loss);
      REQUIRE(a.epochs[i].lr == b.epochs[i].lr);
    }
  }
  SECTION("interrupt and resume reproduces the uninterrupted run") {
    const std::string dir = testsupport::fresh_temp_dir("resume");
    TrainSchedule sched;
    sched.epochs = 4;
    sched.steps_per_epoch = 2;
    sched.patch = 16;
    sched.batch = 2;
    sched.seed = 13;
    sched.checkpoint_every = 1;

    Model uninterrupted(tiny_config(), 7);
    TrainerState s1;
    FitOptions opts1;
    const TrainingReport full = fit(uninterrupted, ds, sched, s1, opts1);

    Model part(tiny_config(), 7);
    TrainerState s2;
    FitOptions opts2;
    opts2.out_dir = dir;
    opts2.stop_after_epoch = 2;  // interrupt mid-schedule; lr curve stays the full one
    fit(part, ds, sched, s2, opts2);

    Model resumed(tiny_config(), 999);
    TrainerState s3;
    apply_checkpoint(load_checkpoint(dir + "/ckpt_final.msan"), resumed, s3);
    const TrainingReport rest = fit(resumed, ds, sched, s3);

    REQUIRE(rest.epochs.size() == 2);
    for (int e = 0; e < 2; ++e) {
      REQUIRE(rest.epochs[static_cast<std::size_t>(e)].mean_loss ==
              Catch::Approx(full.epochs[static_cast<std::size_t>(e) + 2].mean_loss).epsilon(1e-5));
    }
    for (std::size_t i = 0; i < resumed.params().entries().size(); ++i) {
      const auto& a = resumed.params().entries()[i].tensor.values();
      const auto& b = uninterrupted.params().entries()[i].tensor.values();
      for (std::size_t k = 0; k < a.size(); ++k) {
        REQUIRE(a[k] == Catch::Approx(b[k]).margin(1e-7).epsilon(1e-5));
      }
    }
  }
  SECTION("checkpoint retention keeps the last three epoch files") {
    const std::string dir = testsupport::fresh_temp_dir("keep");
    Model model(tiny_config(), 8);
    TrainSchedule sched;
    sched.epochs = 5;
    sched.steps_per_epoch = 1;
    sched.patch = 16;
    sched.batch = 1;
    TrainerState state;
    FitOptions opts;
    opts.out_dir = dir;
    fit(model, ds, sched, state, opts);
    REQUIRE(!std::filesystem::exists(dir + "/ckpt_epoch_0001.msan"));
    REQUIRE(!std::filesystem::exists(dir + "/ckpt_epoch_0002.msan"));
    REQUIRE(std::filesystem::exists(dir + "/ckpt_epoch_0003.msan"));
    REQUIRE(std::filesystem::exists(dir + "/ckpt_epoch_0004.msan"));
    REQUIRE(std::filesystem::exists(dir + "/ckpt_epoch_0005.msan"));
    REQUIRE(std::filesystem::exists(dir + "/ckpt_final.msan"));
    REQUIRE(std::filesystem::exists(dir + "/report.csv"));
  }
}
