// SPDX-License-Identifier: Apache-2.0
//
// msanet command-line interface: dataset synthesis, training, denoising,
// evaluation and gradient verification as reproducible runs.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msanet/gradcheck.hpp"
#include "msanet/metrics.hpp"
#include "msanet/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

void log_line(const std::string& msg) { std::cout << timestamp() << " [msanet] " << msg << std::endl; }

struct TrainArgs {
  std::string config_path;
  std::string data_dir;
  std::string val_dir;
  std::string out_dir;
  std::string resume;
  double sigma = -1.0;
  int epochs = -1;
  int steps_per_epoch = -1;
  int batch = -1;
  int patch = -1;
  double lr0 = -1.0;
  std::string loss;
  std::int64_t seed = -1;
};

int run_train(const TrainArgs& a) {
  msanet::RunConfig cfg;
  if (!a.config_path.empty()) cfg = msanet::RunConfig::from_file(a.config_path);
  if (!a.data_dir.empty()) cfg.train_dir = a.data_dir;
  if (!a.val_dir.empty()) cfg.val_dir = a.val_dir;
  if (a.sigma >= 0.0) cfg.train.sigma = static_cast<float>(a.sigma);
  if (a.epochs >= 0) cfg.train.epochs = a.epochs;
  if (a.steps_per_epoch >= 0) cfg.train.steps_per_epoch = a.steps_per_epoch;
  if (a.batch >= 0) cfg.train.batch = a.batch;
  if (a.patch >= 0) cfg.train.patch = a.patch;
  if (a.lr0 >= 0.0) cfg.train.lr0 = static_cast<float>(a.lr0);
  if (!a.loss.empty()) cfg.train.loss_p = a.loss == "l1" ? 1 : 2;
  if (a.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(a.seed);
  if (cfg.train_dir.empty()) {
    throw msanet::ConfigError("no training data directory (use --data or data.train_dir)");
  }
  cfg.train.validate();
  cfg.model.validate();

  log_line("resolved config: " + cfg.to_json().dump());

  msanet::Model model(cfg.model, cfg.train.seed);
  msanet::TrainerState state;
  state.adam = msanet::AdamState(model.params());
  if (!a.resume.empty()) {
    const msanet::Checkpoint ckpt = msanet::load_checkpoint(a.resume);
    msanet::apply_checkpoint(ckpt, model, state);
    log_line("resumed from " + a.resume + " at epoch " + std::to_string(state.epochs_done));
    if (state.epochs_done >= cfg.train.epochs) {
      log_line("schedule complete (" + std::to_string(state.epochs_done) + "/" +
               std::to_string(cfg.train.epochs) + " epochs); nothing to do");
      return kExitOk;
    }
  }

  const std::vector<std::string> paths = msanet::list_images(cfg.train_dir);
  if (paths.empty()) throw msanet::ConfigError("no images found in " + cfg.train_dir);
  log_line("training set: " + std::to_string(paths.size()) + " images, sigma " +
           std::to_string(cfg.train.sigma));
  const std::vector<msanet::ImageSample> train_set = msanet::load_dataset(
      paths, cfg.train.sigma, cfg.train.seed, cfg.train.grayscale, cfg.train.clamp_noisy);
  std::vector<msanet::ImageSample> val_set;
  if (!cfg.val_dir.empty()) {
    val_set = msanet::load_dataset(msanet::list_images(cfg.val_dir), cfg.train.sigma,
                                   msanet::mix_seed(cfg.train.seed, 0x76616cull), cfg.train.grayscale,
                                   cfg.train.clamp_noisy);
  }

  std::filesystem::create_directories(a.out_dir);
  if (cfg.train.epochs == 0) {
    msanet::save_checkpoint(msanet::make_checkpoint(model, state, cfg.train),
                            (std::filesystem::path(a.out_dir) / "ckpt_final.msan").string());
    msanet::TrainingReport{}.write_csv((std::filesystem::path(a.out_dir) / "report.csv").string());
    log_line("epochs=0: wrote initial checkpoint only");
    return kExitOk;
  }

  msanet::FitOptions opts;
  opts.out_dir = a.out_dir;
  opts.val_set = val_set.empty() ? nullptr : &val_set;
  opts.log = log_line;
  msanet::fit(model, train_set, cfg.train, state, opts);
  log_line("training done; artifacts in " + a.out_dir);
  return kExitOk;
}

struct DenoiseArgs {
  std::string ckpt;
  std::string input;
  std::string output;
};

int run_denoise(const DenoiseArgs& a) {
  const msanet::Checkpoint ckpt = msanet::load_checkpoint(a.ckpt);
  msanet::Model model(ckpt.config, 0);
  msanet::TrainerState state;
  msanet::apply_checkpoint(ckpt, model, state);
  log_line("model: " + msanet::model_config_to_json(ckpt.config).dump() + ", " +
           std::to_string(model.param_count()) + " parameters");

  std::vector<std::string> inputs;
  bool dir_mode = false;
  if (std::filesystem::is_directory(a.input)) {
    inputs = msanet::list_images(a.input);
    dir_mode = true;
    if (inputs.empty()) throw msanet::ConfigError("no images found in " + a.input);
  } else {
    inputs.push_back(a.input);
  }
  if (dir_mode || inputs.size() > 1) {
    std::filesystem::create_directories(a.output);
  } else if (const auto parent = std::filesystem::path(a.output).parent_path(); !parent.empty()) {
    std::filesystem::create_directories(parent);
  }

  for (const std::string& path : inputs) {
    msanet::Tensor noisy = msanet::load_image(path);
    if (noisy.shape().c != model.config().in_channels) {
      throw msanet::ConfigError(
          "channel mismatch: checkpoint expects " + std::to_string(model.config().in_channels) +
          " channel(s) but " + path + " has " + std::to_string(noisy.shape().c) +
          " (convert the input or use a matching checkpoint)");
    }
    msanet::Tensor restored = msanet::clamp01(msanet::denoise_image(model, noisy));
    const std::string out_path =
        dir_mode ? (std::filesystem::path(a.output) / std::filesystem::path(path).filename()).string()
                 : a.output;
    msanet::save_image(restored, out_path);
    log_line(path + " -> " + out_path);
  }
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  bool passthrough = false;
  std::string clean_dir;
  double sigma = 30.0;
  std::int64_t seed = 1;
  std::string report_path;
  bool grayscale = false;
};

int run_eval(const EvalArgs& a) {
  std::unique_ptr<msanet::Model> model;
  if (!a.passthrough) {
    if (a.ckpt.empty()) throw msanet::ConfigError("--ckpt is required unless --passthrough is set");
    const msanet::Checkpoint ckpt = msanet::load_checkpoint(a.ckpt);
    model = std::make_unique<msanet::Model>(ckpt.config, 0);
    msanet::TrainerState state;
    msanet::apply_checkpoint(ckpt, *model, state);
  }
  const std::vector<std::string> paths = msanet::list_images(a.clean_dir);
  if (paths.empty()) throw msanet::ConfigError("no images found in " + a.clean_dir);
  const bool gray = a.grayscale || (model != nullptr && model->config().in_channels == 1);
  const std::vector<msanet::ImageSample> dataset = msanet::load_dataset(
      paths, static_cast<float>(a.sigma), static_cast<std::uint64_t>(a.seed), gray, false);

  log_line("evaluating " + std::to_string(dataset.size()) + " images at sigma " + std::to_string(a.sigma) +
           (model == nullptr ? " (pass-through)" : ""));
  const msanet::MetricReport report = msanet::evaluate(model.get(), dataset);
  if (!a.report_path.empty()) {
    if (const auto parent = std::filesystem::path(a.report_path).parent_path(); !parent.empty()) {
      std::filesystem::create_directories(parent);
    }
    report.write_csv(a.report_path);
  }
  std::printf("mean PSNR %.4f dB, mean SSIM %.4f\n", report.mean_psnr, report.mean_ssim);
  return kExitOk;
}

struct GradcheckArgs {
  std::string scope = "op";
  std::int64_t seed = 7;
};

int run_gradcheck(const GradcheckArgs& a) {
  std::vector<std::string> ids;
  if (a.scope == "op") {
    ids = msanet::grad_check_op_ids();
  } else if (a.scope == "block") {
    ids = msanet::grad_check_block_ids();
  } else if (a.scope == "model") {
    ids = {"model"};
  } else {
    throw msanet::ConfigError("scope must be op, block or model");
  }
  std::vector<std::string> offenders;
  for (const std::string& id : ids) {
    const double err = msanet::grad_check(id, static_cast<std::uint64_t>(a.seed));
    const double tol = msanet::grad_check_tolerance(id);
    const bool ok = err <= tol;
    std::printf("%-28s max rel err %.3e (tol %.0e) %s\n", id.c_str(), err, tol, ok ? "ok" : "FAIL");
    if (!ok) offenders.push_back(id);
  }
  if (!offenders.empty()) {
    std::string joined;
    for (const std::string& o : offenders) joined += (joined.empty() ? "" : ", ") + o;
    log_line("gradient check FAILED for: " + joined);
    return kExitVerification;
  }
  log_line("gradient checks passed");
  return kExitOk;
}

struct SynthArgs {
  std::string clean_dir;
  double sigma = 30.0;
  std::int64_t seed = 1;
  std::string out_dir;
};

int run_synth(const SynthArgs& a) {
  const std::vector<std::string> paths = msanet::list_images(a.clean_dir);
  if (paths.empty()) throw msanet::ConfigError("no images found in " + a.clean_dir);
  std::filesystem::create_directories(a.out_dir);
  for (const std::string& path : paths) {
    msanet::Tensor clean = msanet::load_image(path);
    const std::uint64_t s = msanet::image_noise_seed(static_cast<std::uint64_t>(a.seed), path);
    msanet::Tensor noisy = msanet::add_awgn(clean, static_cast<float>(a.sigma), s);
    const std::string out_path =
        (std::filesystem::path(a.out_dir) / std::filesystem::path(path).filename()).string();
    msanet::save_image(noisy, out_path);  // clamps and quantizes
    log_line(path + " -> " + out_path);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MSANet single-image denoiser"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model on a directory of clean images");
  train->add_option("--config", train_args.config_path, "run config JSON");
  train->add_option("--data", train_args.data_dir, "directory of clean training images");
  train->add_option("--val-dir", train_args.val_dir, "directory of clean validation images");
  train->add_option("--sigma", train_args.sigma, "AWGN level in 8-bit units");
  train->add_option("--epochs", train_args.epochs, "number of epochs");
  train->add_option("--steps-per-epoch", train_args.steps_per_epoch, "steps per epoch (0 = derive)");
  train->add_option("--batch", train_args.batch, "batch size");
  train->add_option("--patch", train_args.patch, "patch size");
  train->add_option("--lr0", train_args.lr0, "initial learning rate");
  train->add_option("--loss", train_args.loss, "l1 or l2")->check(CLI::IsMember({"l1", "l2"}));
  train->add_option("--seed", train_args.seed, "global seed");
  train->add_option("--out", train_args.out_dir, "output directory")->required();
  train->add_option("--resume", train_args.resume, "checkpoint to resume from");

  DenoiseArgs denoise_args;
  CLI::App* denoise = app.add_subcommand("denoise", "denoise an image or a directory of images");
  denoise->add_option("--ckpt", denoise_args.ckpt, "checkpoint file")->required();
  denoise->add_option("--input", denoise_args.input, "input image or directory")->required();
  denoise->add_option("--output", denoise_args.output, "output image or directory")->required();

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "synthetic-noise evaluation against clean references");
  eval->add_option("--ckpt", eval_args.ckpt, "checkpoint file ('none' with --passthrough)");
  eval->add_flag("--passthrough", eval_args.passthrough, "score the noisy input itself");
  eval->add_flag("--grayscale", eval_args.grayscale, "convert references to grayscale");
  eval->add_option("--clean-dir", eval_args.clean_dir, "directory of clean images")->required();
  eval->add_option("--sigma", eval_args.sigma, "AWGN level in 8-bit units");
  eval->add_option("--seed", eval_args.seed, "noise seed");
  eval->add_option("--report", eval_args.report_path, "CSV report path");

  GradcheckArgs grad_args;
  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  grad->add_option("--scope", grad_args.scope, "op, block or model")
      ->check(CLI::IsMember({"op", "block", "model"}));
  grad->add_option("--seed", grad_args.seed, "case seed");

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "materialize noisy counterparts of clean images");
  synth->add_option("--clean-dir", synth_args.clean_dir, "directory of clean images")->required();
  synth->add_option("--sigma", synth_args.sigma, "AWGN level in 8-bit units");
  synth->add_option("--seed", synth_args.seed, "noise seed");
  synth->add_option("--out", synth_args.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints help/usage text
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return run_train(train_args);
    if (denoise->parsed()) return run_denoise(denoise_args);
    if (eval->parsed()) return run_eval(eval_args);
    if (grad->parsed()) return run_gradcheck(grad_args);
    if (synth->parsed()) return run_synth(synth_args);
  } catch (const msanet::IoError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitIo;
  } catch (const msanet::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << std::endl;
    return kExitUsage;
  }
  return kExitUsage;
}
