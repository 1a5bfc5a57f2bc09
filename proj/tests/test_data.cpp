// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "msanet/data.hpp"
#include "support/synthetic.hpp"

using namespace msanet;

TEST_CASE("image io round trips", "[data]") {
  const std::string dir = testsupport::fresh_temp_dir("io");

  SECTION("grayscale byte mapping") {
    Tensor t = Tensor::zeros(Shape(1, 1, 2, 2));
    t.at(0, 0, 0, 0) = 0.0f;
    t.at(0, 0, 0, 1) = 1.0f;
    t.at(0, 0, 1, 0) = 128.0f / 255.0f;
    t.at(0, 0, 1, 1) = 64.0f / 255.0f;
    for (const char* name : {"g.png", "g.pgm"}) {
      const std::string path = dir + "/" + name;
      save_image(t, path);
      Tensor back = load_image(path);
      REQUIRE(back.shape() == t.shape());
      REQUIRE(back.values() == t.values());
    }
  }
  SECTION("color round trip is bit exact for 8-bit sources") {
    Tensor img = testsupport::make_clean_image(23, 17, 3, 99);
    for (const char* name : {"c.png", "c.ppm"}) {
      const std::string path = dir + "/" + name;
      save_image(img, path);
      Tensor a = load_image(path);
      REQUIRE(a.shape() == Shape(1, 3, 23, 17));
      save_image(a, dir + "/second_" + std::string(name));
      Tensor b = load_image(dir + "/second_" + std::string(name));
      REQUIRE(a.values() == b.values());
    }
  }
  SECTION("quantization clamps and rounds") {
    REQUIRE(quantize_u8(0.5f) == 128);
    REQUIRE(quantize_u8(1.2f) == 255);
    REQUIRE(quantize_u8(-0.1f) == 0);
  }
  SECTION("missing file") { REQUIRE_THROWS_AS(load_image(dir + "/absent.png"), IoError); }
  SECTION("unsupported format") {
    std::ofstream(dir + "/notes.txt") << "hello";
    REQUIRE_THROWS_AS(load_image(dir + "/notes.txt"), FormatError);
  }
  SECTION("truncated pnm") {
    std::ofstream(dir + "/bad.pgm", std::ios::binary) << "P5\n4 4\n255\n12";
    REQUIRE_THROWS_AS(load_image(dir + "/bad.pgm"), FormatError);
  }
  SECTION("grayscale conversion uses BT.601 weights") {
    Tensor rgb = Tensor::zeros(Shape(1, 3, 1, 1));
    rgb.at(0, 0, 0, 0) = 1.0f;
    REQUIRE(to_grayscale(rgb).data()[0] == Catch::Approx(0.299));
  }
}

TEST_CASE("awgn synthesis", "[data]") {
  Tensor clean = testsupport::make_clean_image(256, 256, 1, 7, 0.2f, 0.8f);

  SECTION("sigma zero is the identity") {
    REQUIRE(add_awgn(clean, 0.0f, 3).values() == clean.values());
  }
  SECTION("same seed, same noise; different seed, different noise") {
    Tensor a = add_awgn(clean, 30.0f, 3);
    Tensor b = add_awgn(clean, 30.0f, 3);
    Tensor c = add_awgn(clean, 30.0f, 4);
    REQUIRE(a.values() == b.values());
    REQUIRE(a.values() != c.values());
  }
  SECTION("empirical std within 3% of sigma/255 on 256x256") {
    Tensor noisy = add_awgn(clean, 30.0f, 5);
    double sum = 0.0, sum2 = 0.0;
    const std::int64_t n = clean.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(noisy.data()[i]) - clean.data()[i];
      sum += d;
      sum2 += d * d;
    }
    const double mean = sum / static_cast<double>(n);
    const double stddev = std::sqrt(sum2 / static_cast<double>(n) - mean * mean);
    REQUIRE(stddev == Catch::Approx(30.0 / 255.0).epsilon(0.03));
  }
  SECTION("noise is white: lag-1 autocorrelation below 0.05") {
    Tensor noisy = add_awgn(clean, 30.0f, 6);
    const int H = 256, W = 256;
    double num = 0.0, den = 0.0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x + 1 < W; ++x) {
        const double a = static_cast<double>(noisy.at(0, 0, y, x)) - clean.at(0, 0, y, x);
        const double b = static_cast<double>(noisy.at(0, 0, y, x + 1)) - clean.at(0, 0, y, x + 1);
        num += a * b;
        den += a * a;
      }
    REQUIRE(std::fabs(num / den) < 0.05);
  }
  SECTION("negative sigma is rejected") { REQUIRE_THROWS_AS(add_awgn(clean, -1.0f, 0), ArgumentError); }
}

TEST_CASE("patch sampling and augmentation", "[data]") {
  std::vector<ImageSample> pairs;
  {
    ImageSample s;
    s.clean = testsupport::make_clean_image(24, 24, 3, 11);
    s.noisy = add_awgn(s.clean, 30.0f, 12);
    s.sigma = 30.0f;
    s.source_path = "mem0";
    pairs.push_back(std::move(s));
  }

  SECTION("fixed seed reproduces the batch bitwise") {
    PatchBatch a = sample_patch_batch(pairs, 16, 4, 77);
    PatchBatch b = sample_patch_batch(pairs, 16, 4, 77);
    REQUIRE(a.clean.values() == b.clean.values());
    REQUIRE(a.noisy.values() == b.noisy.values());
  }
  SECTION("full-image patch leaves only flip and rotation") {
    PatchBatch batch = sample_patch_batch(pairs, 24, 8, 78);
    for (const PatchRecord& r : batch.records) {
      REQUIRE(r.top == 0);
      REQUIRE(r.left == 0);
    }
  }
  SECTION("rotating by 180 twice composes to the identity") {
    Tensor src = testsupport::make_clean_image(8, 8, 1, 13);
    PatchRecord rot180;
    rot180.quarter_turns = 2;
    Tensor once = Tensor::zeros(Shape(1, 1, 8, 8));
    msanet::detail::copy_patch(src, once, 0, rot180, 8);
    Tensor twice = Tensor::zeros(Shape(1, 1, 8, 8));
    msanet::detail::copy_patch(once, twice, 0, rot180, 8);
    REQUIRE(twice.values() == src.values());
  }
  SECTION("augmentation commutes with the noise residual") {
    std::vector<ImageSample> residual_pairs;
    {
      ImageSample r;
      r.clean = sub(nullptr, pairs[0].noisy, pairs[0].clean);
      r.noisy = r.clean;
      r.source_path = "residual";
      residual_pairs.push_back(std::move(r));
    }
    PatchBatch a = sample_patch_batch(pairs, 16, 6, 79);
    PatchBatch b = sample_patch_batch(residual_pairs, 16, 6, 79);
    const Tensor residual = sub(nullptr, a.noisy, a.clean);
    REQUIRE(residual.values() == b.clean.values());
  }
  SECTION("patch larger than the image is rejected") {
    REQUIRE_THROWS_AS(sample_patch_batch(pairs, 25, 2, 80), ArgumentError);
  }
  SECTION("empty dataset is rejected") {
    std::vector<ImageSample> empty;
    REQUIRE_THROWS_AS(sample_patch_batch(empty, 8, 2, 81), ArgumentError);
  }
}

TEST_CASE("reflect padding", "[data]") {
  SECTION("pads to the next multiple and crops back") {
    Tensor x = testsupport::make_clean_image(50, 47, 3, 21);
    int ph = 0, pw = 0;
    Tensor padded = reflect_pad_to_multiple(x, 8, ph, pw);
    REQUIRE(padded.shape() == Shape(1, 3, 56, 48));
    REQUIRE(ph == 6);
    REQUIRE(pw == 1);
    Tensor back = crop_to(padded, 50, 47);
    REQUIRE(back.values() == x.values());
  }
  SECTION("reflection mirrors without repeating the edge row") {
    Tensor x = Tensor::from(Shape(1, 1, 3, 3), {1, 2, 3, 4, 5, 6, 7, 8, 9});
    int ph = 0, pw = 0;
    Tensor padded = reflect_pad_to_multiple(x, 4, ph, pw);
    REQUIRE(padded.at(0, 0, 3, 0) == 4.0f);  // row 3 reflects row 1
    REQUIRE(padded.at(0, 0, 0, 3) == 2.0f);  // col 3 reflects col 1
  }
  SECTION("already aligned input passes through") {
    Tensor x = Tensor::uniform(Shape(1, 1, 16, 8), 0.0f, 1.0f, 5);
    int ph = 0, pw = 0;
    Tensor padded = reflect_pad_to_multiple(x, 8, ph, pw);
    REQUIRE(padded.values() == x.values());
  }
}

TEST_CASE("dataset listing and manifests", "[data]") {
  const std::string dir = testsupport::fresh_temp_dir("ds");
  testsupport::write_image_dir(dir, 3, 16, 16, 3, 1);
  std::ofstream(dir + "/ignore.txt") << "not an image";

  SECTION("directory listing is sorted and filtered") {
    const std::vector<std::string> paths = list_images(dir);
    REQUIRE(paths.size() == 3);
    REQUIRE(paths[0] < paths[1]);
  }
  SECTION("manifest resolves relative paths") {
    std::ofstream(dir + "/set.txt") << "# comment\nimg_000.png\nimg_002.png\n";
    const std::vector<std::string> paths = read_manifest(dir + "/set.txt");
    REQUIRE(paths.size() == 2);
    REQUIRE(load_image(paths[1]).shape().c == 3);
  }
  SECTION("per-image noise seeds ignore sibling files") {
    const std::uint64_t a = image_noise_seed(5, dir + "/img_001.png");
    const std::uint64_t b = image_noise_seed(5, "/elsewhere/img_001.png");
    const std::uint64_t c = image_noise_seed(5, dir + "/img_002.png");
    REQUIRE(a == b);
    REQUIRE(a != c);
  }
}
