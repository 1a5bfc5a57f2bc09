// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "msanet/gradcheck.hpp"
#include "msanet/ops.hpp"
#include "support/oracles.hpp"

using namespace msanet;

namespace {

void require_close(const Tensor& got, const Tensor& want, double rtol) {
  REQUIRE(got.shape() == want.shape());
  for (std::int64_t i = 0; i < got.numel(); ++i) {
    const double g = got.data()[i];
    const double w = want.data()[i];
    const double tol = rtol * std::max({std::fabs(g), std::fabs(w), 1.0});
    INFO("element " << i << ": got " << g << " want " << w);
    REQUIRE(std::fabs(g - w) <= tol);
  }
}

ConvSpec random_conv_spec(Rng& rng, int cin, int cout) {
  ConvSpec sp;
  sp.in_channels = cin;
  sp.out_channels = cout;
  sp.kh = rng.next_below(2) == 0 ? 1 : 3;
  sp.kw = rng.next_below(2) == 0 ? 1 : 3;
  sp.sh = 1 + static_cast<int>(rng.next_below(2));
  sp.sw = 1 + static_cast<int>(rng.next_below(2));
  sp.ph = static_cast<int>(rng.next_below(3));
  sp.pw = static_cast<int>(rng.next_below(3));
  sp.dh = 1 + static_cast<int>(rng.next_below(2));
  sp.dw = 1 + static_cast<int>(rng.next_below(2));
  return sp;
}

}  // namespace

TEST_CASE("conv2d hand cases", "[ops]") {
  SECTION("all-ones 3x3 input and kernel, pad 1: overlap counts") {
    Tensor x = Tensor::constant(Shape(1, 1, 3, 3), 1.0f);
    Tensor w = Tensor::constant(Shape(1, 1, 3, 3), 1.0f);
    Tensor out = conv2d(nullptr, x, w, nullptr, ConvSpec::k3(1, 1));
    REQUIRE(out.at(0, 0, 1, 1) == 9.0f);
    REQUIRE(out.at(0, 0, 0, 0) == 4.0f);
    REQUIRE(out.at(0, 0, 2, 2) == 4.0f);
    REQUIRE(out.at(0, 0, 0, 1) == 6.0f);
    REQUIRE(out.at(0, 0, 1, 0) == 6.0f);
  }
  SECTION("5x5 ones, dilation 2, pad 2: center taps all land inside") {
    Tensor x = Tensor::constant(Shape(1, 1, 5, 5), 1.0f);
    Tensor w = Tensor::constant(Shape(1, 1, 3, 3), 1.0f);
    const ConvSpec sp = ConvSpec::k3(1, 1, 1, 2);
    Tensor out = conv2d(nullptr, x, w, nullptr, sp);
    REQUIRE(out.at(0, 0, 2, 2) == 9.0f);
    require_close(out, oracle::conv2d(x, w, nullptr, sp), 1e-6);
  }
  SECTION("output extent formula") {
    Tensor x = Tensor::zeros(Shape(1, 1, 8, 8));
    Tensor w = Tensor::zeros(Shape(1, 1, 3, 3));
    Tensor out = conv2d(nullptr, x, w, nullptr, ConvSpec::k3(1, 1, 2));
    REQUIRE(out.shape().h == 4);
    REQUIRE(out.shape().w == 4);
  }
  SECTION("channel mismatch") {
    Tensor x = Tensor::zeros(Shape(1, 2, 4, 4));
    Tensor w = Tensor::zeros(Shape(1, 1, 3, 3));
    REQUIRE_THROWS_AS(conv2d(nullptr, x, w, nullptr, ConvSpec::k3(1, 1)), ShapeError);
  }
  SECTION("degenerate output extent") {
    Tensor x = Tensor::zeros(Shape(1, 1, 2, 2));
    Tensor w = Tensor::zeros(Shape(1, 1, 3, 3));
    ConvSpec sp = ConvSpec::k3(1, 1);
    sp.ph = sp.pw = 0;
    sp.dh = sp.dw = 2;
    REQUIRE_THROWS_AS(conv2d(nullptr, x, w, nullptr, sp), ShapeError);
  }
}

TEST_CASE("conv2d matches the brute-force oracle on random shapes", "[ops]") {
  Rng rng(2024);
  for (int t = 0; t < 60; ++t) {
    const int cin = 1 + static_cast<int>(rng.next_below(4));
    const int cout = 1 + static_cast<int>(rng.next_below(4));
    ConvSpec sp = random_conv_spec(rng, cin, cout);
    const int h = 1 + static_cast<int>(rng.next_below(9));
    const int w = 1 + static_cast<int>(rng.next_below(9));
    if (sp.out_h(h) < 1 || sp.out_w(w) < 1) {
      --t;
      continue;
    }
    const int n = 1 + static_cast<int>(rng.next_below(3));
    Tensor x = Tensor::uniform(Shape(n, cin, h, w), -1.0f, 1.0f, rng.next_u64());
    Tensor wt = Tensor::uniform(Shape(cout, cin, sp.kh, sp.kw), -1.0f, 1.0f, rng.next_u64());
    Tensor b = Tensor::uniform(Shape(1, cout, 1, 1), -1.0f, 1.0f, rng.next_u64());
    require_close(conv2d(nullptr, x, wt, &b, sp), oracle::conv2d(x, wt, &b, sp), 1e-4);
  }
}

TEST_CASE("transpose_conv2d", "[ops]") {
  SECTION("doubles the spatial extent") {
    Tensor x = Tensor::zeros(Shape(1, 2, 4, 4));
    Tensor w = Tensor::zeros(Shape(2, 3, 4, 4));
    Tensor out = transpose_conv2d(nullptr, x, w, nullptr, ConvSpec::upsample2x(2, 3));
    REQUIRE(out.shape() == Shape(1, 3, 8, 8));
  }
  SECTION("all-zero weights produce an all-bias output") {
    Tensor x = Tensor::uniform(Shape(1, 2, 3, 3), -1.0f, 1.0f, 5);
    Tensor w = Tensor::zeros(Shape(2, 2, 4, 4));
    Tensor b = Tensor::from(Shape(1, 2, 1, 1), {0.5f, -0.25f});
    Tensor out = transpose_conv2d(nullptr, x, w, &b, ConvSpec::upsample2x(2, 2));
    for (int h = 0; h < 6; ++h)
      for (int ww = 0; ww < 6; ++ww) {
        REQUIRE(out.at(0, 0, h, ww) == 0.5f);
        REQUIRE(out.at(0, 1, h, ww) == -0.25f);
      }
  }
  SECTION("rejects non-doubling geometry") {
    Tensor x = Tensor::zeros(Shape(1, 1, 4, 4));
    Tensor w = Tensor::zeros(Shape(1, 1, 3, 3));
    ConvSpec sp = ConvSpec::k3(1, 1, 2);
    REQUIRE_THROWS_AS(transpose_conv2d(nullptr, x, w, nullptr, sp), ShapeError);
  }
  SECTION("matches the scatter oracle") {
    Rng rng(77);
    for (int t = 0; t < 20; ++t) {
      const int cin = 1 + static_cast<int>(rng.next_below(4));
      const int cout = 1 + static_cast<int>(rng.next_below(4));
      const int h = 1 + static_cast<int>(rng.next_below(8));
      const int w = 1 + static_cast<int>(rng.next_below(8));
      const ConvSpec sp = ConvSpec::upsample2x(cin, cout);
      Tensor x = Tensor::uniform(Shape(1, cin, h, w), -1.0f, 1.0f, rng.next_u64());
      Tensor wt = Tensor::uniform(Shape(cin, cout, 4, 4), -1.0f, 1.0f, rng.next_u64());
      Tensor b = Tensor::uniform(Shape(1, cout, 1, 1), -1.0f, 1.0f, rng.next_u64());
      require_close(transpose_conv2d(nullptr, x, wt, &b, sp), oracle::transpose_conv2d(x, wt, &b, sp), 1e-4);
    }
  }
  SECTION("adjoint identity against conv2d with shared weights") {
    Rng rng(99);
    for (int t = 0; t < 20; ++t) {
      const int cin = 1 + static_cast<int>(rng.next_below(4));
      const int cout = 1 + static_cast<int>(rng.next_below(4));
      const int h = 2 * (1 + static_cast<int>(rng.next_below(4)));
      const int w = 2 * (1 + static_cast<int>(rng.next_below(4)));
      const ConvSpec conv_sp = ConvSpec::upsample2x(cin, cout);  // k4 s2 p1 both ways
      ConvSpec fwd = conv_sp;
      fwd.in_channels = cin;
      fwd.out_channels = cout;
      Tensor x = Tensor::uniform(Shape(1, cin, h, w), -1.0f, 1.0f, rng.next_u64());
      Tensor wt = Tensor::uniform(Shape(cout, cin, 4, 4), -1.0f, 1.0f, rng.next_u64());
      Tensor y = conv2d(nullptr, x, wt, nullptr, fwd);
      Tensor u = Tensor::uniform(y.shape(), -1.0f, 1.0f, rng.next_u64());
      ConvSpec bwd = conv_sp;
      bwd.in_channels = cout;
      bwd.out_channels = cin;
      Tensor xt = transpose_conv2d(nullptr, u, wt, nullptr, bwd);
      REQUIRE(xt.shape() == x.shape());
      double lhs = 0.0, rhs = 0.0;
      for (std::int64_t i = 0; i < y.numel(); ++i) lhs += static_cast<double>(y.data()[i]) * u.data()[i];
      for (std::int64_t i = 0; i < x.numel(); ++i) rhs += static_cast<double>(x.data()[i]) * xt.data()[i];
      REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-4));
    }
  }
}

TEST_CASE("activations", "[ops]") {
  SECTION("leaky relu") {
    Tensor x = Tensor::from(Shape(1, 1, 1, 2), {1.0f, -1.0f});
    Tensor out = leaky_relu(nullptr, x, 0.2f);
    REQUIRE(out.data()[0] == 1.0f);
    REQUIRE(out.data()[1] == -0.2f);
  }
  SECTION("sigmoid midpoint and saturation") {
    Tensor x = Tensor::from(Shape(1, 1, 1, 3), {0.0f, 30.0f, -30.0f});
    Tensor out = sigmoid(nullptr, x);
    REQUIRE(out.data()[0] == 0.5f);
    REQUIRE(out.data()[1] == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(out.data()[2] == Catch::Approx(0.0).margin(1e-6));
    REQUIRE(std::isfinite(out.data()[1]));
    REQUIRE(std::isfinite(out.data()[2]));
  }
}

TEST_CASE("reductions", "[ops]") {
  SECTION("global average pooling") {
    Tensor c = Tensor::constant(Shape(2, 3, 4, 5), 0.7f);
    Tensor out = adaptive_avg_pool_global(nullptr, c);
    REQUIRE(out.shape() == Shape(2, 3, 1, 1));
    for (std::int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == Catch::Approx(0.7));

    Tensor q = Tensor::from(Shape(1, 1, 2, 2), {1, 2, 3, 4});
    REQUIRE(adaptive_avg_pool_global(nullptr, q).data()[0] == Catch::Approx(2.5));
  }
  SECTION("pooling gradient spreads uniformly") {
    Tensor q = Tensor::from(Shape(1, 1, 2, 2), {1, 2, 3, 4}).set_requires_grad(true);
    Tape tape;
    Tensor loss = sum_all(&tape, adaptive_avg_pool_global(&tape, q));
    tape.backward(loss);
    for (int i = 0; i < 4; ++i) REQUIRE(q.grad()[i] == 0.25f);
  }
  SECTION("channel mean") {
    Tensor x = Tensor::zeros(Shape(1, 2, 1, 1));
    x.at(0, 0, 0, 0) = 2.0f;
    x.at(0, 1, 0, 0) = 4.0f;
    REQUIRE(channel_mean(nullptr, x).data()[0] == 3.0f);

    Tensor one = Tensor::uniform(Shape(1, 1, 3, 3), -1.0f, 1.0f, 9);
    REQUIRE(channel_mean(nullptr, one).values() == one.values());

    Tensor c = Tensor::constant(Shape(1, 5, 2, 2), 0.3f);
    Tensor cm = channel_mean(nullptr, c);
    for (float v : cm.values()) REQUIRE(v == Catch::Approx(0.3));
  }
}

TEST_CASE("linear layer math", "[ops]") {
  SECTION("identity weight") {
    Tensor x = Tensor::uniform(Shape(2, 3, 1, 1), -1.0f, 1.0f, 4);
    Tensor w = Tensor::zeros(Shape(3, 3, 1, 1));
    for (int i = 0; i < 3; ++i) w.at(i, i, 0, 0) = 1.0f;
    REQUIRE(linear(nullptr, x, w, nullptr).values() == x.values());
  }
  SECTION("zero weight plus bias") {
    Tensor x = Tensor::uniform(Shape(2, 3, 1, 1), -1.0f, 1.0f, 4);
    Tensor w = Tensor::zeros(Shape(2, 3, 1, 1));
    Tensor b = Tensor::from(Shape(1, 2, 1, 1), {0.25f, -1.0f});
    Tensor out = linear(nullptr, x, w, &b);
    REQUIRE(out.at(0, 0, 0, 0) == 0.25f);
    REQUIRE(out.at(1, 1, 0, 0) == -1.0f);
  }
  SECTION("random case vs naive matvec") {
    Rng rng(31);
    for (int t = 0; t < 50; ++t) {
      const int cin = 1 + static_cast<int>(rng.next_below(8));
      const int cout = 1 + static_cast<int>(rng.next_below(8));
      const int n = 1 + static_cast<int>(rng.next_below(4));
      Tensor x = Tensor::uniform(Shape(n, cin, 1, 1), -1.0f, 1.0f, rng.next_u64());
      Tensor w = Tensor::uniform(Shape(cout, cin, 1, 1), -1.0f, 1.0f, rng.next_u64());
      Tensor b = Tensor::uniform(Shape(1, cout, 1, 1), -1.0f, 1.0f, rng.next_u64());
      require_close(linear(nullptr, x, w, &b), oracle::linear(x, w, &b), 1e-5);
    }
  }
}

TEST_CASE("bilinear sampling", "[ops]") {
  Tensor img = Tensor::from(Shape(1, 1, 2, 2), {1, 2, 3, 4});
  SECTION("integer grid point") { REQUIRE(bilinear_sample(img, 0, 0, 1.0f, 0.0f) == 2.0f); }
  SECTION("cell center averages all four") { REQUIRE(bilinear_sample(img, 0, 0, 0.5f, 0.5f) == 2.5f); }
  SECTION("zero padding outside the image") {
    REQUIRE(bilinear_sample(img, 0, 0, -0.5f, -0.5f) == 0.25f);
    REQUIRE(bilinear_sample(img, 0, 0, -1.5f, 0.0f) == 0.0f);
  }
  SECTION("partition of unity on a constant image") {
    Tensor c = Tensor::constant(Shape(1, 1, 6, 6), 0.1f);
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
      const float px = rng.uniform(1.0f, 4.0f);
      const float py = rng.uniform(1.0f, 4.0f);
      REQUIRE(bilinear_sample(c, 0, 0, px, py) == 0.1f);
    }
  }
  SECTION("matches the four-corner oracle at random points") {
    Tensor x = Tensor::uniform(Shape(1, 2, 5, 7), -1.0f, 1.0f, 90);
    Rng rng(91);
    for (int t = 0; t < 100; ++t) {
      const float px = rng.uniform(-2.0f, 8.0f);
      const float py = rng.uniform(-2.0f, 6.0f);
      const int c = static_cast<int>(rng.next_below(2));
      REQUIRE(bilinear_sample(x, 0, c, px, py) ==
              Catch::Approx(oracle::bilinear(x, 0, c, px, py)).margin(1e-5));
    }
  }
}

TEST_CASE("modulated deformable convolution", "[ops]") {
  const ConvSpec sp = ConvSpec::k3(3, 4);
  const int K = 9;

  SECTION("zero offsets and unit mask reduce exactly to conv2d") {
    Rng rng(123);
    for (int t = 0; t < 10; ++t) {
      const int h = 3 + static_cast<int>(rng.next_below(6));
      const int w = 3 + static_cast<int>(rng.next_below(6));
      Tensor x = Tensor::uniform(Shape(2, 3, h, w), -1.0f, 1.0f, rng.next_u64());
      Tensor wt = Tensor::uniform(Shape(4, 3, 3, 3), -1.0f, 1.0f, rng.next_u64());
      Tensor b = Tensor::uniform(Shape(1, 4, 1, 1), -1.0f, 1.0f, rng.next_u64());
      DeformField field;
      field.offsets = Tensor::zeros(Shape(2, 2 * K, h, w));
      field.mask = Tensor::constant(Shape(2, K, h, w), 1.0f);
      Tensor a = modulated_deform_conv(nullptr, x, field, wt, &b, sp);
      Tensor c = conv2d(nullptr, x, wt, &b, sp);
      REQUIRE(a.shape() == c.shape());
      for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == c.data()[i]);
    }
  }
  SECTION("zero mask leaves only the bias") {
    Tensor x = Tensor::uniform(Shape(1, 3, 5, 5), -1.0f, 1.0f, 7);
    Tensor wt = Tensor::uniform(Shape(4, 3, 3, 3), -1.0f, 1.0f, 8);
    Tensor b = Tensor::from(Shape(1, 4, 1, 1), {1.0f, 2.0f, 3.0f, 4.0f});
    DeformField field;
    field.offsets = Tensor::uniform(Shape(1, 2 * K, 5, 5), -1.0f, 1.0f, 9);
    field.mask = Tensor::zeros(Shape(1, K, 5, 5));
    Tensor out = modulated_deform_conv(nullptr, x, field, wt, &b, sp);
    for (int co = 0; co < 4; ++co)
      for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) REQUIRE(out.at(0, co, h, w) == static_cast<float>(co + 1));
  }
  SECTION("random offsets match the per-tap oracle") {
    Rng rng(321);
    for (int t = 0; t < 20; ++t) {
      const int cin = 1 + static_cast<int>(rng.next_below(3));
      const int cout = 1 + static_cast<int>(rng.next_below(3));
      const int h = 3 + static_cast<int>(rng.next_below(5));
      const int w = 3 + static_cast<int>(rng.next_below(5));
      const ConvSpec spec = ConvSpec::k3(cin, cout);
      Tensor x = Tensor::uniform(Shape(1, cin, h, w), -1.0f, 1.0f, rng.next_u64());
      Tensor wt = Tensor::uniform(Shape(cout, cin, 3, 3), -1.0f, 1.0f, rng.next_u64());
      Tensor b = Tensor::uniform(Shape(1, cout, 1, 1), -1.0f, 1.0f, rng.next_u64());
      DeformField field;
      field.offsets = Tensor::uniform(Shape(1, 2 * K, h, w), -1.0f, 1.0f, rng.next_u64());
      field.mask = Tensor::uniform(Shape(1, K, h, w), 0.0f, 1.0f, rng.next_u64());
      require_close(modulated_deform_conv(nullptr, x, field, wt, &b, spec),
                    oracle::modulated_deform_conv(x, field.offsets, field.mask, wt, &b, spec), 1e-4);
    }
  }
  SECTION("field shape validation") {
    Tensor x = Tensor::zeros(Shape(1, 3, 5, 5));
    Tensor wt = Tensor::zeros(Shape(4, 3, 3, 3));
    DeformField field;
    field.offsets = Tensor::zeros(Shape(1, 2 * K, 4, 5));
    field.mask = Tensor::zeros(Shape(1, K, 5, 5));
    REQUIRE_THROWS_AS(modulated_deform_conv(nullptr, x, field, wt, nullptr, sp), ShapeError);
  }
}

TEST_CASE("every operator passes its finite-difference check", "[ops]") {
  for (const std::string& id : grad_check_op_ids()) {
    INFO(id);
    REQUIRE(grad_check(id, 17) <= grad_check_tolerance(id));
  }
}
