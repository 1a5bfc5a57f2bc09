// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "msanet/gradcheck.hpp"
#include "msanet/tensor.hpp"

using namespace msanet;

TEST_CASE("tensor construction", "[tensor]") {
  SECTION("constant fill") {
    Tensor t = Tensor::zeros(Shape(1, 1, 2, 2));
    REQUIRE(t.numel() == 4);
    for (float v : t.values()) REQUIRE(v == 0.0f);
  }
  SECTION("explicit fill uses row-major NCHW order") {
    Tensor t = Tensor::from(Shape(1, 1, 2, 2), {1, 2, 3, 4});
    REQUIRE(t.at(0, 0, 1, 0) == 3.0f);
    REQUIRE(t.at(0, 0, 0, 1) == 2.0f);
  }
  SECTION("explicit fill length mismatch") {
    REQUIRE_THROWS_AS(Tensor::from(Shape(1, 1, 2, 2), {1, 2, 3}), ShapeError);
  }
  SECTION("negative extent") {
    REQUIRE_THROWS_AS(Tensor::zeros(Shape(1, -1, 2, 2)), ShapeError);
  }
  SECTION("uniform fill is deterministic per seed") {
    Tensor a = Tensor::uniform(Shape(1, 1, 2, 2), -1.0f, 1.0f, 7);
    Tensor b = Tensor::uniform(Shape(1, 1, 2, 2), -1.0f, 1.0f, 7);
    Tensor c = Tensor::uniform(Shape(1, 1, 2, 2), -1.0f, 1.0f, 8);
    REQUIRE(a.values() == b.values());
    REQUIRE(a.values() != c.values());
  }
}

TEST_CASE("elementwise ops", "[tensor]") {
  SECTION("add") {
    Tensor a = Tensor::from(Shape(1, 1, 1, 2), {1, 2});
    Tensor b = Tensor::from(Shape(1, 1, 1, 2), {3, 4});
    Tensor out = add(nullptr, a, b);
    REQUIRE(out.values() == std::vector<float>{4, 6});
  }
  SECTION("scale") {
    Tensor a = Tensor::from(Shape(1, 1, 2, 2), {1, 2, 3, 4});
    REQUIRE(scale(nullptr, a, 2.0f).values() == std::vector<float>{2, 4, 6, 8});
  }
  SECTION("per-channel broadcast mul") {
    Tensor a = Tensor::constant(Shape(1, 2, 2, 2), 1.0f);
    Tensor f = Tensor::from(Shape(1, 2, 1, 1), {2.0f, 5.0f});
    Tensor out = mul(nullptr, a, f);
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w) {
        REQUIRE(out.at(0, 0, h, w) == 2.0f);
        REQUIRE(out.at(0, 1, h, w) == 5.0f);
      }
  }
  SECTION("per-position broadcast mul") {
    Tensor a = Tensor::constant(Shape(1, 2, 1, 2), 3.0f);
    Tensor f = Tensor::from(Shape(1, 1, 1, 2), {1.0f, -1.0f});
    Tensor out = mul(nullptr, a, f);
    REQUIRE(out.at(0, 0, 0, 0) == 3.0f);
    REQUIRE(out.at(0, 1, 0, 1) == -3.0f);
  }
  SECTION("incompatible shapes") {
    Tensor a = Tensor::zeros(Shape(1, 2, 2, 2));
    Tensor b = Tensor::zeros(Shape(1, 3, 2, 2));
    REQUIRE_THROWS_AS(add(nullptr, a, b), ShapeError);
  }
}

TEST_CASE("channel concat and slice", "[tensor]") {
  Tensor a = Tensor::uniform(Shape(2, 2, 3, 3), -1.0f, 1.0f, 1);
  Tensor b = Tensor::uniform(Shape(2, 3, 3, 3), -1.0f, 1.0f, 2);

  SECTION("band layout") {
    Tensor out = concat_channels(nullptr, {a, b});
    REQUIRE(out.shape() == Shape(2, 5, 3, 3));
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int h = 0; h < 3; ++h)
          for (int w = 0; w < 3; ++w) REQUIRE(out.at(n, 2 + c, h, w) == b.at(n, c, h, w));
  }
  SECTION("single part is the identity") {
    Tensor out = concat_channels(nullptr, {a});
    REQUIRE(out.values() == a.values());
  }
  SECTION("three 8-channel parts make 24 channels") {
    Tensor p = Tensor::zeros(Shape(1, 8, 2, 2));
    REQUIRE(concat_channels(nullptr, {p, p, p}).shape().c == 24);
  }
  SECTION("empty list") {
    REQUIRE_THROWS_AS(concat_channels(nullptr, {}), ArgumentError);
  }
  SECTION("mismatched extents") {
    Tensor c = Tensor::zeros(Shape(2, 1, 4, 3));
    REQUIRE_THROWS_AS(concat_channels(nullptr, {a, c}), ShapeError);
  }
  SECTION("slicing recovers each part exactly") {
    Tensor out = concat_channels(nullptr, {a, b});
    REQUIRE(slice_channels(nullptr, out, 0, 2).values() == a.values());
    REQUIRE(slice_channels(nullptr, out, 2, 3).values() == b.values());
  }
}

TEST_CASE("backward basics", "[tensor]") {
  SECTION("sum of inputs gives all-ones gradient") {
    Tensor x = Tensor::uniform(Shape(2, 3, 4, 4), -1.0f, 1.0f, 3).set_requires_grad(true);
    Tape tape;
    Tensor loss = sum_all(&tape, x);
    tape.backward(loss);
    for (std::int64_t i = 0; i < x.numel(); ++i) REQUIRE(x.grad()[i] == 1.0f);
  }
  SECTION("all-ones gradient survives graph depth") {
    Tensor x = Tensor::uniform(Shape(1, 1, 2, 2), -1.0f, 1.0f, 4).set_requires_grad(true);
    Tape tape;
    Tensor y = x;
    Tensor zero = Tensor::zeros(x.shape());
    for (int d = 0; d < 12; ++d) y = add(&tape, y, zero);
    Tensor loss = sum_all(&tape, y);
    tape.backward(loss);
    for (std::int64_t i = 0; i < x.numel(); ++i) REQUIRE(x.grad()[i] == 1.0f);
  }
  SECTION("d(x*x) = 2x") {
    Tensor x = Tensor::from(Shape(1, 1, 1, 2), {1, 2}).set_requires_grad(true);
    Tape tape;
    Tensor loss = sum_all(&tape, mul(&tape, x, x));
    tape.backward(loss);
    REQUIRE(x.grad()[0] == Catch::Approx(2.0));
    REQUIRE(x.grad()[1] == Catch::Approx(4.0));
  }
  SECTION("non-scalar loss is rejected") {
    Tensor x = Tensor::zeros(Shape(1, 1, 2, 2)).set_requires_grad(true);
    Tape tape;
    Tensor y = add(&tape, x, x);
    REQUIRE_THROWS_AS(tape.backward(y), ContractError);
  }
  SECTION("gradients accumulate additively until zeroed") {
    Tensor x = Tensor::from(Shape(1, 1, 1, 1), {2.0f}).set_requires_grad(true);
    {
      Tape tape;
      Tensor loss = sum_all(&tape, x);
      tape.backward(loss);
    }
    {
      Tape tape;
      Tensor loss = sum_all(&tape, x);
      tape.backward(loss);
    }
    REQUIRE(x.grad()[0] == 2.0f);
    x.zero_grad();
    REQUIRE(x.grad()[0] == 0.0f);
  }
  SECTION("shared parameter feeding two consumers accumulates both paths") {
    Tensor x = Tensor::from(Shape(1, 1, 1, 1), {3.0f}).set_requires_grad(true);
    Tensor two = Tensor::constant(Shape(1, 1, 1, 1), 2.0f);
    Tape tape;
    Tensor a = mul(&tape, x, two);
    Tensor b = mul(&tape, x, x);
    Tensor loss = sum_all(&tape, add(&tape, a, b));
    tape.backward(loss);
    REQUIRE(x.grad()[0] == Catch::Approx(2.0 + 6.0));
  }
}

TEST_CASE("recording then discarding a tape leaves data unchanged", "[tensor]") {
  Tensor x = Tensor::uniform(Shape(1, 2, 3, 3), -1.0f, 1.0f, 5).set_requires_grad(true);
  const std::vector<float> before = x.values();
  Tape tape;
  Tensor y = mul(&tape, x, x);
  Tensor z = add(&tape, y, x);
  REQUIRE(tape.size() == 2);
  tape.clear();
  REQUIRE(tape.empty());
  REQUIRE(x.values() == before);
  REQUIRE(z.numel() == x.numel());
}

TEST_CASE("gradient checker rejects unknown op ids", "[tensor]") {
  REQUIRE_THROWS_AS(grad_check("no_such_op", 1), ArgumentError);
}

TEST_CASE("gradients of elementwise composites match finite differences", "[tensor]") {
  for (const char* id : {"add", "sub", "mul", "mul_per_channel", "mul_per_position", "scale",
                         "concat_slice"}) {
    INFO(id);
    REQUIRE(grad_check(id, 11) <= grad_check_tolerance(id));
  }
}
