#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "fracseg/tensor.hpp"

using namespace fracseg;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, bool requires_grad = false,
                     float scale = 1.0f) {
  Tensor t(std::move(shape), requires_grad);
  Rng rng(seed);
  for (float& v : t.value()) v = uniform(rng, -scale, scale);
  return t;
}

// Naive O(n*k) convolution oracle in double precision.
std::vector<double> conv3d_oracle(const Tensor& in, const Tensor& w, const Tensor& b,
                                  const ConvSpec& sp) {
  const int N = in.dim(0), C = in.dim(1), D = in.dim(2), H = in.dim(3), W = in.dim(4);
  const int OD = sp.out_extent(0, D), OH = sp.out_extent(1, H), OW = sp.out_extent(2, W);
  std::vector<double> out(static_cast<size_t>(N) * sp.out_channels * OD * OH * OW);
  size_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int oc = 0; oc < sp.out_channels; ++oc)
      for (int od = 0; od < OD; ++od)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow, ++oi) {
            double acc = b.value()[static_cast<size_t>(oc)];
            for (int ic = 0; ic < C; ++ic)
              for (int kd = 0; kd < sp.kernel[0]; ++kd)
                for (int kh = 0; kh < sp.kernel[1]; ++kh)
                  for (int kw = 0; kw < sp.kernel[2]; ++kw) {
                    const int id = od * sp.stride[0] - sp.padding[0] + kd;
                    const int ih = oh * sp.stride[1] - sp.padding[1] + kh;
                    const int iw = ow * sp.stride[2] - sp.padding[2] + kw;
                    if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                    const size_t ii =
                        ((static_cast<size_t>(n) * C + ic) * D + id) * H * W +
                        static_cast<size_t>(ih) * W + iw;
                    const size_t wi =
                        (((static_cast<size_t>(oc) * C + ic) * sp.kernel[0] + kd) *
                             sp.kernel[1] +
                         kh) * sp.kernel[2] + kw;
                    acc += static_cast<double>(in.value()[ii]) * w.value()[wi];
                  }
            out[oi] = acc;
          }
  return out;
}

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

}  // namespace

TEST_CASE("conv3d 1x1x1 kernel scales input") {
  Tensor in = Tensor::full({1, 1, 3, 3, 3}, 1.0f);
  ConvSpec sp = ConvSpec::cubic(1, 1, 0, 1, 1);
  Tensor w = Tensor::full({1, 1, 1, 1, 1}, 2.0f);
  Tensor b({1});
  Tape tape;
  Tensor out = conv3d(tape, in, w, b, sp);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 3, 3, 3});
  for (float v : out.value()) CHECK(v == 2.0f);
}

TEST_CASE("conv3d matches nested-loop oracle") {
  Tensor in = random_tensor({1, 1, 4, 4, 4}, 11);
  ConvSpec sp = ConvSpec::cubic(3, 1, 1, 1, 2);
  Tensor w = random_tensor({2, 1, 3, 3, 3}, 12);
  Tensor b = random_tensor({2}, 13);
  Tape tape;
  Tensor out = conv3d(tape, in, w, b, sp);
  const auto expect = conv3d_oracle(in, w, b, sp);
  REQUIRE(out.value().size() == expect.size());
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(out.value()[i] - expect[i]) < 1e-5);
}

TEST_CASE("conv3d multi-channel strided matches oracle") {
  Tensor in = random_tensor({2, 3, 5, 6, 7}, 21);
  ConvSpec sp;
  sp.kernel[0] = 2; sp.kernel[1] = 3; sp.kernel[2] = 2;
  sp.stride[0] = 2; sp.stride[1] = 1; sp.stride[2] = 2;
  sp.padding[0] = 1; sp.padding[1] = 1; sp.padding[2] = 0;
  sp.in_channels = 3; sp.out_channels = 2;
  Tensor w = random_tensor({2, 3, 2, 3, 2}, 22);
  Tensor b = random_tensor({2}, 23);
  Tape tape;
  Tensor out = conv3d(tape, in, w, b, sp);
  const auto expect = conv3d_oracle(in, w, b, sp);
  REQUIRE(out.value().size() == expect.size());
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(out.value()[i] - expect[i]) < 1e-5);
}

TEST_CASE("conv3d stride-2 output shape") {
  Tensor in = random_tensor({1, 1, 4, 4, 4}, 3);
  ConvSpec sp = ConvSpec::cubic(2, 2, 0, 1, 1);
  Tensor w = random_tensor({1, 1, 2, 2, 2}, 4);
  Tensor b({1});
  Tape tape;
  Tensor out = conv3d(tape, in, w, b, sp);
  CHECK(out.shape() == std::vector<int>{1, 1, 2, 2, 2});
}

TEST_CASE("conv3d rejects channel mismatch with axis named") {
  Tensor in = random_tensor({1, 2, 4, 4, 4}, 5);
  ConvSpec sp = ConvSpec::cubic(3, 1, 1, 1, 1);
  Tensor w = random_tensor({1, 1, 3, 3, 3}, 6);
  Tensor b({1});
  Tape tape;
  CHECK_THROWS_MATCHES(conv3d(tape, in, w, b, sp), ShapeError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("channel axis")));
}

TEST_CASE("conv_transpose3d doubles spatial extents with k3 s2 p1 op1") {
  Tensor in = random_tensor({1, 2, 4, 4, 4}, 7);
  ConvSpec sp = ConvSpec::cubic(3, 2, 1, 2, 1, 1);
  Tensor w = random_tensor({2, 1, 3, 3, 3}, 8);
  Tensor b({1});
  Tape tape;
  Tensor out = conv_transpose3d(tape, in, w, b, sp);
  CHECK(out.shape() == std::vector<int>{1, 1, 8, 8, 8});
}

TEST_CASE("conv_transpose3d impulse response with unit 1x1x1 kernel") {
  Tensor in({1, 1, 3, 3, 3});
  in.value()[static_cast<size_t>((1 * 3 + 1) * 3 + 1)] = 1.0f;  // center
  ConvSpec sp = ConvSpec::cubic(1, 2, 0, 1, 1);
  Tensor w = Tensor::full({1, 1, 1, 1, 1}, 1.0f);
  Tensor b({1});
  Tape tape;
  Tensor out = conv_transpose3d(tape, in, w, b, sp);
  REQUIRE(out.shape() == std::vector<int>{1, 1, 5, 5, 5});
  for (int d = 0; d < 5; ++d)
    for (int h = 0; h < 5; ++h)
      for (int w2 = 0; w2 < 5; ++w2) {
        const float v = out.value()[static_cast<size_t>((d * 5 + h) * 5 + w2)];
        if (d == 2 && h == 2 && w2 == 2)
          CHECK(v == 1.0f);
        else
          CHECK(v == 0.0f);
      }
}

TEST_CASE("conv_transpose3d rejects output_padding >= stride") {
  Tensor in = random_tensor({1, 1, 2, 2, 2}, 9);
  ConvSpec sp = ConvSpec::cubic(3, 2, 1, 1, 1, 2);
  Tensor w = random_tensor({1, 1, 3, 3, 3}, 10);
  Tensor b({1});
  Tape tape;
  CHECK_THROWS_AS(conv_transpose3d(tape, in, w, b, sp), ShapeError);
}

TEST_CASE("conv_transpose3d is the adjoint of conv3d") {
  // <conv(x), y> == <x, conv_transpose(y)> with shared weights, zero bias
  ConvSpec sp = ConvSpec::cubic(3, 2, 1, 1, 1);
  Tensor x = random_tensor({1, 1, 4, 4, 4}, 31);
  Tensor y = random_tensor({1, 1, 2, 2, 2}, 32);
  Tensor w = random_tensor({1, 1, 3, 3, 3}, 33);
  Tensor b({1});
  Tape tape;
  Tensor cx = conv3d(tape, x, w, b, sp);
  REQUIRE(cx.shape() == y.shape());
  ConvSpec tsp = ConvSpec::cubic(3, 2, 1, 1, 1, 1);
  Tensor ty = conv_transpose3d(tape, y, w, b, tsp);
  REQUIRE(ty.shape() == x.shape());
  const double lhs = dot(cx.value(), y.value());
  const double rhs = dot(x.value(), ty.value());
  CHECK(std::abs(lhs - rhs) < 1e-4 * std::max(1.0, std::abs(lhs)));
}

TEST_CASE("adjointness of implemented backward passes") {
  // <L x, y> == <x, L^T y> where L^T is the tape backward of the op,
  // with zero bias so the map is linear
  auto adjoint_check = [](auto&& forward, const std::vector<int>& in_shape, uint64_t seed) {
    Tensor x = random_tensor(in_shape, seed, true);
    Tape tape;
    Tensor out = forward(tape, x);
    Tensor y = random_tensor(out.shape(), seed + 1);
    const double lhs = dot(out.value(), y.value());
    out.grad() = y.value();
    x.zero_grad();
    tape.backward_from(out);
    const double rhs = dot(x.value(), x.grad());
    CHECK(std::abs(lhs - rhs) < 1e-4 * std::max(1.0, std::abs(lhs)));
  };

  ConvSpec sp = ConvSpec::cubic(3, 1, 1, 2, 2);
  Tensor w = random_tensor({2, 2, 3, 3, 3}, 41);
  Tensor b({2});
  adjoint_check([&](Tape& t, Tensor& x) { return conv3d(t, x, w, b, sp); },
                {1, 2, 4, 4, 4}, 42);

  ConvSpec ssp = ConvSpec::cubic(3, 2, 1, 2, 2);
  adjoint_check([&](Tape& t, Tensor& x) { return conv3d(t, x, w, b, ssp); },
                {1, 2, 4, 4, 4}, 44);

  ConvSpec tsp = ConvSpec::cubic(3, 2, 1, 2, 2, 1);
  adjoint_check([&](Tape& t, Tensor& x) { return conv_transpose3d(t, x, w, b, tsp); },
                {1, 2, 3, 3, 3}, 46);

  adjoint_check([&](Tape& t, Tensor& x) { return upsample_trilinear(t, x, 2); },
                {1, 2, 3, 3, 3}, 48);
}

TEST_CASE("max_pool3d basics and oracle") {
  SECTION("constant window") {
    Tensor in = Tensor::full({1, 1, 2, 2, 2}, 7.0f);
    Tape tape;
    Tensor out = max_pool3d(tape, in);
    REQUIRE(out.size() == 1);
    CHECK(out.value()[0] == 7.0f);
  }
  SECTION("argmax gradient routing") {
    Tensor in({1, 1, 2, 2, 2}, true);
    in.value()[5] = 9.0f;
    Tape tape;
    Tensor out = max_pool3d(tape, in);
    CHECK(out.value()[0] == 9.0f);
    out.grad()[0] = 1.0f;
    tape.backward_from(out);
    for (size_t i = 0; i < 8; ++i)
      CHECK(in.grad()[i] == (i == 5 ? 1.0f : 0.0f));
  }
  SECTION("random 4^3 equals brute-force window max") {
    Tensor in = random_tensor({1, 2, 4, 4, 4}, 55);
    Tape tape;
    Tensor out = max_pool3d(tape, in);
    for (int c = 0; c < 2; ++c)
      for (int od = 0; od < 2; ++od)
        for (int oh = 0; oh < 2; ++oh)
          for (int ow = 0; ow < 2; ++ow) {
            float best = -1e30f;
            for (int dd = 0; dd < 2; ++dd)
              for (int dh = 0; dh < 2; ++dh)
                for (int dw = 0; dw < 2; ++dw) {
                  const size_t i =
                      ((static_cast<size_t>(c) * 4 + od * 2 + dd) * 4 + oh * 2 + dh) * 4 +
                      ow * 2 + dw;
                  best = std::max(best, in.value()[i]);
                }
            const size_t oi = ((static_cast<size_t>(c) * 2 + od) * 2 + oh) * 2 + ow;
            CHECK(out.value()[oi] == best);
          }
  }
  SECTION("odd extent rejected") {
    Tensor in({1, 1, 3, 4, 4});
    Tape tape;
    CHECK_THROWS_MATCHES(max_pool3d(tape, in), ShapeError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("pad")));
  }
}

TEST_CASE("batch_norm moments") {
  Tensor gamma = Tensor::full({2}, 1.0f);
  Tensor beta({2});
  SECTION("already normalized input is preserved") {
    // construct exact zero-mean unit-variance per channel
    Tensor in({1, 2, 2, 2, 2});
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 8; ++i)
        in.value()[static_cast<size_t>(c * 8 + i)] = (i % 2 == 0) ? 1.0f : -1.0f;
    BatchNormStats stats(2);
    Tape tape;
    Tensor out = batch_norm(tape, in, gamma, beta, stats, BnMode::kTrain);
    for (size_t i = 0; i < out.value().size(); ++i)
      CHECK(std::abs(out.value()[i] - in.value()[i]) < 1e-4);
  }
  SECTION("constant input collapses to beta") {
    Tensor in = Tensor::full({1, 2, 2, 2, 2}, 3.5f);
    Tensor beta2 = Tensor::full({2}, 0.25f);
    BatchNormStats stats(2);
    Tape tape;
    Tensor out = batch_norm(tape, in, gamma, beta2, stats, BnMode::kTrain);
    for (float v : out.value()) CHECK(std::abs(v - 0.25f) < 1e-4);
  }
  SECTION("random input normalized per channel") {
    Tensor in = random_tensor({2, 3, 4, 4, 4}, 77, false, 2.0f);
    Tensor g3 = Tensor::full({3}, 1.0f);
    Tensor b3({3});
    BatchNormStats stats(3);
    Tape tape;
    Tensor out = batch_norm(tape, in, g3, b3, stats, BnMode::kTrain);
    for (int c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0;
      int cnt = 0;
      for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 64; ++i, ++cnt) {
          const float v = out.value()[static_cast<size_t>((n * 3 + c) * 64 + i)];
          s += v;
          s2 += static_cast<double>(v) * v;
        }
      const double mean = s / cnt;
      const double var = s2 / cnt - mean * mean;
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
  }
  SECTION("eval mode uses running stats") {
    Tensor in = random_tensor({1, 2, 2, 2, 2}, 78);
    BatchNormStats stats(2);
    stats.running_mean = {0.0f, 0.0f};
    stats.running_var = {1.0f, 1.0f};
    Tape tape;
    tape.set_recording(false);
    Tensor out = batch_norm(tape, in, gamma, beta, stats, BnMode::kEval);
    for (size_t i = 0; i < out.value().size(); ++i)
      CHECK(std::abs(out.value()[i] - in.value()[i] / std::sqrt(1.0f + 1e-5f)) < 1e-6);
  }
}

TEST_CASE("activations") {
  Tape tape;
  Tensor in = Tensor::from_data({1, 1, 1, 1, 3}, {-1.0f, 0.0f, 2.0f});
  Tensor r = relu(tape, in);
  CHECK(r.value() == std::vector<float>{0.0f, 0.0f, 2.0f});
  Tensor z = Tensor::from_data({1}, {0.0f});
  CHECK(sigmoid(tape, z).value()[0] == 0.5f);
  Tensor logits = Tensor::full({1, 2, 2, 2, 2}, 1.25f);
  Tensor sm = softmax_channel(tape, logits);
  for (float v : sm.value()) CHECK(std::abs(v - 0.5f) < 1e-6);
}

TEST_CASE("softmax_channel output is a per-voxel simplex") {
  Tensor in = random_tensor({2, 3, 2, 2, 2}, 91, false, 4.0f);
  Tape tape;
  Tensor out = softmax_channel(tape, in);
  const int64_t sp = 8;
  for (int n = 0; n < 2; ++n)
    for (int64_t i = 0; i < sp; ++i) {
      float sum = 0.0f;
      for (int c = 0; c < 3; ++c) {
        const float v = out.value()[static_cast<size_t>((n * 3 + c) * sp + i)];
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0f) < 1e-5);
    }
}

TEST_CASE("upsample_trilinear") {
  SECTION("constant field stays constant") {
    Tensor in = Tensor::full({1, 1, 2, 2, 2}, 0.3f);
    Tape tape;
    Tensor out = upsample_trilinear(tape, in, 2);
    REQUIRE(out.shape() == std::vector<int>{1, 1, 4, 4, 4});
    for (float v : out.value()) CHECK(std::abs(v - 0.3f) < 1e-6);
  }
  SECTION("factor 1 is identity") {
    Tensor in = random_tensor({1, 2, 3, 3, 3}, 92);
    Tape tape;
    Tensor out = upsample_trilinear(tape, in, 1);
    CHECK(out.value() == in.value());
  }
  SECTION("linear ramp preserved at interior points") {
    // ramp along width: value = w
    Tensor in({1, 1, 1, 1, 4});
    for (int w = 0; w < 4; ++w) in.value()[static_cast<size_t>(w)] = static_cast<float>(w);
    Tape tape;
    Tensor out = upsample_trilinear(tape, in, 2);
    // interior output w maps to source (w+0.5)/2-0.5; ramp value equals that
    for (int w = 1; w < 7; ++w) {
      const float expect = (w + 0.5f) / 2.0f - 0.5f;
      CHECK(std::abs(out.value()[static_cast<size_t>(w)] - expect) < 1e-5);
    }
  }
  SECTION("adjointness of upsample backward") {
    Tensor x = random_tensor({1, 1, 2, 2, 2}, 93, true);
    Tape tape;
    Tensor out = upsample_trilinear(tape, x, 2);
    Tensor y = random_tensor(out.shape(), 94);
    const double lhs = dot(out.value(), y.value());
    out.grad() = y.value();
    tape.backward_from(out);
    const double rhs = dot(x.value(), x.grad());
    CHECK(std::abs(lhs - rhs) < 1e-4 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("grad_check on elementary functions") {
  SECTION("sum of squares") {
    Tensor p = random_tensor({8}, 101);
    const double err = grad_check(
        [](Tape& t, Tensor& x) { return sum_squares(t, x); }, p);
    CHECK(err < 1e-3);
  }
  SECTION("conv3d gradients") {
    // normalized reduction keeps the scalar O(1): a large f32 loss drowns
    // an h=1e-3 central difference in round-off
    ConvSpec sp = ConvSpec::cubic(3, 1, 1, 1, 2);
    Tensor w = random_tensor({2, 1, 3, 3, 3}, 102, true, 0.5f);
    Tensor b = random_tensor({2}, 103, true, 0.5f);
    Tensor p = random_tensor({1, 1, 4, 4, 4}, 104, false, 0.5f);
    auto mean_sq = [](Tape& t, const Tensor& x) {
      return scale(t, sum_squares(t, x), 1.0f / static_cast<float>(x.size()));
    };
    const double err = grad_check(
        [&](Tape& t, Tensor& x) { return mean_sq(t, conv3d(t, x, w, b, sp)); }, p);
    CHECK(err < 1e-3);
    const double werr = grad_check(
        [&](Tape& t, Tensor& wx) { return mean_sq(t, conv3d(t, p, wx, b, sp)); }, w);
    CHECK(werr < 1e-3);
  }
  SECTION("sigmoid chain") {
    Tensor p = random_tensor({6}, 105);
    const double err = grad_check(
        [](Tape& t, Tensor& x) { return sum_squares(t, sigmoid(t, x)); }, p);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("forward determinism") {
  ConvSpec sp = ConvSpec::cubic(3, 1, 1, 2, 2);
  Tensor w = random_tensor({2, 2, 3, 3, 3}, 111);
  Tensor b = random_tensor({2}, 112);
  Tensor x = random_tensor({1, 2, 6, 6, 6}, 113);
  Tape t1, t2;
  Tensor a = conv3d(t1, x, w, b, sp);
  Tensor c = conv3d(t2, x, w, b, sp);
  CHECK(a.value() == c.value());
}

TEST_CASE("tensor snapshot round-trip") {
  Tensor t = random_tensor({2, 3, 4}, 121);
  std::stringstream ss;
  write_tensor_snapshot(ss, t);
  Tensor back = read_tensor_snapshot(ss);
  CHECK(back.shape() == t.shape());
  CHECK(back.value() == t.value());
}

TEST_CASE("tensor snapshot rejects truncation") {
  Tensor t = random_tensor({4, 4}, 122);
  std::stringstream ss;
  write_tensor_snapshot(ss, t);
  std::string s = ss.str();
  s.resize(s.size() - 8);
  std::stringstream cut(s);
  CHECK_THROWS_AS(read_tensor_snapshot(cut), DataError);
}
