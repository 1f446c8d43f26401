// Tensor core: forward semantics against naive reference implementations,
// hand-computed worked examples, the backward contract, and finite-difference
// gradient verification of every op.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "fhseg/errors.hpp"
#include "fhseg/gradcheck.hpp"
#include "fhseg/ops.hpp"
#include "fhseg/tensor.hpp"
#include "fhseg/util.hpp"

using namespace fhseg;

namespace {

// ---------------------------------------------------------------------------
// Reference implementations, written straight from the definitions. They share
// no code with the library: plain nested loops, no graph, no tricks.
// ---------------------------------------------------------------------------

std::vector<double> conv2d_ref(const Tensor& in, const Tensor& k, const Tensor& bias, int stride,
                               int pad, std::vector<int>& out_shape) {
  const int B = in.dim(0), Ci = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int Co = k.dim(0), K = k.dim(2);
  const int Ho = (H + 2 * pad - K) / stride + 1;
  const int Wo = (W + 2 * pad - K) / stride + 1;
  out_shape = {B, Co, Ho, Wo};
  std::vector<double> out(static_cast<std::size_t>(B) * Co * Ho * Wo, 0.0);
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Co; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = bias.data[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < Ci; ++ci)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;  // zero padding
                acc += in.data[((static_cast<std::size_t>(b) * Ci + ci) * H + iy) * W + ix] *
                       k.data[((static_cast<std::size_t>(co) * Ci + ci) * K + ky) * K + kx];
              }
          out[((static_cast<std::size_t>(b) * Co + co) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

std::vector<double> batch_norm_ref(const Tensor& in, const Tensor& gamma, const Tensor& beta,
                                   double eps) {
  const int B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const double n = static_cast<double>(B) * H * W;
  std::vector<double> out(in.numel());
  for (int c = 0; c < C; ++c) {
    double mean = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i)
        mean += in.data[(static_cast<std::size_t>(b) * C + c) * H * W + i];
    mean /= n;
    double var = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i) {
        const double d = in.data[(static_cast<std::size_t>(b) * C + c) * H * W + i] - mean;
        var += d * d;
      }
    var /= n;  // biased, matching normalization over the actual batch
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H * W; ++i) {
        const std::size_t idx = (static_cast<std::size_t>(b) * C + c) * H * W + i;
        out[idx] = gamma.data[static_cast<std::size_t>(c)] * (in.data[idx] - mean) /
                       std::sqrt(var + eps) +
                   beta.data[static_cast<std::size_t>(c)];
      }
  }
  return out;
}

std::vector<double> maxpool_ref(const Tensor& in, int f, std::vector<int>& out_shape) {
  const int B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const int Ho = H / f, Wo = W / f;
  out_shape = {B, C, Ho, Wo};
  std::vector<double> out(static_cast<std::size_t>(B) * C * Ho * Wo);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double best = -1e300;
          for (int ky = 0; ky < f; ++ky)
            for (int kx = 0; kx < f; ++kx)
              best = std::max(best, in.data[((static_cast<std::size_t>(b) * C + c) * H +
                                             oy * f + ky) *
                                                W +
                                            ox * f + kx]);
          out[((static_cast<std::size_t>(b) * C + c) * Ho + oy) * Wo + ox] = best;
        }
  return out;
}

TensorPtr rand_tensor(std::vector<int> shape, std::mt19937_64& eng, double lo = -1.0,
                      double hi = 1.0) {
  auto t = Tensor::make(std::move(shape));
  for (double& v : t->data) v = uniform_real(eng, lo, hi);
  return t;
}

void check_close(const std::vector<double>& got, const std::vector<double>& want,
                 double tol = 1e-12) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CAPTURE(i);
    CHECK(std::abs(got[i] - want[i]) <= tol * std::max(1.0, std::abs(want[i])));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor + graph contract
// ---------------------------------------------------------------------------

TEST_CASE("tensor construction validates shapes and sizes values") {
  auto t = Tensor::make({2, 3});
  CHECK(t->numel() == 6);
  CHECK(t->ndim() == 2);
  CHECK_FALSE(t->requires_grad);
  CHECK_FALSE(t->grad_allocated());

  auto f = Tensor::full({2, 2}, 7.0);
  for (double v : f->data) CHECK(v == 7.0);

  CHECK_THROWS_AS(Tensor::make({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::make({1, 2, 3, 4, 5}), ShapeError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("backward requires a scalar loss produced by the same graph") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  Graph g;
  auto y = ops::mul(g, x, x);
  CHECK_THROWS_AS(g.backward(y), ContractError);  // not a scalar

  Graph other;
  auto s = ops::sum(other, y);
  CHECK_THROWS_AS(g.backward(s), ContractError);  // produced by a different graph
}

TEST_CASE("gradients accumulate additively and zero_grad resets them") {
  auto x = Tensor::from({2}, {3.0, -1.0}, true);
  {
    Graph g;
    g.backward(ops::sum(g, x));
  }
  CHECK(x->grad[0] == 1.0);
  {
    // A second sweep from a fresh graph adds on top of the existing buffer.
    Graph g;
    g.backward(ops::sum(g, x));
  }
  CHECK(x->grad[0] == 2.0);
  x->zero_grad();
  CHECK(x->grad[0] == 0.0);
}

TEST_CASE("tensors without requires_grad never allocate gradient buffers") {
  auto x = Tensor::from({2}, {1.0, 2.0}, false);
  Graph g;
  auto s = ops::sum(g, x);
  g.backward(s);
  CHECK_FALSE(x->grad_allocated());
}

TEST_CASE("loss = sum(x) has gradient of ones; loss = sum(x*x) has gradient 2x") {
  auto x = Tensor::from({3}, {0.5, -2.0, 4.0}, true);
  {
    Graph g;
    g.backward(ops::sum(g, x));
    check_close(x->grad, {1.0, 1.0, 1.0});
  }
  x->zero_grad();
  {
    // x feeds mul twice: fan-out gradients must accumulate to 2x.
    Graph g;
    g.backward(ops::sum(g, ops::mul(g, x, x)));
    check_close(x->grad, {1.0, -4.0, 8.0});
  }
}

TEST_CASE("detach copies values and blocks gradient flow") {
  auto x = Tensor::from({2}, {1.5, -2.5}, true);
  auto d = ops::detach(x);
  CHECK(d->data == x->data);
  CHECK_FALSE(d->requires_grad);

  Graph g;
  auto s = ops::sum(g, ops::mul(g, d, d));
  g.backward(s);
  CHECK_FALSE(x->grad_allocated());
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST_CASE("conv2d with a 1x1 identity kernel reproduces the input") {
  auto in = Tensor::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor::from({1, 1, 1, 1}, {1.0});
  auto b = Tensor::from({1}, {0.0});
  Graph g;
  auto out = ops::conv2d(g, in, k, b);
  CHECK(out->shape == in->shape);
  check_close(out->data, in->data);
}

TEST_CASE("3x3 ones kernel over a 3x3 ones image counts overlapping cells") {
  auto in = Tensor::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor::full({1, 1, 3, 3}, 1.0);
  auto b = Tensor::from({1}, {0.0});
  Graph g;
  auto out = ops::conv2d(g, in, k, b, 1, 1);
  // With zero padding the kernel covers 4 cells in a corner, 6 on an edge,
  // and all 9 in the center.
  check_close(out->data, {4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST_CASE("conv2d output shape follows the stride/padding arithmetic") {
  auto eng = seeded_engine(11, "conv-shape");
  auto in = rand_tensor({2, 3, 8, 8}, eng);
  auto k = rand_tensor({16, 3, 3, 3}, eng);
  auto b = rand_tensor({16}, eng);
  Graph g;
  auto out = ops::conv2d(g, in, k, b, 1, 1);
  CHECK(out->shape == std::vector<int>{2, 16, 8, 8});
}

TEST_CASE("conv2d matches the naive sliding-window reference") {
  auto eng = seeded_engine(12, "conv-ref");
  struct Case {
    std::vector<int> in, k;
    int stride, pad;
  };
  for (const Case& c : {Case{{2, 3, 7, 5}, {4, 3, 3, 3}, 1, 1},
                        Case{{1, 2, 9, 9}, {3, 2, 3, 3}, 2, 1},
                        Case{{2, 1, 5, 5}, {2, 1, 5, 5}, 1, 2},
                        Case{{1, 4, 6, 8}, {1, 4, 1, 1}, 1, 0}}) {
    auto in = rand_tensor(c.in, eng);
    auto k = rand_tensor(c.k, eng);
    auto b = rand_tensor({c.k[0]}, eng);
    Graph g;
    auto out = ops::conv2d(g, in, k, b, c.stride, c.pad);
    std::vector<int> want_shape;
    auto want = conv2d_ref(*in, *k, *b, c.stride, c.pad, want_shape);
    CHECK(out->shape == want_shape);
    check_close(out->data, want);
  }
}

TEST_CASE("conv2d rejects malformed arguments") {
  auto eng = seeded_engine(13, "conv-err");
  auto in = rand_tensor({1, 3, 8, 8}, eng);
  auto b4 = rand_tensor({4}, eng);
  Graph g;
  CHECK_THROWS_AS(ops::conv2d(g, in, rand_tensor({4, 2, 3, 3}, eng), b4), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(g, in, rand_tensor({4, 3, 2, 2}, eng), b4), ConfigError);
  CHECK_THROWS_AS(ops::conv2d(g, in, rand_tensor({4, 3, 3, 3}, eng), rand_tensor({5}, eng)),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv2d(g, in, rand_tensor({4, 3, 3, 3}, eng), b4, 0, 0), ConfigError);
  CHECK_THROWS_AS(ops::conv2d(g, in, rand_tensor({4, 3, 3, 3}, eng), b4, 1, -1), ConfigError);
  // (8 + 0 - 3) / 2 + 1 does not divide exactly
  CHECK_THROWS_AS(ops::conv2d(g, in, rand_tensor({4, 3, 3, 3}, eng), b4, 2, 0), ConfigError);
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

TEST_CASE("batch_norm maps a constant channel to its beta offset") {
  auto in = Tensor::full({2, 2, 3, 3}, 4.2);
  auto gamma = Tensor::full({2}, 1.0);
  auto beta = Tensor::full({2}, 0.0);
  BatchNormState st;
  Graph g;
  auto out = ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train);
  for (double v : out->data) CHECK(std::abs(v) < 1e-9);  // variance clamped by eps
}

TEST_CASE("batch_norm with gamma=0 outputs beta everywhere") {
  auto eng = seeded_engine(21, "bn-beta");
  auto in = rand_tensor({2, 3, 4, 4}, eng);
  auto gamma = Tensor::full({3}, 0.0);
  auto beta = Tensor::full({3}, 5.0);
  BatchNormState st;
  Graph g;
  auto out = ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train);
  for (double v : out->data) CHECK(v == 5.0);
}

TEST_CASE("batch_norm normalizes the two-value channel {1,3} to {-1,+1}") {
  // mean 2, biased variance 1; with a tiny eps the outputs approach -1 and +1.
  auto in = Tensor::from({2, 1, 1, 1}, {1.0, 3.0});
  auto gamma = Tensor::full({1}, 1.0);
  auto beta = Tensor::full({1}, 0.0);
  BatchNormState st;
  Graph g;
  auto out = ops::batch_norm(g, in, gamma, beta, st, 1e-12, BnMode::train);
  CHECK(out->data[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(out->data[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("batch_norm train mode matches the two-pass reference") {
  auto eng = seeded_engine(22, "bn-ref");
  auto in = rand_tensor({3, 4, 5, 5}, eng);
  auto gamma = rand_tensor({4}, eng, 0.5, 1.5);
  auto beta = rand_tensor({4}, eng);
  BatchNormState st;
  Graph g;
  auto out = ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train);
  check_close(out->data, batch_norm_ref(*in, *gamma, *beta, 1e-5));
}

TEST_CASE("batch_norm running statistics feed eval mode") {
  auto eng = seeded_engine(23, "bn-eval");
  auto in = rand_tensor({2, 2, 4, 4}, eng);
  auto gamma = rand_tensor({2}, eng, 0.5, 1.5);
  auto beta = rand_tensor({2}, eng);
  BatchNormState st;
  {
    Graph g;
    ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train);
  }
  REQUIRE(st.running_mean.size() == 2);

  // Eval normalizes by the stored statistics, not the current batch.
  auto in2 = rand_tensor({2, 2, 4, 4}, eng);
  Graph g;
  auto out = ops::batch_norm(g, in2, gamma, beta, st, 1e-5, BnMode::eval);
  for (int c = 0; c < 2; ++c) {
    for (int b = 0; b < 2; ++b) {
      for (int i = 0; i < 16; ++i) {
        const std::size_t idx = (static_cast<std::size_t>(b) * 2 + c) * 16 + i;
        const double want = gamma->data[c] * (in2->data[idx] - st.running_mean[c]) /
                                std::sqrt(st.running_var[c] + 1e-5) +
                            beta->data[c];
        CHECK(out->data[idx] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("batch_norm frozen mode leaves running statistics untouched") {
  auto eng = seeded_engine(24, "bn-frozen");
  auto in = rand_tensor({2, 2, 4, 4}, eng);
  auto gamma = Tensor::full({2}, 1.0);
  auto beta = Tensor::full({2}, 0.0);
  BatchNormState st;
  {
    Graph g;
    ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train);
  }
  const auto mean_before = st.running_mean;
  const auto var_before = st.running_var;
  std::vector<double> frozen_values;
  {
    Graph g;
    frozen_values = ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train_frozen)->data;
  }
  CHECK(st.running_mean == mean_before);  // frozen mode leaves the state alone
  CHECK(st.running_var == var_before);
  {
    // ... while normalizing identically to train mode (which does update).
    Graph g;
    check_close(ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train)->data,
                frozen_values);
  }
  CHECK(st.running_var[0] != var_before[0]);
}

TEST_CASE("batch_norm rejects single-value channels in train mode") {
  auto in = Tensor::full({1, 1, 1, 1}, 3.0);
  auto gamma = Tensor::full({1}, 1.0);
  auto beta = Tensor::full({1}, 0.0);
  BatchNormState st;
  Graph g;
  CHECK_THROWS_AS(ops::batch_norm(g, in, gamma, beta, st, 1e-5, BnMode::train), ConfigError);
}

// ---------------------------------------------------------------------------
// relu / sigmoid
// ---------------------------------------------------------------------------

TEST_CASE("relu clamps negatives and passes positives") {
  auto x = Tensor::from({3}, {-2.0, 0.0, 3.0});
  Graph g;
  auto y = ops::relu(g, x);
  check_close(y->data, {0.0, 0.0, 3.0});
}

TEST_CASE("sigmoid hits its closed-form values") {
  auto x = Tensor::from({3}, {0.0, std::log(3.0), -std::log(3.0)});
  Graph g;
  auto y = ops::sigmoid(g, x);
  CHECK(y->data[0] == 0.5);
  CHECK(y->data[1] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(y->data[2] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("sigmoid stays finite and saturates for large magnitudes") {
  auto x = Tensor::from({2}, {800.0, -800.0});
  Graph g;
  auto y = ops::sigmoid(g, x);
  CHECK(y->data[0] == 1.0);
  CHECK(y->data[1] == 0.0);
}

// ---------------------------------------------------------------------------
// upsample / downsample
// ---------------------------------------------------------------------------

TEST_CASE("upsampling a constant field preserves the constant") {
  auto x = Tensor::full({1, 2, 3, 3}, 7.0);
  Graph g;
  for (auto m : {UpsampleMethod::bilinear, UpsampleMethod::nearest}) {
    auto y = ops::upsample(g, x, 2, m);
    CHECK(y->shape == std::vector<int>{1, 2, 6, 6});
    for (double v : y->data) CHECK(v == doctest::Approx(7.0).epsilon(1e-15));
  }
}

TEST_CASE("nearest upsampling replicates each pixel into a block") {
  auto x = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Graph g;
  auto y = ops::upsample(g, x, 2, UpsampleMethod::nearest);
  check_close(y->data, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("upsample factor 1 is the identity") {
  auto eng = seeded_engine(31, "up-id");
  auto x = rand_tensor({1, 3, 4, 5}, eng);
  Graph g;
  for (auto m : {UpsampleMethod::bilinear, UpsampleMethod::nearest}) {
    auto y = ops::upsample(g, x, 1, m);
    check_close(y->data, x->data);
  }
}

TEST_CASE("bilinear upsampling reproduces a linear ramp away from the border") {
  // f(y, x) = 2y + 3x sampled at pixel centers; bilinear interpolation is
  // exact for linear functions wherever no edge clamping occurs.
  const int H = 4, W = 4, f = 2;
  auto x = Tensor::make({1, 1, H, W});
  for (int iy = 0; iy < H; ++iy)
    for (int ix = 0; ix < W; ++ix) x->data[static_cast<std::size_t>(iy) * W + ix] = 2.0 * iy + 3.0 * ix;
  Graph g;
  auto y = ops::upsample(g, x, f, UpsampleMethod::bilinear);
  for (int oy = 1; oy < H * f - 1; ++oy) {
    for (int ox = 1; ox < W * f - 1; ++ox) {
      const double sy = (oy + 0.5) / f - 0.5;  // half-pixel-center source coordinate
      const double sx = (ox + 0.5) / f - 0.5;
      const double want = 2.0 * sy + 3.0 * sx;
      CHECK(y->data[static_cast<std::size_t>(oy) * W * f + ox] ==
            doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("max pooling takes window maxima") {
  auto x = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Graph g;
  CHECK(ops::downsample(g, x, 2)->data[0] == 4.0);

  // 4x4 row-major ramp 0..15: window maxima are the bottom-right corners.
  auto ramp = Tensor::make({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) ramp->data[static_cast<std::size_t>(i)] = i;
  auto y = ops::downsample(g, ramp, 2);
  check_close(y->data, {5, 7, 13, 15});
}

TEST_CASE("max pooling of a constant field is the constant") {
  auto x = Tensor::full({2, 3, 4, 4}, -2.5);
  Graph g;
  auto y = ops::downsample(g, x, 2);
  CHECK(y->shape == std::vector<int>{2, 3, 2, 2});
  for (double v : y->data) CHECK(v == -2.5);
}

TEST_CASE("max pooling matches the reference on random input") {
  auto eng = seeded_engine(32, "pool-ref");
  auto x = rand_tensor({2, 3, 6, 8}, eng);
  Graph g;
  auto y = ops::downsample(g, x, 2);
  std::vector<int> want_shape;
  auto want = maxpool_ref(*x, 2, want_shape);
  CHECK(y->shape == want_shape);
  check_close(y->data, want);
}

TEST_CASE("max pooling routes the gradient to the first maximum on ties") {
  auto x = Tensor::from({1, 1, 2, 2}, {5.0, 5.0, 1.0, 5.0}, true);
  Graph g;
  auto s = ops::sum(g, ops::downsample(g, x, 2));
  g.backward(s);
  check_close(x->grad, {1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("resampling ops reject bad factors and extents") {
  auto eng = seeded_engine(33, "resample-err");
  auto x = rand_tensor({1, 1, 5, 5}, eng);
  Graph g;
  CHECK_THROWS_AS(ops::upsample(g, x, 0), ConfigError);
  CHECK_THROWS_AS(ops::downsample(g, x, 0), ConfigError);
  CHECK_THROWS_AS(ops::downsample(g, x, 2), ShapeError);  // 5 not divisible by 2
}

// ---------------------------------------------------------------------------
// concat / slice_channels
// ---------------------------------------------------------------------------

TEST_CASE("concat stacks channels in argument order") {
  auto eng = seeded_engine(41, "concat");
  auto a = rand_tensor({1, 2, 4, 4}, eng);
  auto b = rand_tensor({1, 3, 4, 4}, eng);
  Graph g;
  auto y = ops::concat(g, {a, b});
  CHECK(y->shape == std::vector<int>{1, 5, 4, 4});
  // channel 0 of the result is channel 0 of the first input
  for (int i = 0; i < 16; ++i) CHECK(y->data[static_cast<std::size_t>(i)] == a->data[static_cast<std::size_t>(i)]);

  // slicing the concatenation recovers both inputs exactly
  auto sa = ops::slice_channels(g, y, 0, 2);
  auto sb = ops::slice_channels(g, y, 2, 5);
  check_close(sa->data, a->data);
  check_close(sb->data, b->data);
}

TEST_CASE("concat of a single input is the identity") {
  auto eng = seeded_engine(42, "concat-id");
  auto a = rand_tensor({2, 3, 2, 2}, eng);
  Graph g;
  check_close(ops::concat(g, {a})->data, a->data);
}

TEST_CASE("concat and slice reject malformed arguments") {
  auto eng = seeded_engine(43, "concat-err");
  auto a = rand_tensor({1, 2, 4, 4}, eng);
  auto b = rand_tensor({1, 2, 5, 4}, eng);
  Graph g;
  CHECK_THROWS_AS(ops::concat(g, {}), ContractError);
  CHECK_THROWS_AS(ops::concat(g, {a, b}), ShapeError);
  CHECK_THROWS_AS(ops::slice_channels(g, a, 1, 1), ShapeError);
  CHECK_THROWS_AS(ops::slice_channels(g, a, 0, 3), ShapeError);
}

// ---------------------------------------------------------------------------
// mul / add / sum
// ---------------------------------------------------------------------------

TEST_CASE("mul worked example and identities") {
  auto a = Tensor::from({2}, {2.0, 3.0}, true);
  auto b = Tensor::from({2}, {4.0, 5.0});
  {
    Graph g;
    auto y = ops::mul(g, a, b);
    check_close(y->data, {8.0, 15.0});
    g.backward(ops::sum(g, y));
    check_close(a->grad, {4.0, 5.0});  // d(a*b)/da = b
  }
  {
    Graph g;
    auto ones = Tensor::full({2}, 1.0);
    check_close(ops::mul(g, a, ones)->data, a->data);
  }
  a->zero_grad();
  {
    Graph g;
    auto zeros = Tensor::full({2}, 0.0);
    auto z = ops::mul(g, a, zeros);
    check_close(z->data, {0.0, 0.0});
    g.backward(ops::sum(g, z));
    check_close(a->grad, {0.0, 0.0});
  }
}

TEST_CASE("mul broadcasts a one-channel map across all channels") {
  auto eng = seeded_engine(51, "mul-bcast");
  auto a = rand_tensor({2, 3, 4, 4}, eng);
  auto m = rand_tensor({2, 1, 4, 4}, eng);
  Graph g;
  auto y = ops::mul(g, a, m);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i) {
        const std::size_t ai = (static_cast<std::size_t>(b) * 3 + c) * 16 + i;
        const std::size_t mi = static_cast<std::size_t>(b) * 16 + i;
        CHECK(y->data[ai] == a->data[ai] * m->data[mi]);
      }
  CHECK_THROWS_AS(ops::mul(g, a, rand_tensor({2, 2, 4, 4}, eng)), ShapeError);
}

TEST_CASE("add requires equal shapes and sums elementwise") {
  auto a = Tensor::from({2}, {1.0, 2.0});
  auto b = Tensor::from({2}, {10.0, 20.0});
  Graph g;
  check_close(ops::add(g, a, b)->data, {11.0, 22.0});
  CHECK_THROWS_AS(ops::add(g, a, Tensor::full({3}, 0.0)), ShapeError);
}

// ---------------------------------------------------------------------------
// branch tracing (finite-difference support facility)
// ---------------------------------------------------------------------------

TEST_CASE("branch hash changes exactly when a relu sign or pool argmax flips") {
  auto x = Tensor::from({1, 1, 2, 2}, {0.5, -0.5, 2.0, 1.0});
  auto run = [&] {
    Graph g;
    g.trace_branches(true);
    ops::downsample(g, ops::relu(g, x), 2);
    return g.branch_hash();
  };
  const auto h0 = run();
  CHECK(run() == h0);  // deterministic

  x->data[1] = -0.4;  // same sign, same argmax: hash unchanged
  CHECK(run() == h0);
  x->data[1] = 0.4;  // relu sign flip
  CHECK(run() != h0);
  x->data[1] = -0.5;
  x->data[3] = 3.0;  // pool argmax flip
  CHECK(run() != h0);
}

// ---------------------------------------------------------------------------
// finite-difference verification
// ---------------------------------------------------------------------------

TEST_CASE("grad check of a linear function is exact to rounding") {
  auto eng = seeded_engine(61, "fd-linear");
  auto x = rand_tensor({8}, eng);
  const double err =
      grad_check([](Graph& g, const TensorPtr& t) { return ops::sum(g, t); }, x, 1e-5);
  CHECK(err < 1e-10);
}

TEST_CASE("grad check of sum(sigmoid(x)) on an 8-element input") {
  auto eng = seeded_engine(62, "fd-sigmoid");
  auto x = rand_tensor({8}, eng);
  const double err = grad_check(
      [](Graph& g, const TensorPtr& t) { return ops::sum(g, ops::sigmoid(g, t)); }, x, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("every registered op passes its finite-difference check") {
  const auto table = check_all_ops(2024, 1e-5, 1e-4);
  CHECK(table.size() >= 18);  // one row per differentiable op
  for (const auto& row : table) {
    CAPTURE(row.name);
    CHECK(row.pass);
    CHECK(row.max_rel_err < 1e-4);
  }
}

TEST_CASE("fault injection makes exactly the corrupted row fail") {
  set_fault_injection("conv2d");
  const auto table = check_all_ops(2024, 1e-5, 1e-4);
  set_fault_injection("");
  for (const auto& row : table) {
    CAPTURE(row.name);
    CHECK(row.pass == (row.name != "conv2d"));
  }
}

TEST_CASE("grad check validates its probe width") {
  auto x = Tensor::full({2}, 1.0);
  CHECK_THROWS_AS(grad_check([](Graph& g, const TensorPtr& t) { return ops::sum(g, t); }, x, 1e-8),
                  ConfigError);
  CHECK_THROWS_AS(grad_check([](Graph& g, const TensorPtr& t) { return ops::sum(g, t); }, x, 1e-2),
                  ConfigError);
}
