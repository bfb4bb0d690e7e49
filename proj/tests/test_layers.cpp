#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lapp/layers.hpp"
#include "lapp/rng.hpp"
#include "testutil.hpp"

using namespace lapp;
namespace tu = lapp::testutil;

namespace {

/// loss = sum(forward(x) * probe), a generic scalar head for gradient checks.
template <typename Layer>
double probe_loss(Layer& layer, const Tensor<double>& x, const Tensor<double>& probe) {
  Tensor<double> y = layer.forward(x, true);
  double acc = 0.0;
  for (int64_t i = 0; i < y.numel(); ++i) acc += y[i] * probe[i];
  return acc;
}

}  // namespace

TEST_CASE("Conv2d forward equals the direct convolution") {
  Rng rng(1);
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 1, 3}, {1, 0, 1}, {2, 0, 1}}) {
    Conv2d<double> conv(3, 5, k, stride, pad);
    conv.init_weights(rng);
    Tensor<double> x({2, 3, 8, 8});
    rng.fill_normal(x, 0.0, 1.0);
    Tensor<double> y = conv.forward(x, false);
    Tensor<double> want = tu::naive_conv(x, conv.w.value, stride, pad);
    REQUIRE(y.shape() == want.shape());
    CHECK(tu::max_rel_err(y, want) < 1e-10);
  }
  Conv2d<double> conv(3, 5, 3, 1, 1);
  Tensor<double> bad({2, 4, 8, 8});
  CHECK_THROWS_AS(conv.forward(bad, false), std::invalid_argument);
}

TEST_CASE("Conv2d gradients match finite differences") {
  Rng rng(2);
  Conv2d<double> conv(2, 3, 3, 2, 1);
  conv.init_weights(rng);
  Tensor<double> x({2, 2, 5, 5});
  rng.fill_normal(x, 0.0, 1.0);
  Tensor<double> y0 = conv.forward(x, true);
  Tensor<double> probe(y0.shape());
  rng.fill_normal(probe, 0.0, 1.0);

  conv.w.zero_grad();
  conv.forward(x, true);
  Tensor<double> dx = conv.backward(probe);

  auto num_w = tu::numeric_grad(conv.w.value, [&] { return probe_loss(conv, x, probe); });
  CHECK(tu::max_rel_err(conv.w.grad, num_w, 1e-3) < 1e-5);
  auto num_x = tu::numeric_grad(x, [&] { return probe_loss(conv, x, probe); });
  CHECK(tu::max_rel_err(dx, num_x, 1e-3) < 1e-5);
}

TEST_CASE("DepthwiseConv2d forward and gradients") {
  Rng rng(3);
  DepthwiseConv2d<double> dw(3, 3, 2, 1);
  dw.init_weights(rng);
  Tensor<double> x({2, 3, 5, 5});
  rng.fill_normal(x, 0.0, 1.0);

  // depthwise equals a grouped direct conv: run per channel with 1-in-1-out kernels
  Tensor<double> y = dw.forward(x, true);
  for (int64_t c = 0; c < 3; ++c) {
    Tensor<double> xc({2, 1, 5, 5}), wc({1, 1, 3, 3});
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t i = 0; i < 25; ++i) xc[n * 25 + i] = x[(n * 3 + c) * 25 + i];
    for (int64_t i = 0; i < 9; ++i) wc[i] = dw.w.value[c * 9 + i];
    Tensor<double> yc = tu::naive_conv(xc, wc, 2, 1);
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t i = 0; i < yc.dim(2) * yc.dim(3); ++i)
        CHECK(std::abs(yc[n * yc.dim(2) * yc.dim(3) + i] -
                       y[(n * 3 + c) * y.dim(2) * y.dim(3) + i]) < 1e-12);
  }

  Tensor<double> probe(y.shape());
  rng.fill_normal(probe, 0.0, 1.0);
  dw.w.zero_grad();
  dw.forward(x, true);
  Tensor<double> dx = dw.backward(probe);
  auto num_w = tu::numeric_grad(dw.w.value, [&] { return probe_loss(dw, x, probe); });
  CHECK(tu::max_rel_err(dw.w.grad, num_w, 1e-3) < 1e-5);
  auto num_x = tu::numeric_grad(x, [&] { return probe_loss(dw, x, probe); });
  CHECK(tu::max_rel_err(dx, num_x, 1e-3) < 1e-5);
}

TEST_CASE("BatchNorm2d train/eval behavior and gradients") {
  Rng rng(4);
  BatchNorm2d<double> bn(3);
  Tensor<double> x({4, 3, 4, 4});
  rng.fill_normal(x, 1.5, 2.0);

  Tensor<double> y = bn.forward(x, true);
  // batch statistics: per-channel mean ~0, var ~1 after normalization
  for (int64_t c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t i = 0; i < 16; ++i) {
        const double v = y[(n * 3 + c) * 16 + i];
        sum += v;
        sq += v * v;
      }
    CHECK(std::abs(sum / 64.0) < 1e-10);
    CHECK(std::abs(sq / 64.0 - 1.0) < 1e-4);  // off by ~eps/var
  }

  // eval mode uses running statistics, not batch statistics
  Tensor<double> x2({2, 3, 4, 4});
  rng.fill_normal(x2, -3.0, 0.5);
  Tensor<double> y_eval = bn.forward(x2, false);
  double mean_c0 = 0.0;
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 16; ++i) mean_c0 += y_eval[n * 3 * 16 + i];
  CHECK(std::abs(mean_c0 / 32.0) > 0.5);  // running stats differ from this batch

  bn.gamma.zero_grad();
  bn.beta.zero_grad();
  rng.fill_normal(bn.gamma.value, 1.0, 0.2);
  rng.fill_normal(bn.beta.value, 0.0, 0.2);
  Tensor<double> probe(x.shape());
  rng.fill_normal(probe, 0.0, 1.0);
  bn.forward(x, true);
  Tensor<double> dx = bn.backward(probe);
  auto num_g = tu::numeric_grad(bn.gamma.value, [&] { return probe_loss(bn, x, probe); });
  CHECK(tu::max_rel_err(bn.gamma.grad, num_g, 1e-3) < 1e-5);
  auto num_b = tu::numeric_grad(bn.beta.value, [&] { return probe_loss(bn, x, probe); });
  CHECK(tu::max_rel_err(bn.beta.grad, num_b, 1e-3) < 1e-5);
  auto num_x = tu::numeric_grad(x, [&] { return probe_loss(bn, x, probe); });
  CHECK(tu::max_rel_err(dx, num_x, 1e-3) < 2e-4);
}

TEST_CASE("Linear gradients") {
  Rng rng(5);
  Linear<double> fc(6, 4);
  fc.init_weights(rng);
  Tensor<double> x({3, 6});
  rng.fill_normal(x, 0.0, 1.0);
  Tensor<double> probe({3, 4});
  rng.fill_normal(probe, 0.0, 1.0);
  fc.w.zero_grad();
  fc.b.zero_grad();
  fc.forward(x, true);
  Tensor<double> dx = fc.backward(probe);
  auto num_w = tu::numeric_grad(fc.w.value, [&] { return probe_loss(fc, x, probe); });
  CHECK(tu::max_rel_err(fc.w.grad, num_w, 1e-3) < 1e-6);
  auto num_b = tu::numeric_grad(fc.b.value, [&] { return probe_loss(fc, x, probe); });
  CHECK(tu::max_rel_err(fc.b.grad, num_b, 1e-3) < 1e-6);
  auto num_x = tu::numeric_grad(x, [&] { return probe_loss(fc, x, probe); });
  CHECK(tu::max_rel_err(dx, num_x, 1e-3) < 1e-6);
}

TEST_CASE("MaxPool2d and GlobalAvgPool backward") {
  Rng rng(6);
  MaxPool2d<double> pool(2, 2);
  Tensor<double> x({2, 2, 4, 4});
  rng.fill_normal(x, 0.0, 1.0);
  Tensor<double> y = pool.forward(x, true);
  Tensor<double> probe(y.shape());
  rng.fill_normal(probe, 0.0, 1.0);
  Tensor<double> dx = pool.backward(probe);
  auto num_x = tu::numeric_grad(x, [&] { return probe_loss(pool, x, probe); });
  CHECK(tu::max_rel_err(dx, num_x, 1e-3) < 1e-6);

  GlobalAvgPool<double> gap;
  Tensor<double> y2 = gap.forward(x, true);
  CHECK(y2.shape() == std::vector<int64_t>{2, 2});
  Tensor<double> probe2(y2.shape());
  rng.fill_normal(probe2, 0.0, 1.0);
  Tensor<double> dx2 = gap.backward(probe2);
  auto num_x2 = tu::numeric_grad(x, [&] { return probe_loss(gap, x, probe2); });
  CHECK(tu::max_rel_err(dx2, num_x2, 1e-3) < 1e-6);
}

TEST_CASE("softmax cross-entropy value and gradient") {
  Rng rng(7);
  Tensor<double> logits({4, 5});
  rng.fill_normal(logits, 0.0, 2.0);
  std::vector<int> labels{0, 3, 2, 4};

  Tensor<double> dlogits;
  const double loss = softmax_cross_entropy(logits, labels, &dlogits);

  // manual log-sum-exp
  double want = 0.0;
  for (int64_t i = 0; i < 4; ++i) {
    double z = 0.0;
    for (int64_t j = 0; j < 5; ++j) z += std::exp(logits[i * 5 + j]);
    want += std::log(z) - logits[i * 5 + labels[static_cast<size_t>(i)]];
  }
  want /= 4.0;
  CHECK(loss == doctest::Approx(want).epsilon(1e-12));

  auto num = tu::numeric_grad(logits, [&] {
    return softmax_cross_entropy<double>(logits, labels, nullptr);
  });
  CHECK(tu::max_rel_err(dlogits, num, 1e-4) < 1e-6);

  CHECK_THROWS_AS(softmax_cross_entropy<double>(logits, std::vector<int>{1, 2}, nullptr),
                  std::invalid_argument);
}
