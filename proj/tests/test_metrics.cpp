#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "osvi/metrics.hpp"
#include "osvi/reference_metrics.hpp"

using namespace osvi;
using testutil::random;

namespace {

Tensor<float> constant_frame(std::size_t h, std::size_t w, float v) { return Tensor<float>({3, h, w}, v); }

Tensor<float> binary(Shape s, Rng& r, double p) {
  Tensor<float> t(std::move(s));
  for (auto& v : t.data()) v = r.uniform() < p ? 1.0f : 0.0f;
  return t;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("psnr: identical, 0.1 offset, full swing") {
    Rng r(1);
    const auto a = random<float>({3, 16, 16}, r, 0, 1);
    CHECK(psnr(a, a) == 99.0);
    const auto zero = constant_frame(16, 16, 0.0f), one = constant_frame(16, 16, 1.0f);
    CHECK(psnr(zero, one) == doctest::Approx(0.0).epsilon(1e-12));
    const auto tenth = constant_frame(16, 16, 0.1f);
    CHECK(psnr(zero, tenth) == doctest::Approx(20.0).epsilon(1e-6));
    CHECK_THROWS_AS(psnr(zero, Tensor<float>({3, 16, 8})), DimensionError);
  }
  TEST_CASE("ssim: identical frames score one") {
    Rng r(2);
    for (int k = 0; k < 5; ++k) {
      const auto a = random<float>({3, 24, 40}, r, 0, 1);
      CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  TEST_CASE("ssim of an inverted pattern is negative") {
    Rng r(3);
    const auto a = random<float>({3, 16, 16}, r, 0, 1);
    Tensor<float> inv = a;
    for (auto& v : inv.data()) v = 1.0f - v;
    const double s = ssim(a, inv);
    CHECK(s < 0.0);
    CHECK(s == doctest::Approx(reference::ssim(a, inv)).epsilon(1e-9));
  }
  TEST_CASE("ssim of constant frames has the luminance closed form") {
    // zero variance leaves (2ab + c1) / (a^2 + b^2 + c1)
    const double c1 = 1e-4;
    for (auto [x, y] : {std::pair{0.2f, 0.7f}, std::pair{0.5f, 0.5f}, std::pair{0.0f, 1.0f}}) {
      const double a = x, b = y;
      const double want = (2 * a * b + c1) / (a * a + b * b + c1);
      CHECK(ssim(constant_frame(16, 24, x), constant_frame(16, 24, y)) == doctest::Approx(want).epsilon(1e-6));
    }
  }
  TEST_CASE("ssim works on luma, so gray frames agree with their colour twins") {
    Rng r(4);
    const auto g = random<float>({12, 20}, r, 0, 1), h = random<float>({12, 20}, r, 0, 1);
    Tensor<float> gc({3, 12, 20}), hc({3, 12, 20});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 240; ++p) {
        gc[c * 240 + p] = g[p];
        hc[c * 240 + p] = h[p];
      }
    CHECK(ssim(g, h) == doctest::Approx(ssim(gc, hc)).epsilon(1e-6));
  }
  TEST_CASE("ssim on a frame smaller than its window") {
    CHECK_THROWS_AS(ssim(constant_frame(6, 20, 0), constant_frame(6, 20, 0)), DimensionError);
  }
  TEST_CASE("iou and recall examples") {
    Tensor<float> gt({2, 4}), pred({2, 4});
    for (std::size_t i : {0, 1, 2, 3}) gt[i] = 1;
    for (std::size_t i : {2, 3, 4, 5}) pred[i] = 1;
    const MaskScore s = iou_recall(pred, gt);
    CHECK(s.iou == doctest::Approx(2.0 / 6.0));
    CHECK(s.recall == doctest::Approx(0.5));
    const Tensor<float> empty({2, 4});
    CHECK(iou_recall(empty, empty).iou == 1.0);
    CHECK(iou_recall(pred, empty).iou == 0.0);
    CHECK(iou_recall(empty, gt).recall == 0.0);
    Tensor<float> soft = gt;
    soft[0] = 0.5f;
    soft[1] = 0.49f;
    CHECK(iou_recall(soft, gt).recall == doctest::Approx(0.75));
  }
  TEST_CASE("psnr, ssim and iou are symmetric") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r(seed);
      const auto a = random<float>({3, 16, 24}, r, 0, 1), b = random<float>({3, 16, 24}, r, 0, 1);
      CHECK(psnr(a, b) == psnr(b, a));
      CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
      const auto m = binary({16, 24}, r, 0.3), n = binary({16, 24}, r, 0.3);
      CHECK(iou_recall(m, n).iou == iou_recall(n, m).iou);
    }
  }
  TEST_CASE("metrics agree with the definition-literal oracles on random pairs") {
    double ep = 0, es = 0, ei = 0, er = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng r(seed + 1000);
      const std::size_t h = 8 + r.index(17), w = 8 + r.index(17);
      const auto a = random<float>({3, h, w}, r, 0, 1);
      auto b = a;
      const double noise = r.uniform(0.0, 0.5);
      for (auto& v : b.data()) v = std::clamp(v + float(r.uniform(-noise, noise)), 0.0f, 1.0f);
      ep = std::max(ep, std::abs(psnr(a, b) - reference::psnr(a, b)));
      es = std::max(es, std::abs(ssim(a, b) - reference::ssim(a, b)));
      const auto m = binary({h, w}, r, r.uniform()), n = binary({h, w}, r, r.uniform());
      const MaskScore s = iou_recall(m, n);
      const auto ref = reference::iou_recall(m, n);
      ei = std::max(ei, std::abs(s.iou - ref.iou));
      er = std::max(er, std::abs(s.recall - ref.recall));
      CHECK(s.iou <= s.recall + 1e-15);
    }
    CHECK(ep <= 1e-6);
    CHECK(es <= 1e-6);
    CHECK(ei <= 1e-6);
    CHECK(er <= 1e-6);
  }
  TEST_CASE("evaluate_clip reports per-frame values and their means") {
    Rng r(9);
    const auto gt = random<float>({3, 3, 16, 16}, r, 0, 1);
    auto pred = gt;
    for (std::size_t i = 0; i < 256 * 3; ++i) pred[256 * 3 + i] = std::min(1.0f, pred[256 * 3 + i] + 0.05f);
    const auto masks = binary({3, 16, 16}, r, 0.3);
    const MetricReport rep = evaluate_clip(pred, gt, masks, masks);
    REQUIRE(rep.psnr.size() == 3);
    CHECK(rep.psnr[0] == 99.0);
    CHECK(rep.psnr[1] < 99.0);
    CHECK(rep.psnr[2] == 99.0);
    CHECK(rep.mean_psnr == doctest::Approx((rep.psnr[0] + rep.psnr[1] + rep.psnr[2]) / 3));
    CHECK(rep.mean_iou == 1.0);
    CHECK(rep.mean_ssim <= 1.0);
    CHECK_THROWS_AS(evaluate_clip(pred, gt, masks, Tensor<float>({2, 16, 16})), DimensionError);
  }
}
