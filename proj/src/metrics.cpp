#include "osvi/metrics.hpp"

#include <cmath>
#include <numeric>

namespace osvi {

namespace {

void same_shape(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double psnr(const Tensor<float>& pred, const Tensor<float>& gt) {
  same_shape(pred, gt, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

Tensor<double> luma(const Tensor<float>& frame) {
  if (frame.rank() == 2) return frame.cast<double>();
  if (frame.rank() != 3 || frame.dim(0) != 3) {
    throw DimensionError("expected 3×H×W or H×W frame, got " + shape_str(frame.shape()));
  }
  const std::size_t h = frame.dim(1), w = frame.dim(2), plane = h * w;
  Tensor<double> g({h, w});
  for (std::size_t p = 0; p < plane; ++p) {
    g[p] = 0.299 * frame[p] + 0.587 * frame[plane + p] + 0.114 * frame[2 * plane + p];
  }
  return g;
}

double ssim(const Tensor<float>& pred, const Tensor<float>& gt) {
  same_shape(pred, gt, "ssim");
  const Tensor<double> x = luma(pred), y = luma(gt);
  const std::size_t h = x.dim(0), w = x.dim(1);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw DimensionError("ssim: frame " + std::to_string(h) + "x" + std::to_string(w) +
                         " smaller than the 8x8 window");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  constexpr double n = static_cast<double>(kSsimWindow * kSsimWindow);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t i = 0; i + kSsimWindow <= h; i += kSsimStride)
    for (std::size_t j = 0; j + kSsimWindow <= w; j += kSsimStride) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t a = 0; a < kSsimWindow; ++a)
        for (std::size_t b = 0; b < kSsimWindow; ++b) {
          const double u = x[(i + a) * w + j + b], v = y[(i + a) * w + j + b];
          sx += u;
          sy += v;
          sxx += u * u;
          syy += v * v;
          sxy += u * v;
        }
      const double mx = sx / n, my = sy / n;
      const double vx = sxx / n - mx * mx, vy = syy / n - my * my, cxy = sxy / n - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  return total / static_cast<double>(windows);
}

MaskScore iou_recall(const Tensor<float>& pred, const Tensor<float>& gt) {
  same_shape(pred, gt, "iou_recall");
  std::size_t inter = 0, uni = 0, area_gt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5f, g = gt[i] >= 0.5f;
    inter += p && g;
    uni += p || g;
    area_gt += g;
  }
  MaskScore s;
  if (area_gt == 0) {
    s.iou = s.recall = uni == 0 ? 1.0 : 0.0;
    return s;
  }
  s.iou = static_cast<double>(inter) / static_cast<double>(uni);
  s.recall = static_cast<double>(inter) / static_cast<double>(area_gt);
  return s;
}

MetricReport evaluate_clip(const Tensor<float>& pred_video, const Tensor<float>& gt_video,
                           const Tensor<float>& pred_masks, const Tensor<float>& gt_masks) {
  same_shape(pred_video, gt_video, "evaluate_clip video");
  same_shape(pred_masks, gt_masks, "evaluate_clip masks");
  if (pred_video.rank() != 4 || pred_masks.rank() != 3 || pred_video.dim(0) != pred_masks.dim(0)) {
    throw DimensionError("evaluate_clip: video " + shape_str(pred_video.shape()) + ", masks " +
                         shape_str(pred_masks.shape()));
  }
  MetricReport r;
  for (std::size_t t = 0; t < pred_video.dim(0); ++t) {
    const Tensor<float> pf = frame_of(pred_video, t), gf = frame_of(gt_video, t);
    r.psnr.push_back(psnr(pf, gf));
    r.ssim.push_back(ssim(pf, gf));
    const MaskScore m = iou_recall(frame_of(pred_masks, t), frame_of(gt_masks, t));
    r.iou.push_back(m.iou);
    r.recall.push_back(m.recall);
  }
  r.mean_psnr = mean_of(r.psnr);
  r.mean_ssim = mean_of(r.ssim);
  r.mean_iou = mean_of(r.iou);
  r.mean_recall = mean_of(r.recall);
  return r;
}

}  // namespace osvi
