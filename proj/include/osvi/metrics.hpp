#pragma once

#include <vector>

#include "osvi/tensor.hpp"

namespace osvi {

inline constexpr double kPsnrCap = 99.0;
inline constexpr std::size_t kSsimWindow = 8;
inline constexpr std::size_t kSsimStride = 4;

/// 10·log10(1/MSE) for data in [0,1]; MSE below 1e-10 gives 99 dB.
double psnr(const Tensor<float>& pred, const Tensor<float>& gt);

/// Mean SSIM over 8×8 windows at stride 4 of the luma channel
/// (0.299R + 0.587G + 0.114B). Accepts 3×H×W colour or H×W gray frames.
double ssim(const Tensor<float>& pred, const Tensor<float>& gt);

struct MaskScore {
  double iou = 0.0, recall = 0.0;
};

/// Binary masks (values ≥ 0.5 count as set). Empty ground truth scores 1
/// when the prediction is also empty and 0 otherwise.
MaskScore iou_recall(const Tensor<float>& pred, const Tensor<float>& gt);

struct MetricReport {
  std::vector<double> psnr, ssim, iou, recall;  // per frame
  double mean_psnr = 0, mean_ssim = 0, mean_iou = 0, mean_recall = 0;
};

/// Per-frame metrics of a clip. Videos T×3×H×W, masks T×H×W.
MetricReport evaluate_clip(const Tensor<float>& pred_video, const Tensor<float>& gt_video,
                           const Tensor<float>& pred_masks, const Tensor<float>& gt_masks);

/// Grayscale H×W of a 3×H×W frame (H×W input is returned as is).
Tensor<double> luma(const Tensor<float>& frame);

}  // namespace osvi
