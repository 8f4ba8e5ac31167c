#pragma once

// Definition-literal metric oracles. Written independently of metrics.cpp
// (two-pass moments, explicit index sets) so agreement means something.

#include <cmath>
#include <set>
#include <vector>

#include "osvi/tensor.hpp"

namespace osvi::reference {

inline double psnr(const Tensor<float>& pred, const Tensor<float>& gt) {
  if (pred.shape() != gt.shape()) throw DimensionError("reference psnr: shape mismatch");
  std::vector<double> sq;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sq.push_back(std::pow(static_cast<double>(pred[i]) - static_cast<double>(gt[i]), 2));
  }
  double mse = 0.0;
  for (double v : sq) mse += v / static_cast<double>(sq.size());
  if (mse < 1e-10) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

inline std::vector<std::vector<double>> gray(const Tensor<float>& f) {
  const bool colour = f.rank() == 3;
  const std::size_t h = colour ? f.dim(1) : f.dim(0), w = colour ? f.dim(2) : f.dim(1);
  std::vector<std::vector<double>> g(h, std::vector<double>(w));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      g[y][x] = colour ? 0.299 * f.at({0, y, x}) + 0.587 * f.at({1, y, x}) + 0.114 * f.at({2, y, x})
                       : static_cast<double>(f.at({y, x}));
    }
  return g;
}

inline double ssim(const Tensor<float>& pred, const Tensor<float>& gt) {
  if (pred.shape() != gt.shape()) throw DimensionError("reference ssim: shape mismatch");
  const auto a = gray(pred), b = gray(gt);
  const std::size_t h = a.size(), w = a[0].size(), win = 8, step = 4;
  if (h < win || w < win) throw DimensionError("reference ssim: frame smaller than window");
  const double k1 = 0.01, k2 = 0.03, l = 1.0;
  const double c1 = (k1 * l) * (k1 * l), c2 = (k2 * l) * (k2 * l);
  std::vector<double> local;
  for (std::size_t top = 0; top + win <= h; top += step)
    for (std::size_t left = 0; left + win <= w; left += step) {
      std::vector<double> xs, ys;
      for (std::size_t y = top; y < top + win; ++y)
        for (std::size_t x = left; x < left + win; ++x) {
          xs.push_back(a[y][x]);
          ys.push_back(b[y][x]);
        }
      const double n = static_cast<double>(xs.size());
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
      }
      mx /= n;
      my /= n;
      double vx = 0, vy = 0, cov = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        vx += (xs[i] - mx) * (xs[i] - mx);
        vy += (ys[i] - my) * (ys[i] - my);
        cov += (xs[i] - mx) * (ys[i] - my);
      }
      vx /= n;
      vy /= n;
      cov /= n;
      const double lum = (2 * mx * my + c1) / (mx * mx + my * my + c1);
      const double cs = (2 * cov + c2) / (vx + vy + c2);
      local.push_back(lum * cs);
    }
  double s = 0.0;
  for (double v : local) s += v;
  return s / static_cast<double>(local.size());
}

struct IouRecall {
  double iou, recall;
};

inline IouRecall iou_recall(const Tensor<float>& pred, const Tensor<float>& gt) {
  if (pred.shape() != gt.shape()) throw DimensionError("reference iou: shape mismatch");
  std::set<std::size_t> p, g, both, either;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= 0.5f) p.insert(i);
    if (gt[i] >= 0.5f) g.insert(i);
  }
  for (std::size_t i : p) {
    either.insert(i);
    if (g.count(i)) both.insert(i);
  }
  for (std::size_t i : g) either.insert(i);
  if (g.empty()) {
    const double v = p.empty() ? 1.0 : 0.0;
    return {v, v};
  }
  return {static_cast<double>(both.size()) / static_cast<double>(either.size()),
          static_cast<double>(both.size()) / static_cast<double>(g.size())};
}

}  // namespace osvi::reference
