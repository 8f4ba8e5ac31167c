#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "osvi/rng.hpp"
#include "osvi/tensor.hpp"

namespace testutil {

template <typename T = double>
osvi::Tensor<T> random(osvi::Shape s, osvi::Rng& r, double lo = -1.0, double hi = 1.0) {
  osvi::Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(r.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const osvi::Tensor<T>& a, const osvi::Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("osvi_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
