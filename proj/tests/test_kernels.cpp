#include <omp.h>

#include <cstdint>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "osvi/kernels.hpp"
#include "osvi/reference.hpp"

using namespace osvi;
using testutil::random;

namespace {

template <typename T>
double max_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
std::vector<T> rvec(std::size_t n, Rng& r) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(r.uniform(-1, 1));
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

struct ThreadGuard {
  int saved = omp_get_max_threads();
  ~ThreadGuard() { omp_set_num_threads(saved); }
};

kernels::AttentionMask random_mask(kernels::AttentionMask::Kind kind, std::size_t n, Rng& r) {
  kernels::AttentionMask m;
  m.kind = kind;
  m.tokens = n;
  if (kind == kernels::AttentionMask::Kind::kKey) {
    m.key.resize(n);
    for (auto& v : m.key) v = r.uniform() < 0.4;
  } else if (kind == kernels::AttentionMask::Kind::kPair) {
    m.pair.resize(n * n);
    for (auto& v : m.pair) v = r.uniform() < 0.4;
    for (std::size_t j = 0; j < n; ++j) m.pair[j] = 1;  // query 0 sees nothing
  }
  return m;
}

}  // namespace

TEST_CASE_TEMPLATE("gemm matches the triple loop for every transpose combination", T, float, double) {
  const double tol = sizeof(T) == 4 ? 1e-4 : 1e-12;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng r(seed);
    const std::size_t m = 1 + r.index(37), n = 1 + r.index(29), k = 1 + r.index(41);
    for (int ta = 0; ta < 2; ++ta)
      for (int tb = 0; tb < 2; ++tb) {
        const auto a = rvec<T>(m * k, r), b = rvec<T>(k * n, r);
        auto c0 = rvec<T>(m * n, r);
        auto c1 = c0;
        const T beta = seed % 2 ? T(0.5) : T(0);
        kernels::gemm<T>(ta, tb, m, n, k, T(1.5), a.data(), b.data(), beta, c0.data());
        reference::gemm<T>(ta, tb, m, n, k, T(1.5), a.data(), b.data(), beta, c1.data());
        CHECK(max_diff(c0, c1) <= tol);
      }
  }
}

TEST_CASE("conv forward matches the direct loop (2-D and 3-D, strides, padding)") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng r(seed);
    kernels::ConvGeometry g;
    g.in_channels = 1 + r.index(4);
    g.out_channels = 1 + r.index(5);
    g.kernel = seed % 3 == 0 ? 1 : 3;
    g.pad = g.kernel / 2;
    g.stride = 1 + r.index(2);
    g.height = g.stride * (2 + r.index(5));
    g.width = g.stride * (2 + r.index(6));
    if (seed % 2) {
      g.depth = 2 + r.index(4);
      g.kernel_d = 3;
      g.pad_d = 1;
      g.stride_d = 1 + (g.depth % 2 == 0 ? r.index(2) : 0);
    }
    g.validate();
    const auto x = rvec<double>(g.in_channels * g.depth * g.height * g.width, r);
    const auto w = rvec<double>(g.out_channels * g.patch(), r);
    const auto b = rvec<double>(g.out_channels, r);
    std::vector<double> y0(g.out_channels * g.out_pixels()), y1(y0.size());
    kernels::conv_forward(g, x.data(), w.data(), b.data(), y0.data());
    reference::conv_forward(g, x.data(), w.data(), b.data(), y1.data());
    CHECK(max_diff(y0, y1) <= 1e-12);
  }
}

TEST_CASE("conv backward is the adjoint of the forward map") {
  // sum(conv(x, w) * dy) is bilinear in (x, w): <dx, x> and <dw, w> both equal it.
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng r(seed + 100);
    kernels::ConvGeometry g;
    g.in_channels = 2 + r.index(3);
    g.out_channels = 1 + r.index(3);
    g.kernel = 3;
    g.pad = 1;
    g.stride = 1 + seed % 2;
    g.height = 4 * (1 + r.index(3));
    g.width = 4 * (1 + r.index(3));
    const auto x = rvec<double>(g.in_channels * g.height * g.width, r);
    const auto w = rvec<double>(g.out_channels * g.patch(), r);
    const auto dy = rvec<double>(g.out_channels * g.out_pixels(), r);
    std::vector<double> y(dy.size());
    reference::conv_forward<double>(g, x.data(), w.data(), nullptr, y.data());
    const double s = dot(y, dy);
    std::vector<double> dx(x.size()), dw(w.size()), db(g.out_channels);
    kernels::conv_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    CHECK(dot(dx, x) == doctest::Approx(s).epsilon(1e-11));
    CHECK(dot(dw, w) == doctest::Approx(s).epsilon(1e-11));
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      double want = 0;
      for (std::size_t p = 0; p < g.out_pixels(); ++p) want += dy[co * g.out_pixels() + p];
      CHECK(db[co] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax rows match the reference") {
  Rng r(3);
  auto a = rvec<double>(7 * 13, r);
  for (auto& v : a) v *= 30;
  auto b = a;
  kernels::softmax_rows(a.data(), 7, 13);
  reference::softmax_rows(b.data(), 7, 13);
  CHECK(max_diff(a, b) <= 1e-14);
}

TEST_CASE("softmax bits do not depend on the row address") {
  Rng r(5);
  const auto src = rvec<float>(3 * 37, r);
  std::vector<float> a(src.size() + 16);
  std::vector<float> want;
  for (std::size_t shift = 0; shift < 16; ++shift) {
    std::copy(src.begin(), src.end(), a.begin() + shift);
    kernels::softmax_rows(a.data() + shift, 3, 37);
    std::vector<float> got(a.begin() + shift, a.begin() + shift + src.size());
    if (want.empty()) want = got;
    CHECK(got == want);
  }
}

TEST_CASE("fused attention matches the spelled-out reference") {
  using Kind = kernels::AttentionMask::Kind;
  for (Kind kind : {Kind::kNone, Kind::kKey, Kind::kPair}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Rng r(seed * 7 + static_cast<int>(kind));
      kernels::AttentionShape s;
      s.groups = kind == Kind::kPair ? 1 : 1 + r.index(3);
      s.heads = 1 + r.index(3);
      s.channels = s.heads * (1 + r.index(4));
      s.tokens = s.groups * (2 + r.index(9));
      const auto mask = random_mask(kind, s.tokens, r);
      const std::size_t nc = s.tokens * s.channels;
      const auto q = rvec<double>(nc, r), k = rvec<double>(nc, r), v = rvec<double>(nc, r);
      std::vector<double> o0(nc), o1(nc);
      std::vector<double> probs(s.groups * s.heads * s.group_tokens() * s.group_tokens());
      kernels::attention_forward(s, mask, 0.7, -1e9, q.data(), k.data(), v.data(), o0.data(), probs.data());
      reference::attention_forward(s, mask, 0.7, -1e9, q.data(), k.data(), v.data(), o1.data());
      CHECK(max_diff(o0, o1) <= 1e-12);
    }
  }
}

TEST_CASE("parallel kernels give identical bits for any thread count") {
  ThreadGuard guard;
  Rng r(42);
  kernels::ConvGeometry g;
  g.in_channels = 8;
  g.out_channels = 12;
  g.kernel = 3;
  g.pad = 1;
  g.height = 24;
  g.width = 40;
  const auto x = rvec<float>(g.in_channels * g.height * g.width, r);
  const auto w = rvec<float>(g.out_channels * g.patch(), r);
  const auto dy = rvec<float>(g.out_channels * g.out_pixels(), r);
  kernels::AttentionShape s{96, 16, 4, 3};
  const auto q = rvec<float>(96 * 16, r), k = rvec<float>(96 * 16, r), v = rvec<float>(96 * 16, r);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    std::vector<float> y(dy.size()), dx(x.size()), dw(w.size()), o(96 * 16), p(3 * 4 * 32 * 32);
    kernels::conv_forward<float>(g, x.data(), w.data(), nullptr, y.data());
    kernels::conv_backward<float>(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), nullptr);
    kernels::attention_forward<float>(s, kernels::AttentionMask{}, 0.5f, -1e9f, q.data(), k.data(), v.data(),
                                      o.data(), p.data());
    std::vector<float> all;
    for (const auto* part : {&y, &dx, &dw, &o}) all.insert(all.end(), part->begin(), part->end());
    return all;
  };
  const auto one = run(1);
  CHECK(run(3) == one);
  CHECK(run(4) == one);
}

TEST_CASE("geometry validation") {
  kernels::ConvGeometry g;
  g.in_channels = g.out_channels = 1;
  g.height = g.width = 6;
  g.kernel = 4;
  CHECK_THROWS_AS(g.validate(), GeometryError);
  g.kernel = 3;
  g.pad = 1;
  g.stride = 4;
  CHECK_THROWS_AS(g.validate(), GeometryError);
  g.strict = false;
  CHECK_NOTHROW(g.validate());
  CHECK(g.out_height() == 2);
}
