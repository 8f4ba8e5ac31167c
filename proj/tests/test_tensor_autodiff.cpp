#include <cmath>
#include <cstdint>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "osvi/gradcheck.hpp"
#include "osvi/ops.hpp"
#include "osvi/optim.hpp"

using namespace osvi;
using testutil::random;
using D = double;
using kernels::ResampleMode;

namespace {

Tensor<D> values(const Var<D>& v) { return v.value(); }

// Hand-rolled numpy-style reference for one binary broadcast op.
Tensor<D> broadcast_ref(const Tensor<D>& a, const Tensor<D>& b, D (*op)(D, D)) {
  const Shape out = broadcast_shape(a.shape(), b.shape());
  Tensor<D> r(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  auto offset = [&](const Shape& s) {
    std::size_t off = 0;
    const std::size_t lead = rank - s.size();
    for (std::size_t d = 0; d < s.size(); ++d) off = off * s[d] + (s[d] == 1 ? 0 : idx[lead + d]);
    return off;
  };
  for (std::size_t i = 0; i < r.size(); ++i) {
    std::size_t rem = i;
    for (std::size_t d = rank; d-- > 0;) {
      idx[d] = rem % out[d];
      rem /= out[d];
    }
    r[i] = op(a[offset(a.shape())], b[offset(b.shape())]);
  }
  return r;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction checks data length and zero dims") {
    CHECK_THROWS_AS(Tensor<D>({2, 3}, std::vector<D>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor<D>({2, 0}), DimensionError);
    Tensor<D> t({2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
    CHECK_THROWS_AS(t.at({2, 0}), DimensionError);
  }

  TEST_CASE("frame_of slices the leading axis") {
    Tensor<D> v({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(frame_of(v, 1) == Tensor<D>({2}, {3, 4}));
    CHECK_THROWS_AS(frame_of(v, 3), DimensionError);
  }
}

TEST_SUITE("matmul") {
  TEST_CASE("identity") {
    Tape<D> t;
    auto c = matmul(t.constant(Tensor<D>({2, 2}, {1, 0, 0, 1})), t.constant(Tensor<D>({2, 2}, {5, 6, 7, 8})));
    CHECK(values(c) == Tensor<D>({2, 2}, {5, 6, 7, 8}));
  }
  TEST_CASE("hand multiplication") {
    Tape<D> t;
    auto c = matmul(t.constant(Tensor<D>({2, 2}, {1, 2, 3, 4})), t.constant(Tensor<D>({2, 1}, {1, 1})));
    CHECK(values(c) == Tensor<D>({2, 1}, {3, 7}));
  }
  TEST_CASE("zero left factor") {
    Rng r(3);
    Tape<D> t;
    auto c = matmul(t.constant(Tensor<D>({2, 3})), t.constant(random({3, 4}, r)));
    CHECK(values(c) == Tensor<D>({2, 4}));
  }
  TEST_CASE("inner mismatch names both shapes") {
    Tape<D> t;
    try {
      matmul(t.constant(Tensor<D>({2, 3})), t.constant(Tensor<D>({4, 2})));
      FAIL("no throw");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2x3") != std::string::npos);
      CHECK(msg.find("4x2") != std::string::npos);
    }
  }
  TEST_CASE("backward rules dA = dC Bt, dB = At dC") {
    Rng r(5);
    const auto a = random({3, 4}, r), b = random({4, 2}, r), dc = random({3, 2}, r);
    Tape<D> t;
    auto av = t.variable(a), bv = t.variable(b);
    t.backward(sum(mul(matmul(av, bv), t.constant(dc))));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        D want = 0;
        for (std::size_t j = 0; j < 2; ++j) want += dc.at({i, j}) * b.at({k, j});
        CHECK(av.grad().at({i, k}) == doctest::Approx(want).epsilon(1e-12));
      }
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t j = 0; j < 2; ++j) {
        D want = 0;
        for (std::size_t i = 0; i < 3; ++i) want += a.at({i, k}) * dc.at({i, j});
        CHECK(bv.grad().at({k, j}) == doctest::Approx(want).epsilon(1e-12));
      }
  }
}

TEST_SUITE("softmax") {
  TEST_CASE("examples") {
    Tape<D> t;
    auto a = softmax(t.constant(Tensor<D>({3}, {0, 0, 0})), 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.value()[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    auto b = softmax(t.constant(Tensor<D>({2}, {0, std::log(2.0)})), 0);
    CHECK(b.value()[0] == doctest::Approx(1.0 / 3).epsilon(1e-14));
    CHECK(b.value()[1] == doctest::Approx(2.0 / 3).epsilon(1e-14));
    auto c = softmax(t.constant(Tensor<D>({2}, {2, 2 - 1e9})), 0);
    CHECK(std::abs(c.value()[0] - 1.0) <= 1e-12);
    CHECK(std::abs(c.value()[1]) <= 1e-12);
  }
  TEST_CASE("slices sum to one, shift invariance, monotone") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r(seed);
      const auto x = random({4, 5, 3}, r, -20, 20);
      for (std::size_t axis = 0; axis < 3; ++axis) {
        Tape<D> t;
        const auto y = softmax(t.constant(x), axis).value();
        const auto s = sum_axis(t.constant(y), axis).value();
        for (D v : s.data()) CHECK(std::abs(v - 1.0) <= 1e-6);
      }
      // add a constant to one slice along axis 2 (index i, j fixed)
      Tensor<D> shifted = x;
      for (std::size_t k = 0; k < 3; ++k) shifted.at({1, 2, k}) += 7.5;
      Tape<D> t;
      const auto y0 = softmax(t.constant(x), 2).value();
      const auto y1 = softmax(t.constant(shifted), 2).value();
      CHECK(testutil::max_abs_diff(y0, y1) <= 1e-6);
      // raising one entry raises its own weight
      Tensor<D> up = x;
      up.at({0, 0, 1}) += 0.5;
      const auto y2 = softmax(t.constant(up), 2).value();
      CHECK(y2.at({0, 0, 1}) > y0.at({0, 0, 1}));
      CHECK(y2.at({0, 0, 0}) <= y0.at({0, 0, 0}));
    }
  }
  TEST_CASE("bad axis") {
    Tape<D> t;
    CHECK_THROWS_AS(softmax(t.constant(Tensor<D>({2, 2})), 2), DimensionError);
  }
}

TEST_SUITE("layer_norm") {
  TEST_CASE("examples") {
    Tape<D> t;
    auto ones = t.constant(Tensor<D>({2}, {1, 1}));
    auto zeros = t.constant(Tensor<D>({2}));
    auto a = layer_norm(t.constant(Tensor<D>({2}, {1, 3})), ones, zeros, 0.0);
    CHECK(a.value()[0] == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(a.value()[1] == doctest::Approx(1.0).epsilon(1e-15));
    auto b = layer_norm(t.constant(Tensor<D>({3}, {5, 5, 5})), t.constant(Tensor<D>({3}, {1, 1, 1})),
                        t.constant(Tensor<D>({3})));
    for (D v : b.value().data()) CHECK(v == 0.0);
    Rng r(1);
    auto c = layer_norm(t.constant(random({4, 3}, r)), t.constant(Tensor<D>({3})),
                        t.constant(Tensor<D>({3}, {7, 7, 7})));
    for (D v : c.value().data()) CHECK(v == 7.0);
  }
  TEST_CASE("tokens come out with zero mean and unit population variance") {
    Rng r(2);
    Tape<D> t;
    auto y = layer_norm(t.constant(random({6, 8}, r, -3, 5)), t.constant(Tensor<D>({8}, 1.0)),
                        t.constant(Tensor<D>({8})), 1e-12)
                 .value();
    for (std::size_t i = 0; i < 6; ++i) {
      D m = 0, v = 0;
      for (std::size_t c = 0; c < 8; ++c) m += y.at({i, c});
      m /= 8;
      for (std::size_t c = 0; c < 8; ++c) v += (y.at({i, c}) - m) * (y.at({i, c}) - m);
      CHECK(std::abs(m) < 1e-12);
      CHECK(v / 8 == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_SUITE("conv2d") {
  TEST_CASE("1x1 kernel of 2 doubles the input") {
    Rng r(1);
    const auto x = random({1, 4, 4}, r);
    Tape<D> t;
    auto y = conv2d<D>(t.constant(x), t.constant(Tensor<D>({1, 1, 1, 1}, 2.0)), nullptr, 1, 0);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.value()[i] == 2 * x[i]);
  }
  TEST_CASE("3x3 ones on constant input: interior 9, corner 4") {
    Tape<D> t;
    auto y = conv2d<D>(t.constant(Tensor<D>({1, 5, 5}, 1.0)), t.constant(Tensor<D>({1, 1, 3, 3}, 1.0)), nullptr, 1, 1);
    CHECK(y.value().at({0, 2, 2}) == 9.0);
    CHECK(y.value().at({0, 0, 0}) == 4.0);
  }
  TEST_CASE("zero weights with bias give a constant map") {
    Tape<D> t;
    Rng r(4);
    auto b = t.constant(Tensor<D>({2}, {0.25, -3}));
    auto y = conv2d(t.constant(random({3, 4, 6}, r)), t.constant(Tensor<D>({2, 3, 3, 3})), &b, 1, 1);
    for (std::size_t i = 0; i < 24; ++i) CHECK(y.value()[i] == 0.25);
    for (std::size_t i = 24; i < 48; ++i) CHECK(y.value()[i] == -3.0);
  }
  TEST_CASE("output geometry and stride errors") {
    Tape<D> t;
    auto y = conv2d<D>(t.constant(Tensor<D>({1, 8, 12})), t.constant(Tensor<D>({1, 1, 3, 3})), nullptr, 2, 1);
    CHECK(y.shape() == Shape{1, 4, 6});
    CHECK_THROWS_AS(conv2d<D>(t.constant(Tensor<D>({1, 7, 12})), t.constant(Tensor<D>({1, 1, 3, 3})), nullptr, 2, 1),
                    GeometryError);
    CHECK_THROWS_AS(conv2d<D>(t.constant(Tensor<D>({1, 8, 8})), t.constant(Tensor<D>({1, 1, 2, 2})), nullptr, 1, 1),
                    GeometryError);
    CHECK_THROWS_AS(conv2d<D>(t.constant(Tensor<D>({2, 8, 8})), t.constant(Tensor<D>({1, 1, 3, 3})), nullptr, 1, 1),
                    DimensionError);
  }
  TEST_CASE("matches direct summation on random input") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng r(seed);
      const auto x = random({3, 6, 8}, r), w = random({4, 3, 3, 3}, r), b = random({4}, r);
      Tape<D> t;
      auto bv = t.constant(b);
      auto y = conv2d(t.constant(x), t.constant(w), &bv, 1, 1).value();
      for (std::size_t co = 0; co < 4; ++co)
        for (std::size_t i = 0; i < 6; ++i)
          for (std::size_t j = 0; j < 8; ++j) {
            D acc = b[co];
            for (std::size_t ci = 0; ci < 3; ++ci)
              for (int ky = -1; ky <= 1; ++ky)
                for (int kx = -1; kx <= 1; ++kx) {
                  const int yy = static_cast<int>(i) + ky, xx = static_cast<int>(j) + kx;
                  if (yy < 0 || xx < 0 || yy >= 6 || xx >= 8) continue;
                  acc += w.at({co, ci, std::size_t(ky + 1), std::size_t(kx + 1)}) *
                         x.at({ci, std::size_t(yy), std::size_t(xx)});
                }
            CHECK(y.at({co, i, j}) == doctest::Approx(acc).epsilon(1e-12));
          }
    }
  }
}

TEST_SUITE("resample") {
  TEST_CASE("avg pool of a constant stays constant") {
    Tape<D> t;
    auto y = resample(t.constant(Tensor<D>({2, 7, 9}, 0.3)), 3, 4, ResampleMode::kAdaptiveAvgPool);
    CHECK(y.shape() == Shape{2, 3, 4});
    for (D v : y.value().data()) CHECK(v == doctest::Approx(0.3).epsilon(1e-15));
  }
  TEST_CASE("max pool with one set pixel per cell is all ones") {
    Tensor<D> m({8, 8});
    Rng r(2);
    for (std::size_t cy = 0; cy < 2; ++cy)
      for (std::size_t cx = 0; cx < 2; ++cx) m.at({cy * 4 + r.index(4), cx * 4 + r.index(4)}) = 1.0;
    Tape<D> t;
    auto y = resample(t.constant(m), 2, 2, ResampleMode::kMaxPool);
    for (D v : y.value().data()) CHECK(v == 1.0);
  }
  TEST_CASE("2x nearest up duplicates") {
    Tape<D> t;
    auto y = resample(t.constant(Tensor<D>({1, 1, 2}, {1, 2})), 2, 4, ResampleMode::kNearestUp);
    CHECK(y.value() == Tensor<D>({1, 2, 4}, {1, 1, 2, 2, 1, 1, 2, 2}));
  }
  TEST_CASE("bilinear up keeps constants and bounds") {
    Rng r(6);
    Tape<D> t;
    auto c = resample(t.constant(Tensor<D>({1, 3, 5}, 0.7)), 6, 10, ResampleMode::kBilinearUp);
    for (D v : c.value().data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-14));
    const auto x = random({2, 3, 5}, r, 0, 1);
    auto y = resample(t.constant(x), 12, 20, ResampleMode::kBilinearUp);
    for (D v : y.value().data()) CHECK((v >= 0.0 && v <= 1.0));
  }
  TEST_CASE("mode direction errors") {
    Tape<D> t;
    CHECK_THROWS_AS(resample(t.constant(Tensor<D>({1, 2, 2})), 4, 4, ResampleMode::kAdaptiveAvgPool), ModeError);
    CHECK_THROWS_AS(resample(t.constant(Tensor<D>({1, 2, 2})), 4, 4, ResampleMode::kMaxPool), ModeError);
    CHECK_THROWS_AS(resample(t.constant(Tensor<D>({1, 4, 4})), 2, 2, ResampleMode::kNearestUp), ModeError);
    CHECK_THROWS_AS(resample(t.constant(Tensor<D>({1, 4, 4})), 2, 2, ResampleMode::kBilinearUp), ModeError);
  }
  TEST_CASE("adaptive avg pool matches cell means") {
    Rng r(9);
    const auto x = random({1, 7, 10}, r);
    Tape<D> t;
    auto y = resample(t.constant(x), 3, 4, ResampleMode::kAdaptiveAvgPool).value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const std::size_t y0 = (i * 7) / 3, y1 = ((i + 1) * 7 + 2) / 3;
        const std::size_t x0 = (j * 10) / 4, x1 = ((j + 1) * 10 + 3) / 4;
        D s = 0;
        for (std::size_t a = y0; a < y1; ++a)
          for (std::size_t b = x0; b < x1; ++b) s += x.at({0, a, b});
        CHECK(y.at({0, i, j}) == doctest::Approx(s / D((y1 - y0) * (x1 - x0))).epsilon(1e-13));
      }
  }
}

TEST_SUITE("elementwise") {
  TEST_CASE("examples") {
    Tape<D> t;
    CHECK(relu(t.constant(Tensor<D>({2}, {-1, 2}))).value() == Tensor<D>({2}, {0, 2}));
    CHECK(sigmoid(t.constant(Tensor<D>({1}, {0}))).value()[0] == 0.5);
    Rng r(1);
    const auto a = random({2, 3, 4}, r), b = random({3, 3, 4}, r);
    auto c = concat<D>({t.constant(a), t.constant(b)}, 0);
    CHECK(c.shape() == Shape{5, 3, 4});
    CHECK(slice(c, 0, 0, 2).value() == a);
    CHECK(slice(c, 0, 2, 5).value() == b);
  }
  TEST_CASE("broadcasting matches the index-literal reference") {
    Rng r(4);
    const std::vector<std::pair<Shape, Shape>> cases = {
        {{3, 4}, {4}}, {{2, 1, 4}, {3, 1}}, {{1}, {2, 3}}, {{5, 1, 1}, {1, 2, 3}}};
    for (const auto& [sa, sb] : cases) {
      const auto a = random(sa, r), b = random(sb, r);
      Tape<D> t;
      auto x = t.constant(a), y = t.constant(b);
      CHECK(add(x, y).value() == broadcast_ref(a, b, [](D p, D q) { return p + q; }));
      CHECK(sub(x, y).value() == broadcast_ref(a, b, [](D p, D q) { return p - q; }));
      CHECK(mul(x, y).value() == broadcast_ref(a, b, [](D p, D q) { return p * q; }));
    }
  }
  TEST_CASE("incompatible shapes") {
    Tape<D> t;
    CHECK_THROWS_AS(add(t.constant(Tensor<D>({2, 3})), t.constant(Tensor<D>({2}))), DimensionError);
    CHECK_THROWS_AS(concat<D>({t.constant(Tensor<D>({2, 3})), t.constant(Tensor<D>({2, 4}))}, 0), DimensionError);
  }
  TEST_CASE("gelu and finiteness") {
    Tape<D> t;
    auto g = gelu(t.constant(Tensor<D>({3}, {-30, 0, 30}))).value();
    CHECK(std::abs(g[0]) < 1e-12);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == doctest::Approx(30.0));
  }
}

TEST_SUITE("masked_fill") {
  TEST_CASE("examples") {
    Tape<D> t;
    auto s = t.constant(Tensor<D>({2, 2}, {1, 2, 3, 4}));
    Tensor<std::uint8_t> m({2, 2});
    m.at({0, 1}) = 1;
    CHECK(masked_fill(s, m).value() == Tensor<D>({2, 2}, {1, -1e9, 3, 4}));
    CHECK(masked_fill(s, Tensor<std::uint8_t>({2, 2})).value() == s.value());
    CHECK(masked_fill(s, Tensor<std::uint8_t>({2, 2}, 1)).value() == Tensor<D>({2, 2}, -1e9));
    CHECK_THROWS_AS(masked_fill(s, Tensor<std::uint8_t>({2, 3})), DimensionError);
  }
  TEST_CASE("perturbing masked entries changes nothing downstream") {
    Rng r(7);
    const auto s = random({3, 5}, r);
    Tensor<std::uint8_t> m({3, 5});
    for (auto& v : m.data()) v = r.uniform() < 0.4;
    m.at({0, 0}) = 0;
    auto run = [&](const Tensor<D>& in, Tensor<D>& grad) {
      Tape<D> t;
      auto x = t.variable(in);
      auto y = sum(mul(softmax(masked_fill(x, m), 1), t.constant(Tensor<D>({3, 5}, 0.3))));
      t.backward(y);
      grad = x.grad();
      return y.value().item();
    };
    Tensor<D> g0, g1;
    const D y0 = run(s, g0);
    Tensor<D> noisy = s;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (m[i]) noisy[i] += r.uniform(-100, 100);
    const D y1 = run(noisy, g1);
    CHECK(y0 == y1);
    CHECK(g0 == g1);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (m[i]) CHECK(g0[i] == 0.0);
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum gives ones, square gives 2x") {
    Rng r(1);
    Tape<D> t;
    auto x = t.variable(random({2, 3, 4}, r));
    t.backward(sum(x));
    for (D g : x.grad().data()) CHECK(g == 1.0);
    Tape<D> t2;
    auto y = t2.variable(Tensor<D>({1}, {3.0}));
    t2.backward(mul(y, y));
    CHECK(y.grad()[0] == 6.0);
  }
  TEST_CASE("non-scalar root and double sweep are contract errors") {
    Tape<D> t;
    auto x = t.variable(Tensor<D>({2}, {1, 2}));
    CHECK_THROWS_AS(t.backward(x), ContractError);
    auto y = sum(x);
    t.backward(y);
    CHECK_THROWS_AS(t.backward(y), ContractError);
  }
  TEST_CASE("unreachable leaves hold zero; shared inputs accumulate") {
    Tape<D> t;
    auto x = t.variable(Tensor<D>({2}, {1, 2}));
    auto unused = t.variable(Tensor<D>({3}, {1, 2, 3}));
    t.backward(sum(add(mul(x, x), scale(x, 3.0))));
    CHECK(x.grad() == Tensor<D>({2}, {5, 7}));
    CHECK(unused.grad() == Tensor<D>({3}));
  }
  TEST_CASE("parameters accumulate across tapes") {
    Parameter<D> p{"p", Tensor<D>({2}, {1, -2}), Tensor<D>({2})};
    for (int k = 0; k < 2; ++k) {
      Tape<D> t;
      t.backward(sum(mul(t.parameter(p), t.parameter(p))));
    }
    CHECK(p.grad == Tensor<D>({2}, {4, -8}));
  }
  TEST_CASE("determinism: two runs give bit-identical gradients") {
    auto run = [] {
      Rng r(11);
      Tape<D> t;
      auto q = t.variable(random({6, 4}, r)), k = t.variable(random({6, 4}, r)), v = t.variable(random({6, 4}, r));
      kernels::AttentionShape sh{6, 4, 2, 1};
      auto y = attention(q, k, v, sh, kernels::AttentionMask{}, 0.5);
      t.backward(sum(mul(y, y)));
      return std::vector<Tensor<D>>{q.grad(), k.grad(), v.grad()};
    };
    CHECK(run() == run());
  }
}

TEST_SUITE("grad_check") {
  TEST_CASE("kink re-probing: a near kink resolves, a wrong gradient does not") {
    Parameter<D> p{"w", Tensor<D>({2}), {}};
    p.value[0] = 0.3 + 2e-6;  // relu kink at 0.3, closer than the 1e-5 step
    p.value[1] = 0.7;
    std::vector<Parameter<D>*> ps{&p};
    auto kinked = [&](Tape<D>& t) { return sum(relu(add_scalar(t.parameter(p), -0.3))); };
    const GradCheckReport a = grad_check_params_report(kinked, ps, 1e-5, 0, 0, 1e-4);
    CHECK(a.worst > 1e-2);
    CHECK(a.kinks == 1);
    CHECK(a.worst_resolved <= 1e-6);
    // d/dw of w^2 + detach(w)·w reads 3w on the tape but is 4w numerically
    auto wrong = [&](Tape<D>& t) {
      Var<D> w = t.parameter(p);
      return sum(add(mul(w, w), mul(detach(w), w)));
    };
    const GradCheckReport b = grad_check_params_report(wrong, ps, 1e-5, 0, 0, 1e-4);
    CHECK(b.kinks == 0);
    CHECK(b.worst_resolved > 0.1);
    CHECK(grad_check_params(wrong, ps, 1e-5, 0, 0) == b.worst);
  }
  TEST_CASE("sum of squares") {
    Rng r(0);
    const double e = grad_check([](Tape<D>&, Var<D> x) { return sum(mul(x, x)); }, random({3, 4}, r));
    CHECK(e <= 1e-8);
  }
  TEST_CASE("softmax and matmul chain") {
    Rng r(1);
    const auto w = random({4, 3}, r);
    const double e = grad_check(
        [&](Tape<D>& t, Var<D> x) {
          auto p = softmax(matmul(x, t.constant(w)), 1);
          return sum(mul(p, p));
        },
        random({2, 4}, r));
    CHECK(e <= 1e-6);
  }
  TEST_CASE("masked coordinate has exactly zero analytic gradient") {
    Tensor<std::uint8_t> m({3});
    m[1] = 1;
    Tape<D> t;
    auto x = t.variable(Tensor<D>({3}, {0.1, 0.2, 0.3}));
    t.backward(sum(softmax(masked_fill(x, m), 0)));
    CHECK(x.grad()[1] == 0.0);
    const double e = grad_check([&](Tape<D>&, Var<D> v) { return sum(mul(softmax(masked_fill(v, m), 0), v)); },
                                Tensor<D>({3}, {0.1, 0.2, 0.3}));
    CHECK(e <= 1e-8);
  }
  TEST_CASE("non-finite values raise") {
    CHECK_THROWS_AS(grad_check([](Tape<D>& t, Var<D> x) {
                      return sum(mul(x, t.constant(Tensor<D>({1}, std::numeric_limits<D>::infinity()))));
                    },
                               Tensor<D>({1}, {1.0})),
                    EvaluationError);
  }
  TEST_CASE("randomized ops over seeds 0-9") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r(seed);
      const std::size_t a = 1 + r.index(8), b = 1 + r.index(8);
      const auto w = random({b, 3}, r), g = random({b}, r), beta = random({b}, r);
      const auto proj = random({a, 3}, r);
      double e = grad_check(
          [&](Tape<D>& t, Var<D> x) {
            auto h = layer_norm(x, t.constant(g), t.constant(beta));
            auto s = log_softmax(matmul(gelu(h), t.constant(w)), 1);
            return sum(mul(s, t.constant(proj)));
          },
          random({a, b}, r));
      CHECK(e <= 1e-4);
      const auto weights = random({b, b}, r);
      e = grad_check(
          [&](Tape<D>& t, Var<D> x) {
            auto y = sigmoid(add(mean_axis(x, 0), sum_axis(transpose(x), 1)));
            return sum(mul(y, t.constant(weights)));
          },
          random({b, b}, r));
      CHECK(e <= 1e-4);
    }
  }
}

TEST_SUITE("adam") {
  TEST_CASE("first step moves lr against the gradient sign") {
    Parameter<D> p{"p", Tensor<D>({4}, {1, 1, 1, 1}), Tensor<D>({4}, {0.3, -2e-3, 50, -1})};
    auto st = make_adam_state<D>({&p});
    adam_step<D>({&p}, st);
    const D lr = st.config.lr;
    const D want[4] = {1 - lr, 1 + lr, 1 - lr, 1 + lr};
    for (int i = 0; i < 4; ++i) CHECK(std::abs(p.value[i] - want[i]) <= lr * 1e-4);
    CHECK(st.step == 1);
  }
  TEST_CASE("zero gradient leaves parameters and decays moments") {
    Parameter<D> p{"p", Tensor<D>({2}, {0.5, -0.5}), Tensor<D>({2}, {1, 1})};
    auto st = make_adam_state<D>({&p});
    adam_step<D>({&p}, st);
    const auto after1 = p.value;
    const D m1 = st.m[0][0], v1 = st.v[0][0];
    p.grad.fill(0.0);
    // with zero grad m decays but the bias-corrected ratio still moves p
    adam_step<D>({&p}, st);
    CHECK(st.m[0][0] == doctest::Approx(0.9 * m1));
    CHECK(st.v[0][0] == doctest::Approx(0.999 * v1));
    Parameter<D> q{"q", Tensor<D>({2}, {0.5, -0.5}), Tensor<D>({2})};
    auto sq = make_adam_state<D>({&q});
    adam_step<D>({&q}, sq);
    CHECK(q.value == Tensor<D>({2}, {0.5, -0.5}));
    CHECK(after1 != p.value);
  }
  TEST_CASE("constant gradient: per-step update bounded by lr") {
    Parameter<D> p{"p", Tensor<D>({3}, {0, 0, 0}), Tensor<D>({3}, {0.7, -3, 1e-3})};
    auto st = make_adam_state<D>({&p});
    Tensor<D> prev = p.value;
    for (int s = 1; s <= 2; ++s) {
      adam_step<D>({&p}, st);
      for (std::size_t i = 0; i < 3; ++i) {
        const D g = p.grad[i];
        // closed form for a constant gradient: m̂ = g, v̂ = g², step = lr·|g|/(|g|+ε)
        const D want = st.config.lr * std::abs(g) / (std::abs(g) + st.config.eps);
        CHECK(std::abs(p.value[i] - prev[i]) == doctest::Approx(want).epsilon(1e-9));
        CHECK(std::abs(p.value[i] - prev[i]) <= st.config.lr * (1 + 1e-6));
      }
      prev = p.value;
    }
  }
  TEST_CASE("shape mismatch") {
    Parameter<D> p{"p", Tensor<D>({3}), Tensor<D>({2})};
    auto st = make_adam_state<D>({&p});
    CHECK_THROWS_AS(adam_step<D>({&p}, st), DimensionError);
  }
}
