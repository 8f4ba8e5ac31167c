#include <cmath>
#include <limits>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "osvi/gradcheck.hpp"
#include "osvi/losses.hpp"
#include "osvi/trainer.hpp"

using namespace osvi;
using testutil::random;
using D = double;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.batch = 2;
  c.snippet_len = 3;
  c.height = 16;
  c.width = 24;
  c.attention = AttentionConfig{8, 2, 1, 16};
  c.lr = 1e-3;
  c.seed = 4;
  return c;
}

std::vector<Snippet> small_data(std::size_t n, std::uint64_t seed = 70) {
  SynthConfig sc;
  sc.frames = 3;
  sc.height = 16;
  sc.width = 24;
  std::vector<Snippet> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(synthesize_snippet(seed + i, sc));
  return out;
}

Tensor<D> binary(Shape s, Rng& r, double p = 0.4) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = r.uniform() < p ? 1.0 : 0.0;
  return t;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("mask loss: saturated, uniform, empty") {
    Rng r(1);
    const auto gt = binary({6, 7}, r);
    Tape<D> t;
    Tensor<D> logits({2, 6, 7});
    for (std::size_t i = 0; i < 42; ++i) {
      logits[i] = gt[i] > 0 ? -20 : 20;
      logits[42 + i] = gt[i] > 0 ? 20 : -20;
    }
    CHECK(mask_loss<D>(t, {t.constant(logits), t.constant(logits)}, {gt, gt}).value().item() <= 1e-8);
    auto u = mask_loss<D>(t, {t.constant(Tensor<D>({2, 6, 7}))}, {gt}).value().item();
    CHECK(u == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(mask_loss<D>(t, {}, {}).value().item() == 0.0);
  }
  TEST_CASE("mask loss equals the per-pixel cross-entropy mean") {
    Rng r(2);
    const auto l0 = random({2, 4, 5}, r, -3, 3), l1 = random({2, 4, 5}, r, -3, 3);
    const auto g0 = binary({4, 5}, r), g1 = binary({4, 5}, r);
    D want = 0;
    for (const auto& [l, g] : {std::pair{&l0, &g0}, std::pair{&l1, &g1}})
      for (std::size_t p = 0; p < 20; ++p) {
        const D a = (*l)[p], b = (*l)[20 + p];
        const D lse = std::log(std::exp(a) + std::exp(b));
        want += lse - ((*g)[p] > 0 ? b : a);
      }
    want /= 40;
    Tape<D> t;
    CHECK(mask_loss<D>(t, {t.constant(l0), t.constant(l1)}, {g0, g1}).value().item() ==
          doctest::Approx(want).epsilon(1e-13));
    const double e = grad_check([&](Tape<D>& tt, Var<D> x) { return mask_loss<D>(tt, {x, tt.constant(l1)}, {g0, g1}); },
                                l0);
    CHECK(e <= 1e-4);
  }
  TEST_CASE("region losses: uniform error, outside-only error, empty mask") {
    Rng r(3);
    const auto gt = random({2, 3, 5, 6}, r, 0, 1);
    const auto m = binary({2, 5, 6}, r);
    Tape<D> t;
    Tensor<D> pred = gt;
    for (auto& v : pred.data()) v += 0.125;
    auto a = region_losses<D>(t, t.constant(pred), gt, m);
    CHECK(std::abs(a.object.value().item() - 0.125) <= 1e-7);
    CHECK(std::abs(a.valid.value().item() - 0.125) <= 1e-7);

    Tensor<D> outside = gt;
    for (std::size_t f = 0; f < 2; ++f)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 30; ++p)
          if (m[f * 30 + p] == 0) outside[(f * 3 + c) * 30 + p] += 0.3;
    CHECK(region_losses<D>(t, t.constant(outside), gt, m).object.value().item() == 0.0);

    const auto err = random({2, 3, 5, 6}, r, -0.2, 0.2);
    Tensor<D> p2 = gt;
    D mean_abs = 0;
    for (std::size_t i = 0; i < p2.size(); ++i) {
      p2[i] += err[i];
      mean_abs += std::abs(err[i]);
    }
    auto e = region_losses<D>(t, t.constant(p2), gt, Tensor<D>({2, 5, 6}));
    CHECK(e.object.value().item() == 0.0);
    CHECK(e.valid.value().item() == doctest::Approx(mean_abs / D(p2.size())).epsilon(1e-13));
  }
  TEST_CASE("region losses are scale-equivariant") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r(seed);
      const auto gt = random({2, 3, 4, 4}, r, 0, 1);
      const auto m = binary({2, 4, 4}, r);
      const auto err = random({2, 3, 4, 4}, r, -0.3, 0.3);
      const D c = r.uniform(0.1, 4.0);
      Tensor<D> p1 = gt, p2 = gt;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        p1[i] += err[i];
        p2[i] += c * err[i];
      }
      Tape<D> t;
      auto a = region_losses<D>(t, t.constant(p1), gt, m), b = region_losses<D>(t, t.constant(p2), gt, m);
      CHECK(b.object.value().item() == doctest::Approx(c * a.object.value().item()).epsilon(1e-12));
      CHECK(b.valid.value().item() == doctest::Approx(c * a.valid.value().item()).epsilon(1e-12));
    }
  }
  TEST_CASE("gan objectives at D = 0.5 and at the optimum") {
    Tape<D> t;
    auto half = t.constant(Tensor<D>::scalar(0.5));
    CHECK(discriminator_objective(half, half).value().item() == doctest::Approx(-2 * std::log(2.0)).epsilon(1e-15));
    CHECK(adversarial_loss(half).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    auto one = t.constant(Tensor<D>::scalar(1.0)), zero = t.constant(Tensor<D>::scalar(0.0));
    const D best = discriminator_objective(one, zero).value().item();
    CHECK(best <= 0.0);
    CHECK(best >= -3e-6);
    CHECK(std::isfinite(adversarial_loss(zero).value().item()));
  }
  TEST_CASE("discriminator output lies in (0, 1)") {
    Discriminator<D> d(3);
    Rng r(4);
    for (int k = 0; k < 3; ++k) {
      Tape<D> t;
      const D p = d(t, t.constant(random({7, 3, 16, 24}, r, 0, 1))).value().item();
      CHECK((p > 0.0 && p < 1.0));
    }
  }
  TEST_CASE("total loss is the plain sum; gradients are linear in the terms") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r(seed);
      const D v[4] = {r.uniform(0, 2), r.uniform(0, 2), r.uniform(0, 2), r.uniform(0, 2)};
      Tape<D> t;
      Var<D> a = t.variable(Tensor<D>::scalar(v[0])), b = t.variable(Tensor<D>::scalar(v[1]));
      Var<D> c = t.variable(Tensor<D>::scalar(v[2])), d = t.variable(Tensor<D>::scalar(v[3]));
      auto tot = total_loss(a, b, c, d, true);
      CHECK(tot.value().item() == ((v[0] + v[1]) + v[2]) + v[3]);
      t.backward(tot);
      CHECK((a.grad()[0] == 1 && b.grad()[0] == 1 && c.grad()[0] == 1 && d.grad()[0] == 1));
      Tape<D> t2;
      auto no_mask = total_loss(t2.constant(Tensor<D>::scalar(v[0])), t2.constant(Tensor<D>::scalar(v[1])),
                                t2.constant(Tensor<D>::scalar(v[2])), t2.constant(Tensor<D>::scalar(v[3])), false);
      CHECK(no_mask.value().item() == (v[1] + v[2]) + v[3]);
    }
  }
}

TEST_SUITE("training") {
  TEST_CASE("bundle additivity and log line format") {
    Trainer tr(small_config(), small_data(2));
    for (int s = 0; s < 2; ++s) {
      const LossBundle b = tr.step();
      CHECK(b.l_total == ((b.l_mask + b.l_object) + b.l_valid) + b.l_adv);
      for (float v : {b.l_mask, b.l_object, b.l_valid, b.l_adv, b.l_dis, b.l_total}) CHECK(std::isfinite(v));
    }
    LossBundle b;
    b.l_mask = 0.5f;
    b.l_total = 1.25f;
    CHECK(format_log_line(3, b) == "3\t0.5\t0\t0\t0\t0\t1.25");
  }
  TEST_CASE("same seed, same trajectory, bit for bit") {
    auto run = [] {
      Trainer tr(small_config(), small_data(3));
      std::vector<std::string> lines;
      for (std::size_t s = 0; s < 3; ++s) lines.push_back(format_log_line(s + 1, tr.step()));
      return lines;
    };
    CHECK(run() == run());
  }
  TEST_CASE("no-mask-loss leaves the mask term out of the total") {
    auto c = small_config();
    c.no_mask_loss = true;
    Trainer tr(c, small_data(2));
    const LossBundle b = tr.step();
    CHECK(b.l_mask > 0.0f);
    CHECK(b.l_total == (b.l_object + b.l_valid) + b.l_adv);
  }
  TEST_CASE("no-gan: zero adversarial term, discriminator untouched") {
    auto c = small_config();
    c.no_gan = true;
    Trainer tr(c, small_data(2));
    std::vector<Tensor<float>> before;
    for (auto* p : tr.discriminator().params().all()) before.push_back(p->value);
    const LossBundle b = tr.step();
    CHECK(b.l_adv == 0.0f);
    CHECK(b.l_dis == 0.0f);
    std::size_t k = 0;
    for (auto* p : tr.discriminator().params().all()) CHECK(p->value == before[k++]);
    CHECK(tr.discriminator_adam().step == 0);
  }
  TEST_CASE("generator and discriminator parameters are disjoint") {
    Trainer tr(small_config(), small_data(2));
    std::set<const void*> gen, dis;
    for (auto* p : tr.model().params().all()) gen.insert(p);
    for (auto* p : tr.discriminator().params().all()) dis.insert(p);
    for (const void* p : dis) CHECK(gen.count(p) == 0);
    CHECK(tr.generator_adam().m.size() == gen.size());
    CHECK(tr.discriminator_adam().m.size() == dis.size());
    // a step moves both sets, each through its own optimizer
    std::vector<Tensor<float>> g0, d0;
    for (auto* p : tr.model().params().all()) g0.push_back(p->value);
    for (auto* p : tr.discriminator().params().all()) d0.push_back(p->value);
    tr.step();
    CHECK(tr.generator_adam().step == 1);
    CHECK(tr.discriminator_adam().step == 1);
  }
  TEST_CASE("detach-masks: completion losses put exactly zero gradient on mask parameters") {
    auto c = small_config();
    c.flags.detach_masks = true;
    Trainer tr(c, small_data(2));
    CHECK(tr.completion_grad_on_mask(0) == 0.0f);
    tr.step();
    CHECK(tr.completion_grad_on_mask(1) == 0.0f);
    Trainer joint(small_config(), small_data(2));
    CHECK(joint.completion_grad_on_mask(0) > 0.0f);
  }
  TEST_CASE("non-finite loss aborts with the tensor named") {
    Trainer tr(small_config(), small_data(2));
    tr.model().params().find("completion.decoder.head.b")->value.fill(std::numeric_limits<float>::quiet_NaN());
    try {
      tr.step();
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("non-finite") != std::string::npos);
      CHECK(msg.find("l_") != std::string::npos);
    }
  }
  TEST_CASE("config validation") {
    auto c = small_config();
    c.batch = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = small_config();
    c.snippet_len = 1;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = small_config();
    c.height = 18;
    CHECK_THROWS_AS(c.validate(), GeometryError);
    CHECK_THROWS_AS(Trainer(small_config(), {}), ContractError);
  }
  TEST_CASE("repeated snippet: loss after 500 steps is below its step-10 value") {
    auto c = small_config();
    c.batch = 1;
    c.no_gan = true;
    Trainer tr(c, small_data(1, 90));
    float at10 = 0, last = 0;
    for (int s = 1; s <= 500; ++s) {
      const float v = tr.step().l_total;
      if (s == 10) at10 = v;
      last = v;
    }
    MESSAGE("l_total step 10: " << at10 << ", step 500: " << last);
    CHECK(last < at10);
  }
}
