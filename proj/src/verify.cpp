#include "osvi/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "osvi/gradcheck.hpp"
#include "osvi/losses.hpp"
#include "osvi/metrics.hpp"
#include "osvi/model.hpp"
#include "osvi/ops.hpp"
#include "osvi/reference_metrics.hpp"
#include "osvi/rng.hpp"
#include "osvi/trainer.hpp"

namespace osvi {

bool SuiteResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

namespace {

using D = double;
using Fn = std::function<Var<D>(std::vector<Var<D>>&)>;

constexpr std::size_t kSeeds = 10;
constexpr double kGradTol = 1e-4;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor<D> rnd(Shape s, Rng& r, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = r.uniform(lo, hi);
  return t;
}

// Magnitudes in [0.2, 1]: keeps relu/abs away from their kink.
Tensor<D> away(Shape s, Rng& r) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.2, 1.0);
  return t;
}

// Values at least 0.05 apart, so max/argmax never flips under h.
Tensor<D> distinct(Shape s, Rng& r) {
  Tensor<D> t(std::move(s));
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[r.index(i)]);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.05 * static_cast<double>(order[i]) + r.uniform(0.0, 0.01);
  return t;
}

Tensor<D> binary(Shape s, Rng& r, double p = 0.4) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = r.uniform() < p ? 1.0 : 0.0;
  return t;
}

Var<D> project(Var<D> y, std::uint64_t seed) {
  Rng r(seed);
  return sum(mul(y, y.tape().constant(rnd(y.shape(), r))));
}

// Checks d/d(input i) for every input in turn; the rest stay constant.
double check_inputs(const std::vector<Tensor<D>>& in, const Fn& f, std::uint64_t seed) {
  double worst = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    worst = std::max(worst, grad_check(
                                [&](Tape<D>& t, Var<D> x) {
                                  std::vector<Var<D>> v;
                                  for (std::size_t j = 0; j < in.size(); ++j) {
                                    v.push_back(j == i ? x : t.constant(in[j]));
                                  }
                                  // x gets a second consumer recorded after f, so an
                                  // op that overwrites instead of accumulating is caught.
                                  Var<D> y = project(f(v), seed);
                                  return add(y, project(scale(x, D(0.5)), seed + 1));
                                },
                                in[i], 1e-5));
  }
  return worst;
}

struct OpCase {
  std::string name;
  std::function<double(Rng&, std::uint64_t)> run;  // worst error for one seed
};

kernels::AttentionMask key_mask(std::size_t n, Rng& r) {
  kernels::AttentionMask m;
  m.kind = kernels::AttentionMask::Kind::kKey;
  m.tokens = n;
  m.key.assign(n, 0);
  for (std::size_t i = 1; i < n; ++i) m.key[i] = r.uniform() < 0.4;
  return m;
}

kernels::AttentionMask pair_mask(std::size_t n, Rng& r) {
  kernels::AttentionMask m;
  m.kind = kernels::AttentionMask::Kind::kPair;
  m.tokens = n;
  m.pair.assign(n * n, 0);
  for (auto& b : m.pair) b = r.uniform() < 0.4;
  return m;
}

Var<D> attn(std::vector<Var<D>>& v, std::size_t heads, std::size_t groups,
            const kernels::AttentionMask& m) {
  kernels::AttentionShape s{v[0].dim(0), v[0].dim(1), heads, groups};
  return attention(v[0], v[1], v[2], s, m, D(0.5));
}

std::vector<OpCase> op_cases() {
  using V = std::vector<Var<D>>;
  using kernels::ResampleMode;
  std::vector<OpCase> c;
  auto add_case = [&c](std::string name, std::function<double(Rng&, std::uint64_t)> f) {
    c.push_back({std::move(name), std::move(f)});
  };
  add_case("matmul", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 4}, r), rnd({4, 5}, r)}, [](V& v) { return matmul(v[0], v[1]); }, s);
  });
  add_case("transpose", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 4}, r)}, [](V& v) { return transpose(v[0]); }, s);
  });
  add_case("linear", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 4}, r), rnd({5, 4}, r), rnd({5}, r)},
                        [](V& v) { return linear(v[0], v[1], &v[2]); }, s);
  });
  add_case("add", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 4}, r), rnd({3, 1}, r)}, [](V& v) { return add(v[0], v[1]); }, s);
  });
  add_case("sub", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 4}, r), rnd({4}, r)}, [](V& v) { return sub(v[0], v[1]); }, s);
  });
  add_case("mul", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3}, r), rnd({2, 1}, r)}, [](V& v) { return mul(v[0], v[1]); }, s);
  });
  add_case("add_scalar", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 3}, r)}, [](V& v) { return add_scalar(v[0], 0.7); }, s);
  });
  add_case("scale", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 3}, r)}, [](V& v) { return scale(v[0], -1.3); }, s);
  });
  add_case("relu", [](Rng& r, std::uint64_t s) {
    return check_inputs({away({4, 4}, r)}, [](V& v) { return relu(v[0]); }, s);
  });
  add_case("gelu", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({4, 4}, r, -3, 3)}, [](V& v) { return gelu(v[0]); }, s);
  });
  add_case("sigmoid", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({4, 4}, r, -3, 3)}, [](V& v) { return sigmoid(v[0]); }, s);
  });
  add_case("abs", [](Rng& r, std::uint64_t s) {
    return check_inputs({away({4, 4}, r)}, [](V& v) { return abs(v[0]); }, s);
  });
  add_case("log", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({4, 4}, r, 0.5, 2.0)}, [](V& v) { return log(v[0]); }, s);
  });
  add_case("clamp", [](Rng& r, std::uint64_t s) {
    Tensor<D> x = away({4, 4}, r);
    for (auto& e : x.data()) {
      if (std::abs(std::abs(e) - 0.5) < 0.05) e *= 1.2;
    }
    return check_inputs({x}, [](V& v) { return clamp(v[0], -0.5, 0.5); }, s);
  });
  add_case("reshape", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 6}, r)}, [](V& v) { return reshape(v[0], {3, 4}); }, s);
  });
  add_case("concat", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3}, r), rnd({2, 2}, r)}, [](V& v) { return concat(v, 1); }, s);
  });
  add_case("slice", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 4}, r)}, [](V& v) { return slice(v[0], 1, 1, 3); }, s);
  });
  add_case("swap_leading", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 4}, r)}, [](V& v) { return swap_leading(v[0]); }, s);
  });
  add_case("sum", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 4}, r)}, [](V& v) { return sum(v[0]); }, s);
  });
  add_case("mean", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 4}, r)}, [](V& v) { return mean(v[0]); }, s);
  });
  add_case("sum_axis", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 4}, r)}, [](V& v) { return sum_axis(v[0], 1); }, s);
  });
  add_case("mean_axis", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 4}, r)}, [](V& v) { return mean_axis(v[0], 0); }, s);
  });
  add_case("max_axis", [](Rng& r, std::uint64_t s) {
    return check_inputs({distinct({2, 3, 4}, r)}, [](V& v) { return max_axis(v[0], 2); }, s);
  });
  add_case("softmax", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 5}, r, -2, 2)}, [](V& v) { return softmax(v[0], 1); }, s);
  });
  add_case("log_softmax", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({3, 5}, r, -2, 2)}, [](V& v) { return log_softmax(v[0], 0); }, s);
  });
  add_case("layer_norm", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({4, 6}, r), rnd({6}, r, 0.5, 1.5), rnd({6}, r)},
                        [](V& v) { return layer_norm(v[0], v[1], v[2]); }, s);
  });
  add_case("conv2d", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 6, 6}, r), rnd({3, 2, 3, 3}, r), rnd({3}, r)},
                        [](V& v) { return conv2d(v[0], v[1], &v[2], 1, 1); }, s);
  });
  add_case("conv2d_stride2", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 6, 6}, r), rnd({3, 2, 3, 3}, r)},
                        [](V& v) { return conv2d<D>(v[0], v[1], nullptr, 2, 1); }, s);
  });
  add_case("conv3d", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 4, 4}, r), rnd({2, 2, 3, 3, 3}, r), rnd({2}, r)},
                        [](V& v) { return conv3d(v[0], v[1], &v[2], 1, 1, 1); }, s);
  });
  add_case("conv3d_stride2", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 4, 4}, r), rnd({2, 2, 3, 3, 3}, r)},
                        [](V& v) { return conv3d<D>(v[0], v[1], nullptr, 2, 2, 1); }, s);
  });
  add_case("avg_pool", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 6, 6}, r)},
                        [](V& v) { return resample(v[0], 3, 3, ResampleMode::kAdaptiveAvgPool); }, s);
  });
  add_case("max_pool", [](Rng& r, std::uint64_t s) {
    return check_inputs({distinct({2, 6, 6}, r)},
                        [](V& v) { return resample(v[0], 3, 3, ResampleMode::kMaxPool); }, s);
  });
  add_case("bilinear_up", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 3}, r)},
                        [](V& v) { return resample(v[0], 6, 6, ResampleMode::kBilinearUp); }, s);
  });
  add_case("nearest_up", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({2, 3, 3}, r)},
                        [](V& v) { return resample(v[0], 6, 6, ResampleMode::kNearestUp); }, s);
  });
  add_case("masked_fill", [](Rng& r, std::uint64_t s) {
    Tensor<std::uint8_t> m({4, 4});
    for (auto& b : m.data()) b = r.uniform() < 0.3;
    // Sentinel kept small so the projected sum stays well scaled.
    return check_inputs({rnd({4, 4}, r)}, [m](V& v) { return masked_fill(v[0], m, D(-3)); }, s);
  });
  add_case("attention", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({6, 4}, r), rnd({6, 4}, r), rnd({6, 4}, r)},
                        [](V& v) { return attn(v, 2, 2, {}); }, s);
  });
  add_case("attention_key_mask", [](Rng& r, std::uint64_t s) {
    const auto m = key_mask(6, r);
    return check_inputs({rnd({6, 4}, r), rnd({6, 4}, r), rnd({6, 4}, r)},
                        [m](V& v) { return attn(v, 2, 1, m); }, s);
  });
  add_case("attention_pair_mask", [](Rng& r, std::uint64_t s) {
    const auto m = pair_mask(6, r);
    return check_inputs({rnd({6, 4}, r), rnd({6, 4}, r), rnd({6, 4}, r)},
                        [m](V& v) { return attn(v, 2, 1, m); }, s);
  });
  add_case("mask_loss", [](Rng& r, std::uint64_t) {
    const std::vector<Tensor<D>> targets{binary({4, 4}, r), binary({4, 4}, r)};
    return check_inputs({rnd({2, 4, 4}, r, -2, 2), rnd({2, 4, 4}, r, -2, 2)},
                        [targets](V& v) { return scale(mask_loss(v[0].tape(), v, targets), 7.0); },
                        0);
  });
  add_case("region_losses", [](Rng& r, std::uint64_t) {
    Tensor<D> pred = rnd({2, 3, 4, 4}, r, 0.2, 0.8);
    Tensor<D> target = pred;
    const Tensor<D> off = away({2, 3, 4, 4}, r);
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += 0.1 * off[i];
    const Tensor<D> mask = binary({2, 4, 4}, r);
    return check_inputs({pred}, [target, mask](V& v) {
      RegionLosses<D> l = region_losses(v[0].tape(), v[0], target, mask);
      return concat(std::vector<Var<D>>{l.object, l.valid}, 0);
    }, 0);
  });
  add_case("discriminator", [](Rng& r, std::uint64_t s) {
    Discriminator<D> disc(s);
    return check_inputs({rnd({2, 3, 8, 8}, r, 0, 1)},
                        [&disc](V& v) { return scale(disc(v[0].tape(), v[0]), 100.0); }, 0);
  });
  add_case("discriminator_objective", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({1}, r, 0.1, 0.9), rnd({1}, r, 0.1, 0.9)},
                        [](V& v) { return discriminator_objective(v[0], v[1]); }, s);
  });
  add_case("adversarial_loss", [](Rng& r, std::uint64_t s) {
    return check_inputs({rnd({1}, r, 0.1, 0.9)}, [](V& v) { return adversarial_loss(v[0]); }, s);
  });
  return c;
}

// Small enough for finite differences over every parameter tensor:
// 12×16 frames give a 3×4 token grid.
ModelConfig tiny_model(std::uint64_t seed, std::size_t blocks = 2) {
  ModelConfig mc;
  mc.height = 12;
  mc.width = 16;
  mc.encoder = EncoderConfig{4, 6, 8, 4, 8};
  mc.attention.channels = 8;
  mc.attention.heads = 2;
  mc.attention.blocks = blocks;
  mc.attention.mlp_hidden = 8;
  mc.seed = seed;
  return mc;
}

// A clip with a box-shaped object that covers whole token cells.
Sample<D> tiny_sample(std::size_t frames, std::uint64_t seed) {
  Rng r(seed);
  Sample<D> s;
  s.clean = rnd({frames, 3, 12, 16}, r, 0, 1);
  s.masks = Tensor<D>({frames, 12, 16});
  s.input = s.clean;
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t y0 = 2 + t % 2, x0 = 3 + t % 4;
    for (std::size_t y = y0; y < y0 + 8; ++y)
      for (std::size_t x = x0; x < x0 + 8; ++x) {
        s.masks.at({t, y, x}) = 1.0;
        for (std::size_t ch = 0; ch < 3; ++ch) s.input.at({t, ch, y, x}) = r.uniform();
      }
  }
  return s;
}

// --- grad --------------------------------------------------------------------

SuiteResult grad_suite() {
  SuiteResult res;
  for (const OpCase& oc : op_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng r(mix_seed(seed, std::hash<std::string>{}(oc.name) & 0xFFFF));
      worst = std::max(worst, oc.run(r, seed));
    }
    res.checks.push_back({"op " + oc.name, worst <= kGradTol, fmt("max rel err %.3g", worst)});
  }

  GradCheckReport total;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    OsviModel<D> model(tiny_model(seed));
    Discriminator<D> disc(mix_seed(seed, 7));
    const Sample<D> sample = tiny_sample(2, mix_seed(seed, 8));
    // Biases start at zero, which puts a relu exactly on its kink wherever a
    // conv sees an all-zero patch. Move them to a generic point.
    Rng jitter(mix_seed(seed, 9));
    for (auto* p : model.params().all()) {
      if (p->name.size() > 2 && p->name.compare(p->name.size() - 2, 2, ".b") == 0) {
        for (auto& v : p->value.data()) v += jitter.uniform(-0.1, 0.1);
      }
    }
    // Hold the thresholded guidance fixed; it is piecewise constant in the
    // parameters and would otherwise make the loss discontinuous.
    GuidanceMask guidance;
    {
      Tape<D> tape;
      guidance = model.forward(tape, sample.input, frame_of(sample.masks, 0)).guidance;
    }
    ForwardOptions opt;
    opt.fixed_guidance = &guidance;
    auto loss = [&](Tape<D>& tape) {
      GeneratorLosses<D> g = generator_losses(tape, model, &disc, sample, opt);
      return total_loss(g.l_mask, g.l_object, g.l_valid, g.l_adv, true);
    };
    const GradCheckReport rep =
        grad_check_params_report(loss, model.params().all(), 1e-5, 3, seed, kGradTol);
    total.worst = std::max(total.worst, rep.worst);
    total.worst_resolved = std::max(total.worst_resolved, rep.worst_resolved);
    total.kinks += rep.kinks;
  }
  char detail[160];
  std::snprintf(detail, sizeof detail,
                "max rel err %.3g at h=1e-5; %zu kink-straddling coordinates, %.3g after re-probing",
                total.worst, total.kinks, total.worst_resolved);
  res.checks.push_back({"end-to-end model (2 blocks, 2 frames, 3x4 grid)",
                        total.worst_resolved <= kGradTol, detail});
  return res;
}

// --- leakage -----------------------------------------------------------------

struct RecorderScope {
  AttentionRecorder<D> rec;
  AttentionRecorder<D>* prev;
  RecorderScope() : prev(set_attention_recorder<D>(&rec)) {}
  ~RecorderScope() { set_attention_recorder<D>(prev); }
};

// Largest weight any query puts on an object key, over the temporal calls
// (one group spanning every frame).
double max_object_weight(const AttentionRecorder<D>& rec, const std::vector<std::uint8_t>& object) {
  double worst = 0.0;
  for (const auto& call : rec.calls) {
    if (call.shape.groups != 1 || call.shape.tokens != object.size()) continue;
    const std::size_t n = call.shape.tokens;
    for (std::size_t h = 0; h < call.shape.heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (object[j]) worst = std::max(worst, call.weights[(h * n + i) * n + j]);
        }
  }
  return worst;
}

std::size_t temporal_calls(const AttentionRecorder<D>& rec, std::size_t tokens) {
  return static_cast<std::size_t>(std::count_if(rec.calls.begin(), rec.calls.end(), [&](const auto& c) {
    return c.shape.groups == 1 && c.shape.tokens == tokens;
  }));
}

SuiteResult leakage_suite() {
  SuiteResult res;
  const std::size_t n = 10, ch = 8;
  const kernels::AttentionShape shape{n, ch, 2, 1};
  double weight = 0.0, out_diff = 0.0, grad_diff = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng r(mix_seed(seed, 31));
    kernels::AttentionMask m = key_mask(n, r);
    m.key[n - 1] = 1;
    const Tensor<D> q = rnd({n, ch}, r), k = rnd({n, ch}, r), v = rnd({n, ch}, r);
    Tensor<D> k2 = k, v2 = v;
    for (std::size_t i = 0; i < n; ++i) {
      if (!m.key[i]) continue;
      for (std::size_t c = 0; c < ch; ++c) {
        k2[i * ch + c] = r.uniform(-50, 50);
        v2[i * ch + c] = r.uniform(-50, 50);
      }
    }
    auto run = [&](const Tensor<D>& kk, const Tensor<D>& vv, std::vector<Tensor<D>>& grads) {
      RecorderScope scope;
      Tape<D> tape;
      Var<D> qv = tape.variable(q), kv = tape.variable(kk), vv2 = tape.variable(vv);
      Var<D> out = attention(qv, kv, vv2, shape, m, D(0.35));
      tape.backward(project(out, seed));
      grads = {qv.grad(), kv.grad(), vv2.grad()};
      std::vector<std::uint8_t> object(m.key.begin(), m.key.end());
      weight = std::max(weight, max_object_weight(scope.rec, object));
      return out.value();
    };
    std::vector<Tensor<D>> g1, g2;
    const Tensor<D> o1 = run(k, v, g1), o2 = run(k2, v2, g2);
    for (std::size_t i = 0; i < o1.size(); ++i) out_diff = std::max(out_diff, std::abs(o1[i] - o2[i]));
    for (std::size_t g = 0; g < 3; ++g)
      for (std::size_t i = 0; i < g1[g].size(); ++i) {
        // Keys/values of object tokens themselves must get exactly zero gradient.
        const bool object_row = g > 0 && m.key[i / ch];
        const double d = object_row ? std::max(std::abs(g1[g][i]), std::abs(g2[g][i]))
                                    : std::abs(g1[g][i] - g2[g][i]);
        grad_diff = std::max(grad_diff, d);
      }
  }
  res.checks.push_back({"attention: weight on object keys is 0", weight == 0.0,
                        fmt("max weight %.3g", weight)});
  res.checks.push_back({"attention: randomized object keys/values leave output unchanged",
                        out_diff == 0.0, fmt("L-inf %.3g", out_diff)});
  res.checks.push_back({"attention: randomized object keys/values leave gradients unchanged",
                        grad_diff == 0.0, fmt("L-inf %.3g", grad_diff)});

  // Whole model: every temporal-stage call under key-side guidance.
  double model_weight = 0.0;
  std::size_t calls = 0;
  double min_unguided = 1.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const Sample<D> sample = tiny_sample(2, mix_seed(seed, 41));
    for (bool guided : {true, false}) {
      ModelConfig mc = tiny_model(mix_seed(seed, 42));
      mc.flags.use_guidance = guided;
      OsviModel<D> model(mc);
      RecorderScope scope;
      Tape<D> tape;
      ModelOutput<D> out = model.forward(tape, sample.input, frame_of(sample.masks, 0));
      const double w = max_object_weight(scope.rec, out.guidance.token_object);
      if (guided) {
        model_weight = std::max(model_weight, w);
        calls += temporal_calls(scope.rec, out.guidance.tokens());
      } else {
        min_unguided = std::min(min_unguided, w);
      }
    }
  }
  res.checks.push_back({"model: temporal attention puts 0 weight on object keys",
                        model_weight == 0.0 && calls > 0,
                        fmt("max weight %.3g", model_weight) + " over " + std::to_string(calls) +
                            " calls"});
  res.checks.push_back({"model without guidance: some object-key weight > 1e-6 in every trial",
                        min_unguided > 1e-6, fmt("smallest per-trial max %.3g", min_unguided)});
  return res;
}

// --- structure ---------------------------------------------------------------

bool ends_in_zeroed_projection(const std::string& name) {
  for (const char* tail : {".ttb_attn.out.", ".stb_attn.out.", ".ttb_mlp2.", ".stb_mlp2."}) {
    if (name.find(tail) != std::string::npos) return true;
  }
  return false;
}

TokenSequence<D> random_tokens(Tape<D>& tape, std::size_t frames, std::size_t h, std::size_t w,
                               std::size_t ch, Rng& r) {
  TokenSequence<D> f;
  f.tokens = tape.constant(rnd({frames * h * w, ch}, r));
  f.frames = frames;
  f.token_h = h;
  f.token_w = w;
  return f;
}

SuiteResult structure_suite() {
  SuiteResult res;
  AttentionConfig ac;
  ac.channels = 8;
  ac.heads = 2;
  ac.mlp_hidden = 16;

  double identity_diff = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng r(mix_seed(seed, 51));
    ParamStore<D> store;
    TransformerBlock<D> block(store, "b", ac, r);
    for (auto* p : store.all()) {
      if (ends_in_zeroed_projection(p->name)) p->value.fill(0.0);
    }
    Tape<D> tape;
    TokenSequence<D> f = random_tokens(tape, 3, 2, 3, ac.channels, r);
    std::vector<double> m_hat(f.frames * f.per_frame());
    for (auto& x : m_hat) x = r.uniform() < 0.3 ? 1.0 : 0.0;
    const GuidanceMask g = build_guidance(m_hat, MaskingMode::kKeySide);
    for (bool spatial_masked : {false, true}) {
      BlockOptions bo;
      bo.spatial_masked = spatial_masked;
      const Tensor<D>& out = block(tape, f, g, bo).tokens.value();
      const Tensor<D>& in = f.tokens.value();
      for (std::size_t i = 0; i < in.size(); ++i) identity_diff = std::max(identity_diff, std::abs(out[i] - in[i]));
    }
  }
  res.checks.push_back({"transformer block is the identity with zeroed output projections",
                        identity_diff == 0.0, fmt("L-inf %.3g", identity_diff)});

  double isolation = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng r(mix_seed(seed, 52));
    ParamStore<D> store;
    MultiHeadAttention<D> mha(store, "s", ac, r);
    Tape<D> tape;
    TokenSequence<D> f = random_tokens(tape, 3, 2, 3, ac.channels, r);
    const Tensor<D> a = smha(tape, f, mha).value();
    Tensor<D> changed = f.tokens.value();
    const std::size_t per = f.per_frame() * ac.channels;
    for (std::size_t i = per; i < 2 * per; ++i) changed[i] = r.uniform(-5, 5);  // frame 1 only
    f.tokens = tape.constant(changed);
    const Tensor<D> b = smha(tape, f, mha).value();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (i >= per && i < 2 * per) continue;
      isolation = std::max(isolation, std::abs(a[i] - b[i]));
    }
  }
  res.checks.push_back({"spatial attention keeps frames isolated", isolation == 0.0,
                        fmt("L-inf %.3g", isolation)});

  double column_err = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng r(mix_seed(seed, 53));
    Tape<D> tape;
    KeyValueMemory<D> mem;
    for (std::size_t t = 0; t < 3; ++t) {
      memory_append(mem, tape.constant(rnd({4, 6}, r, -2, 2)), tape.constant(rnd({5, 6}, r)), t * 5);
    }
    const Tensor<D> sim = memory_read(mem, tape.constant(rnd({4, 6}, r, -2, 2))).sim.value();
    const std::size_t rows = sim.dim(0), cols = sim.dim(1);
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < rows; ++i) s += sim[i * cols + j];
      column_err = std::max(column_err, std::abs(s - 1.0));
    }
  }
  res.checks.push_back({"memory similarity columns sum to 1", column_err <= 1e-6,
                        fmt("max |sum-1| %.3g", column_err)});

  bool passthrough = true;
  bool policy = true;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    OsviModel<D> model(tiny_model(mix_seed(seed, 54), 1));
    const Sample<D> sample = tiny_sample(seed == 0 ? 12 : 3, mix_seed(seed, 55));
    Tape<D> tape;
    ModelOutput<D> out = model.forward(tape, sample.input, frame_of(sample.masks, 0));
    passthrough = passthrough && out.sequence.masks[0].soft.value() == frame_of(sample.masks, 0);
    if (seed == 0) policy = out.sequence.memory.frame_indices == std::vector<std::size_t>{0, 5, 10};
  }
  res.checks.push_back({"frame-0 mask passes through unchanged", passthrough, ""});
  res.checks.push_back({"12-frame clip stores memory frames [0,5,10]", policy, ""});
  return res;
}

// --- loss --------------------------------------------------------------------

SuiteResult loss_suite() {
  SuiteResult res;

  bool additive = true;
  double lin_err = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    OsviModel<D> model(tiny_model(mix_seed(seed, 61), 1));
    Discriminator<D> disc(mix_seed(seed, 62));
    const Sample<D> sample = tiny_sample(3, mix_seed(seed, 63));
    for (bool with_mask : {true, false}) {
      Tape<D> tape;
      GeneratorLosses<D> g = generator_losses(tape, model, &disc, sample);
      Var<D> total = total_loss(g.l_mask, g.l_object, g.l_valid, g.l_adv, with_mask);
      const D m = g.l_mask.value().item(), o = g.l_object.value().item();
      const D v = g.l_valid.value().item(), a = g.l_adv.value().item();
      const D expect = with_mask ? ((m + o) + v) + a : (o + v) + a;
      additive = additive && total.value().item() == expect;
    }
    // Gradient of the total equals the sum of per-term gradients.
    auto grads_of = [&](int term) {
      model.params().zero_grad();
      Tape<D> tape;
      GeneratorLosses<D> g = generator_losses(tape, model, &disc, sample);
      Var<D> parts[4] = {g.l_mask, g.l_object, g.l_valid, g.l_adv};
      tape.backward(term < 0 ? total_loss(g.l_mask, g.l_object, g.l_valid, g.l_adv, true) : parts[term]);
      std::vector<Tensor<D>> out;
      for (auto* p : model.params().all()) out.push_back(p->grad);
      return out;
    };
    const auto whole = grads_of(-1);
    std::vector<std::vector<Tensor<D>>> parts;
    for (int t = 0; t < 4; ++t) parts.push_back(grads_of(t));
    for (std::size_t p = 0; p < whole.size(); ++p)
      for (std::size_t i = 0; i < whole[p].size(); ++i) {
        const double s = parts[0][p][i] + parts[1][p][i] + parts[2][p][i] + parts[3][p][i];
        lin_err = std::max(lin_err, std::abs(whole[p][i] - s) / std::max(1.0, std::abs(s)));
      }
  }
  res.checks.push_back({"total loss is exactly the sum of its four terms", additive, ""});
  res.checks.push_back({"total-loss gradient is the sum of term gradients", lin_err <= 1e-12,
                        fmt("max rel err %.3g", lin_err)});

  double cancel = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng r(mix_seed(seed, 64));
    const double e = r.uniform(0.01, 0.3);
    const Tensor<D> target = rnd({3, 3, 10, 12}, r, 0.0, 0.6);
    Tensor<D> pred = target;
    for (auto& x : pred.data()) x += e;
    const Tensor<D> mask = binary({3, 10, 12}, r, 0.3);
    Tape<D> tape;
    RegionLosses<D> l = region_losses(tape, tape.constant(pred), target, mask);
    cancel = std::max({cancel, std::abs(l.object.value().item() - e), std::abs(l.valid.value().item() - e)});
  }
  res.checks.push_back({"uniform error e gives object = valid = e", cancel <= 1e-7,
                        fmt("max err %.3g", cancel)});

  double detached = 0.0, attached = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const Sample<D> sample = tiny_sample(3, mix_seed(seed, 65));
    Discriminator<D> disc(mix_seed(seed, 66));
    for (bool detach : {true, false}) {
      ModelConfig mc = tiny_model(mix_seed(seed, 67), 1);
      mc.flags.detach_masks = detach;
      OsviModel<D> model(mc);
      model.params().zero_grad();
      Tape<D> tape;
      GeneratorLosses<D> g = generator_losses(tape, model, &disc, sample);
      tape.backward(add(add(g.l_object, g.l_valid), g.l_adv));
      double mag = 0.0;
      for (auto* p : model.params().with_prefix(OsviModel<D>::kMask)) {
        for (D x : p->grad.data()) mag = std::max(mag, std::abs(x));
      }
      (detach ? detached : attached) = std::max(detach ? detached : attached, mag);
    }
  }
  res.checks.push_back({"detached masks: completion losses give mask params zero gradient",
                        detached == 0.0, fmt("max |grad| %.3g", detached)});
  res.checks.push_back({"attached masks: completion losses reach mask params", attached > 0.0,
                        fmt("max |grad| %.3g", attached)});
  return res;
}

// --- metrics -----------------------------------------------------------------

SuiteResult metrics_suite() {
  SuiteResult res;
  double err_psnr = 0, err_ssim = 0, err_iou = 0, err_recall = 0;
  bool ordered = true;
  for (std::uint64_t k = 0; k < 100; ++k) {
    Rng r(mix_seed(k, 71));
    const std::size_t h = 8 + r.index(17), w = 8 + r.index(17);
    Tensor<float> a({3, h, w}), b({3, h, w}), ma({h, w}), mb({h, w});
    const double noise = k % 10 == 0 ? 0.0 : r.uniform(0.0, 0.5);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = static_cast<float>(r.uniform());
      b[i] = static_cast<float>(std::clamp(a[i] + noise * r.uniform(-1, 1), 0.0, 1.0));
    }
    const double pa = r.uniform(0.0, 0.5), pb = r.uniform(0.0, 0.5);
    for (std::size_t i = 0; i < ma.size(); ++i) {
      ma[i] = r.uniform() < pa ? 1.0f : 0.0f;
      mb[i] = k % 17 == 0 ? 0.0f : (r.uniform() < pb ? 1.0f : 0.0f);
    }
    err_psnr = std::max(err_psnr, std::abs(psnr(a, b) - reference::psnr(a, b)));
    err_ssim = std::max(err_ssim, std::abs(ssim(a, b) - reference::ssim(a, b)));
    const MaskScore s = iou_recall(ma, mb);
    const auto ref = reference::iou_recall(ma, mb);
    err_iou = std::max(err_iou, std::abs(s.iou - ref.iou));
    err_recall = std::max(err_recall, std::abs(s.recall - ref.recall));
    ordered = ordered && s.iou <= s.recall;
  }
  res.checks.push_back({"psnr matches oracle on 100 pairs", err_psnr <= 1e-6, fmt("max err %.3g", err_psnr)});
  res.checks.push_back({"ssim matches oracle on 100 pairs", err_ssim <= 1e-6, fmt("max err %.3g", err_ssim)});
  res.checks.push_back({"iou matches oracle on 100 pairs", err_iou <= 1e-6, fmt("max err %.3g", err_iou)});
  res.checks.push_back({"recall matches oracle on 100 pairs", err_recall <= 1e-6,
                        fmt("max err %.3g", err_recall)});
  res.checks.push_back({"iou <= recall on every pair", ordered, ""});
  return res;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"grad", "leakage", "structure", "loss", "metrics"};
  return names;
}

SuiteResult run_suite(const std::string& name) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult r;
  if (name == "grad") r = grad_suite();
  else if (name == "leakage") r = leakage_suite();
  else if (name == "structure") r = structure_suite();
  else if (name == "loss") r = loss_suite();
  else if (name == "metrics") r = metrics_suite();
  else throw ContractError("unknown suite '" + name + "'");
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace osvi
