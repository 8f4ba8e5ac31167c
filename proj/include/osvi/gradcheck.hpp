#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "osvi/autodiff.hpp"

namespace osvi {

/// Central-difference check of d f / d x. Returns
///   max_i |analytic_i − numeric_i| / max(1, |analytic_i|).
/// Throws EvaluationError when f produces a non-finite value.
inline double grad_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
                         const Tensor<double>& x, double h = 1e-5) {
  auto eval = [&](const Tensor<double>& at) {
    Tape<double> tape;
    const double v = f(tape, tape.constant(at)).value().item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite function value");
    return v;
  };
  Tape<double> tape;
  Var<double> xv = tape.variable(x);
  Var<double> y = f(tape, xv);
  if (!std::isfinite(y.value().item())) throw EvaluationError("grad_check: non-finite function value");
  tape.backward(y);
  const Tensor<double> analytic = xv.grad();
  double worst = 0.0;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = eval(probe);
    probe[i] = x[i] - h;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

struct GradCheckReport {
  double worst = 0.0;           // max relative error at the requested step
  double worst_resolved = 0.0;  // same, with kink-straddling coordinates re-probed
  std::size_t kinks = 0;        // coordinates whose error vanished at smaller steps
};

/// Same criterion over the coordinates of a parameter set. `loss` builds the
/// scalar on a fresh tape from the current parameter values. At most
/// `coords_per_param` randomly chosen coordinates are probed per tensor
/// (0 = all).
///
/// A coordinate over `tol` at step h is probed again at h/10 and h/100. If
/// the numeric value converges onto the analytic one (error at h/100 within
/// tol/100) the difference at h straddled a relu or max kink; it is counted
/// in `kinks` and contributes its h/100 error to `worst_resolved`. A wrong
/// analytic gradient does not converge and keeps its error.
inline GradCheckReport grad_check_params_report(const std::function<Var<double>(Tape<double>&)>& loss,
                                                const std::vector<Parameter<double>*>& params,
                                                double h, std::size_t coords_per_param,
                                                std::uint64_t seed, double tol) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> y = loss(tape);
    if (!std::isfinite(y.value().item())) throw EvaluationError("grad_check: non-finite loss");
    tape.backward(y);
  }
  auto eval = [&] {
    Tape<double> tape;
    const double v = loss(tape).value().item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite loss");
    return v;
  };
  std::mt19937_64 rng(seed);
  GradCheckReport rep;
  for (auto* p : params) {
    std::vector<std::size_t> coords(p->value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords_per_param != 0 && coords.size() > coords_per_param) {
      for (std::size_t i = 0; i < coords_per_param; ++i) {
        std::swap(coords[i], coords[i + rng() % (coords.size() - i)]);
      }
      coords.resize(coords_per_param);
    }
    for (std::size_t i : coords) {
      const double analytic = p->grad[i];
      auto rel_err = [&](double step) {
        const double orig = p->value[i];
        p->value[i] = orig + step;
        const double fp = eval();
        p->value[i] = orig - step;
        const double fm = eval();
        p->value[i] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      };
      const double e = rel_err(h);
      rep.worst = std::max(rep.worst, e);
      if (e <= tol) {
        rep.worst_resolved = std::max(rep.worst_resolved, e);
        continue;
      }
      const double fine = rel_err(h / 100.0);
      if (fine <= tol / 100.0 && rel_err(h / 10.0) < e) {
        ++rep.kinks;
        rep.worst_resolved = std::max(rep.worst_resolved, fine);
      } else {
        rep.worst_resolved = std::max(rep.worst_resolved, e);
      }
    }
  }
  return rep;
}

inline double grad_check_params(const std::function<Var<double>(Tape<double>&)>& loss,
                                const std::vector<Parameter<double>*>& params, double h,
                                std::size_t coords_per_param, std::uint64_t seed) {
  return grad_check_params_report(loss, params, h, coords_per_param, seed,
                                  std::numeric_limits<double>::infinity())
      .worst;
}

}  // namespace osvi
