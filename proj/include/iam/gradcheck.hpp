#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "iam/params.hpp"
#include "iam/rng.hpp"

namespace iam {

struct GradCheckOptions {
  double h = 1e-4;
  double tolerance = 1e-5;
  // 0 checks every element; otherwise a seeded random subsample of
  // max(min_samples, samples_per_tensor) elements per tensor.
  size_t samples_per_tensor = 0;
  size_t min_samples = 25;
  uint64_t sample_seed = 0;
};

struct GradCheckReport {
  double worst_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  size_t checked = 0;
  bool passed(double tol) const { return worst_rel_err < tol; }
};

// Compares analytic gradients against central finite differences
// (f(p+h) - f(p-h)) / 2h in 64-bit, with
// rel_err = |a - n| / max(1, |a|, |n|).
//
// loss_fn(params, grads) must be a deterministic scalar function of the
// parameters for fixed inputs; when grads != nullptr it also fills the
// analytic gradient.
using LossFn = std::function<double(ParamStore<double>&, GradBuffer<double>*)>;

inline GradCheckReport grad_check(ParamStore<double>& params, const LossFn& loss_fn,
                                  const GradCheckOptions& opt = {}) {
  GradBuffer<double> analytic(params);
  (void)loss_fn(params, &analytic);

  GradCheckReport rep;
  Rng pick(opt.sample_seed);

  ParamId id = 0;
  for (auto& t : params) {
    std::vector<size_t> idxs;
    const size_t n = t.size();
    if (opt.samples_per_tensor == 0 || n <= std::max(opt.samples_per_tensor, opt.min_samples)) {
      idxs.resize(n);
      for (size_t i = 0; i < n; ++i) idxs[i] = i;
    } else {
      const size_t take = std::max(opt.samples_per_tensor, opt.min_samples);
      for (size_t i = 0; i < take; ++i) idxs.push_back(pick.below(n));
    }

    for (size_t i : idxs) {
      const double keep = t.w[i];
      t.w[i] = keep + opt.h;
      const double fp = loss_fn(params, nullptr);
      t.w[i] = keep - opt.h;
      const double fm = loss_fn(params, nullptr);
      t.w[i] = keep;

      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic.g[id][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.checked;
      if (rel > rep.worst_rel_err) {
        rep.worst_rel_err = rel;
        rep.worst_param = t.name;
        rep.worst_index = i;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
    ++id;
  }
  return rep;
}

}  // namespace iam
