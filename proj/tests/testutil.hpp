#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "turbo/ops.hpp"
#include "turbo/rng.hpp"
#include "turbo/tensor.hpp"

namespace testutil {

// Scalar objective J = sum_i c_i * out_i with fixed pseudo-random weights, so
// every output element contributes to the checked gradient.
inline double weighted_sum(const turbo::Tensor& out) {
  turbo::Rng crng(0xc0ffee);
  double j = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i)
    j += (crng.uniform() * 2.0 - 1.0) * static_cast<double>((*out.data)[i]);
  return j;
}

inline void seed_weighted_grad(turbo::Tensor& out) {
  turbo::Rng crng(0xc0ffee);
  out.ensure_grad();
  for (std::size_t i = 0; i < out.numel(); ++i)
    (*out.grad)[i] = static_cast<float>(crng.uniform() * 2.0 - 1.0);
}

struct GradCheckStats {
  int points = 0;
  double max_err = 0.0;
};

// Central finite differences on the inputs of `forward` against tape
// gradients. eps = 1e-3 in fp32. The probe itself carries noise of roughly
// ulp(J)/(2*eps) ~ 5e-4, so entries below `small` are held to the absolute
// bound tol * small rather than a pure ratio; with O(1)-scaled test inputs
// that still pins every gradient to within ~1e-3 absolute.
inline GradCheckStats check_gradients(const std::function<turbo::Tensor()>& forward,
                                      const std::vector<turbo::Tensor>& inputs,
                                      int points_per_input, turbo::Rng& rng, double tol = 1e-3,
                                      double eps = 1e-3, double small = 1.0) {
  using namespace turbo;
  for (const Tensor& in : inputs) {
    REQUIRE(in.requires_grad);
    const_cast<Tensor&>(in).zero_grad();
  }
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor out = forward();
    seed_weighted_grad(out);
    tape.backward();
  }
  std::vector<std::vector<float>> analytic;
  for (const Tensor& in : inputs) analytic.push_back(*in.grad);

  GradCheckStats stats;
  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    const Tensor& in = inputs[ii];
    const int npts = std::min<int>(points_per_input, static_cast<int>(in.numel()));
    for (int p = 0; p < npts; ++p) {
      const std::size_t idx =
          static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(in.numel()) - 1));
      const float orig = (*in.data)[idx];
      (*in.data)[idx] = orig + static_cast<float>(eps);
      const double jp = weighted_sum(forward());
      (*in.data)[idx] = orig - static_cast<float>(eps);
      const double jm = weighted_sum(forward());
      (*in.data)[idx] = orig;

      const double fd = (jp - jm) / (2.0 * eps);
      const double an = static_cast<double>(analytic[ii][idx]);
      const double denom = std::max({std::abs(fd), std::abs(an), small});
      const double err = std::abs(fd - an) / denom;
      stats.max_err = std::max(stats.max_err, err);
      ++stats.points;
      INFO("input ", ii, " idx ", idx, " analytic ", an, " fd ", fd);
      CHECK(err <= tol);
    }
  }
  return stats;
}

}  // namespace testutil
