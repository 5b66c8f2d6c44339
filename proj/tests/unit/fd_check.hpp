#pragma once

// Central finite-difference oracle for scalar-valued graphs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "msn/rng.hpp"
#include "msn/tensor.hpp"

namespace msn::testing {

struct FdReport {
  double max_rel_error = 0.0;
  std::string worst;  // "leaf[index]: analytic vs numeric"
  std::size_t checked = 0;
};

// Compares d loss / d leaf from backward() with (f(x+h) - f(x-h)) / 2h for
// every element of every leaf. Relative error uses max(|a|, |n|, 1e-8).
inline FdReport finite_difference_check(const std::function<Tensor()>& loss, std::vector<Tensor> leaves,
                                        double h = 1e-5, const std::vector<std::string>& names = {}) {
  for (auto& t : leaves) t.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : leaves) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));
    t.zero_grad();
  }
  FdReport report;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double x0 = values[i];
      values[i] = x0 + h;
      double up;
      {
        NoGradGuard g;
        up = loss().item();
      }
      values[i] = x0 - h;
      double down;
      {
        NoGradGuard g;
        down = loss().item();
      }
      values[i] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[l][i];
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = (l < names.size() ? names[l] : "leaf" + std::to_string(l)) + "[" + std::to_string(i) +
                       "]: analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return report;
}

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  Rng r(seed);
  for (double& x : v) x = scale * r.normal();
  return Tensor::from_values(shape, std::move(v), requires_grad);
}

}  // namespace msn::testing
