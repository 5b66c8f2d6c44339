#include "msn/optimizer.hpp"

#include <cmath>

#include "msn/error.hpp"

namespace msn {

void ScheduleConfig::validate() const {
  if (!(warmup_steps < total_steps)) throw ParameterError("schedule requires warmup_steps < total_steps");
  if (!(lr_start >= 0.0 && lr_peak > 0.0 && lr_final >= 0.0)) throw ParameterError("learning rates must be >= 0");
  if (!(wd_start >= 0.0 && wd_end >= 0.0)) throw ParameterError("weight decay must be >= 0");
}

double lr_at(std::size_t step, const ScheduleConfig& c) {
  if (step < c.warmup_steps) {
    return c.lr_start + (c.lr_peak - c.lr_start) * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  const double span = static_cast<double>(c.total_steps - c.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  return c.lr_final + 0.5 * (c.lr_peak - c.lr_final) * (1.0 + std::cos(M_PI * progress));
}

double wd_at(std::size_t step, const ScheduleConfig& c) {
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(c.total_steps));
  return c.wd_start + (c.wd_end - c.wd_start) * 0.5 * (1.0 - std::cos(M_PI * progress));
}

bool decays(const std::string& name) {
  constexpr std::string_view suffix = ".weight";
  return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void adamw_step(ParameterSet& params, OptimState& state, double lr, double weight_decay) {
  std::string missing;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) missing += " " + name;
  }
  if (!missing.empty()) throw PreconditionError("adamw_step: no gradient for" + missing);

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params) {
    auto w = t.mutable_values();
    const auto g = t.grad();
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    if (m.size() != w.size()) throw DimensionError("adamw_step: moment size mismatch for " + name);
    const double shrink = decays(name) ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] = w[i] * shrink - lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace msn
