#include "msn/ema.hpp"

#include <algorithm>

#include "msn/error.hpp"

namespace msn {

void EmaSchedule::validate() const {
  if (!(m_start > 0.0 && m_start <= m_end && m_end <= 1.0)) {
    throw ParameterError("ema schedule requires 0 < m_start <= m_end <= 1");
  }
  if (total_steps == 0) throw ParameterError("ema schedule requires total_steps >= 1");
}

double momentum_at(std::size_t step, const EmaSchedule& schedule) {
  if (step >= schedule.total_steps) return schedule.m_end;
  return schedule.m_start +
         (schedule.m_end - schedule.m_start) * static_cast<double>(step) / static_cast<double>(schedule.total_steps);
}

namespace {

template <class Names>
std::string describe_difference(const Names& a, const Names& b) {
  std::string out;
  for (const auto& n : a)
    if (std::find(b.begin(), b.end(), n) == b.end()) out += " -" + n;
  for (const auto& n : b)
    if (std::find(a.begin(), a.end(), n) == a.end()) out += " +" + n;
  return out;
}

}  // namespace

void ema_update(ParameterSet& target, const ParameterSet& anchor, double momentum) {
  const auto tn = target.names(), an = anchor.names();
  if (tn != an) throw PreconditionError("ema_update: parameter names differ:" + describe_difference(tn, an));
  for (auto& [name, t] : target) {
    const Tensor& a = anchor.at(name);
    if (t.shape() != a.shape()) {
      throw DimensionError("ema_update: " + name + " has shape " + shape_string(t.shape()) + " in target but " +
                           shape_string(a.shape()) + " in anchor");
    }
    auto dst = t.mutable_values();
    const auto src = a.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = momentum * dst[i] + (1.0 - momentum) * src[i];
  }
}

void ema_update(std::map<std::string, BatchNormStats>& target, const std::map<std::string, BatchNormStats>& anchor,
                double momentum) {
  for (auto& [name, t] : target) {
    auto it = anchor.find(name);
    if (it == anchor.end() || it->second.mean.size() != t.mean.size()) {
      throw PreconditionError("ema_update: running statistics " + name + " missing or mismatched in anchor");
    }
    for (std::size_t i = 0; i < t.mean.size(); ++i) {
      t.mean[i] = momentum * t.mean[i] + (1.0 - momentum) * it->second.mean[i];
      t.var[i] = momentum * t.var[i] + (1.0 - momentum) * it->second.var[i];
    }
  }
}

}  // namespace msn
