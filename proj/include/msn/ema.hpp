#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "msn/vit.hpp"

namespace msn {

struct EmaSchedule {
  double m_start = 0.996;
  double m_end = 1.0;
  std::size_t total_steps = 1;

  void validate() const;
};

// Linear from m_start to m_end; steps past total_steps clamp to m_end.
double momentum_at(std::size_t step, const EmaSchedule& schedule);

// target <- m * target + (1 - m) * anchor for every parameter, without graph edges.
void ema_update(ParameterSet& target, const ParameterSet& anchor, double momentum);

// Same rule applied to batch-norm running statistics.
void ema_update(std::map<std::string, BatchNormStats>& target, const std::map<std::string, BatchNormStats>& anchor,
                double momentum);

}  // namespace msn
