#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "msn/vit.hpp"

namespace msn {

struct ScheduleConfig {
  double lr_start = 0.0002;
  double lr_peak = 0.001;
  double lr_final = 1e-6;
  std::size_t warmup_steps = 15;
  std::size_t total_steps = 300;
  double wd_start = 0.04;
  double wd_end = 0.4;

  void validate() const;
};

// Linear warmup lr_start -> lr_peak, then cosine decay to lr_final.
double lr_at(std::size_t step, const ScheduleConfig& config);
// Cosine increase wd_start -> wd_end over total_steps.
double wd_at(std::size_t step, const ScheduleConfig& config);

// True for parameters that receive decoupled weight decay (linear weight matrices).
bool decays(const std::string& name);

struct OptimState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

// One AdamW update of every parameter in `params` from its populated gradient.
void adamw_step(ParameterSet& params, OptimState& state, double lr, double weight_decay);

}  // namespace msn
