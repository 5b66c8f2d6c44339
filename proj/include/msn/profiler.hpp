#pragma once

// Analytic FLOP counts and measured step cost as a function of how many
// patches survive masking.

#include <cstddef>
#include <string>
#include <vector>

#include "msn/data.hpp"
#include "msn/run.hpp"
#include "msn/vit.hpp"

namespace msn {

// Forward FLOPs (2 x multiply-accumulates) for one view of S kept patches:
// patch embedding, `depth` blocks over S + 1 rows, and the projection head
// applied to `head_rows` vectors.
double flops_forward(const EncoderConfig& config, std::size_t S, std::size_t head_rows = 1);

struct CostReport {
  double masking_ratio = 0.0;
  std::size_t sequence_length = 0;  // kept patches of the random-masked view
  double flops_forward = 0.0;       // per random-masked view
  double view_ms = 0.0;             // median forward+backward of the random-masked anchor batch
  double step_ms = 0.0;             // median full optimisation step
  std::size_t peak_bytes = 0;       // tensor-storage high-water mark over the measured steps
  std::size_t steps = 0;

  std::string to_json() const;
};

// Times `steps` training steps (after `warmup` untimed ones) with the random
// anchor's ratio set to `masking_ratio`; other anchors are left as configured.
CostReport measure_step(const TrainConfig& config, double masking_ratio, std::size_t steps, std::size_t warmup,
                        const std::vector<ImageRecord>& data);

// Same, on a small synthetic pool built from the config.
CostReport measure_step(const TrainConfig& config, double masking_ratio, std::size_t steps, std::size_t warmup = 3);

}  // namespace msn
