#pragma once

#include <cstddef>

#include "msn/rng.hpp"
#include "msn/tensor.hpp"

namespace msn {

struct LossConfig {
  double tau_anchor = 0.1;
  double tau_target = 0.025;
  double lambda = 1.0;
  bool sinkhorn_enabled = true;
  std::size_t sinkhorn_iters = 3;

  void validate() const;
};

// K x d prototype matrix, rows normalised at use time.
Tensor init_prototypes(std::size_t count, std::size_t dim, Rng& rng);

// softmax(normalize(z) . normalize(q)^T / temperature) for z [d] or [N, d].
Tensor predict(const Tensor& z, const Tensor& prototypes, double temperature);

// Alternating column (to sum B/K) then row (to sum 1) normalisation, `iters` rounds.
Tensor sinkhorn(const Tensor& probs, std::size_t iters);

// Detached target distributions [B, K] from target projections [B, d].
Tensor sharpen_targets(const Tensor& target_z, const Tensor& prototypes, const LossConfig& config);

// -sum_k target_k log(anchor_k + 1e-12) per row; mean over rows for batched input.
Tensor cross_entropy(const Tensor& target, const Tensor& anchor);

// Entropy of the mean anchor prediction over all rows of [R, K].
Tensor me_max(const Tensor& anchor_preds);

struct LossTerms {
  Tensor loss;  // ce - lambda * memax
  Tensor ce;
  Tensor memax;
};

// anchor_preds [(M*B), K] ordered view-major (row m*B + i is view m of image i);
// targets [B, K].
LossTerms msn_loss(const Tensor& anchor_preds, const Tensor& targets, const LossConfig& config);

struct CollapseGradients {
  double ce_norm = 0.0;
  double memax_norm = 0.0;
};

// Gradient norms, w.r.t. the shared representation z and the prototypes, of the
// cross-entropy and me-max terms when every one of M*B anchor views collapses to z.
// Rejects targets containing a uniform row.
CollapseGradients collapse_gradient_check(const Tensor& z, const Tensor& prototypes, const Tensor& targets,
                                          std::size_t views, const LossConfig& config);

}  // namespace msn
