#include "msn/objective.hpp"

#include <cmath>
#include <vector>

#include "msn/error.hpp"

namespace msn {

void LossConfig::validate() const {
  if (!(tau_anchor > 0.0 && tau_anchor < 1.0)) throw ParameterError("tau_anchor must lie in (0, 1)");
  if (!(tau_target > 0.0 && tau_target < 1.0)) throw ParameterError("tau_target must lie in (0, 1)");
  if (!(tau_target < tau_anchor)) throw ParameterError("tau_target must be smaller than tau_anchor");
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be non-negative");
}

Tensor init_prototypes(std::size_t count, std::size_t dim, Rng& rng) {
  if (count < 2) throw ParameterError("prototypes: need K > 1, got " + std::to_string(count));
  std::vector<double> v(count * dim);
  for (double& x : v) x = rng.normal(0.0, 0.02);
  return Tensor::from_values({count, dim}, std::move(v), true);
}

Tensor predict(const Tensor& z, const Tensor& prototypes, double temperature) {
  if (prototypes.rank() != 2) throw DimensionError("predict: prototypes must be [K, d]");
  const bool single = z.rank() == 1;
  Tensor zz = single ? reshape(z, {1, z.dim(0)}) : z;
  if (zz.rank() != 2 || zz.dim(1) != prototypes.dim(1)) {
    throw DimensionError("predict: representation " + shape_string(z.shape()) + " incompatible with prototypes " +
                         shape_string(prototypes.shape()));
  }
  Tensor logits = matmul(l2_normalize(zz), transpose(l2_normalize(prototypes), 0, 1));
  Tensor p = softmax(logits, temperature);
  return single ? reshape(p, {prototypes.dim(0)}) : p;
}

Tensor sinkhorn(const Tensor& probs, std::size_t iters) {
  if (probs.rank() != 2) throw DimensionError("sinkhorn: expected [B, K], got " + shape_string(probs.shape()));
  const std::size_t B = probs.dim(0), K = probs.dim(1);
  std::vector<double> q(probs.values().begin(), probs.values().end());
  const double col_target = static_cast<double>(B) / static_cast<double>(K);
  std::vector<double> col(K);
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < K; ++k) col[k] += q[i * K + k];
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < K; ++k) q[i * K + k] *= col_target / col[k];
    for (std::size_t i = 0; i < B; ++i) {
      double row = 0.0;
      for (std::size_t k = 0; k < K; ++k) row += q[i * K + k];
      for (std::size_t k = 0; k < K; ++k) q[i * K + k] /= row;
    }
  }
  return Tensor::from_values({B, K}, std::move(q));
}

Tensor sharpen_targets(const Tensor& target_z, const Tensor& prototypes, const LossConfig& config) {
  NoGradGuard no_grad;
  Tensor z = target_z.rank() == 1 ? reshape(target_z, {1, target_z.dim(0)}) : target_z;
  Tensor p = predict(z.detach(), prototypes.detach(), config.tau_target);
  if (config.sinkhorn_enabled) p = sinkhorn(p, config.sinkhorn_iters);
  return p.detach();
}

Tensor cross_entropy(const Tensor& target, const Tensor& anchor) {
  if (target.shape() != anchor.shape()) {
    throw DimensionError("cross_entropy: target " + shape_string(target.shape()) + " vs anchor " +
                         shape_string(anchor.shape()));
  }
  Tensor per_row = scale(sum(mul(target.detach(), log(anchor, 1e-12)), anchor.rank() - 1), -1.0);
  return anchor.rank() == 1 ? per_row : mean(per_row);
}

Tensor me_max(const Tensor& anchor_preds) {
  if (anchor_preds.rank() == 1) return entropy(anchor_preds);
  return entropy(mean(anchor_preds, 0));
}

LossTerms msn_loss(const Tensor& anchor_preds, const Tensor& targets, const LossConfig& config) {
  if (anchor_preds.rank() != 2 || targets.rank() != 2 || anchor_preds.dim(1) != targets.dim(1)) {
    throw DimensionError("msn_loss: anchors " + shape_string(anchor_preds.shape()) + " vs targets " +
                         shape_string(targets.shape()));
  }
  const std::size_t B = targets.dim(0);
  if (anchor_preds.dim(0) % B != 0 || anchor_preds.dim(0) == 0) {
    throw DimensionError("msn_loss: " + std::to_string(anchor_preds.dim(0)) +
                         " anchor rows are not a whole number of views over " + std::to_string(B) + " targets");
  }
  const std::size_t M = anchor_preds.dim(0) / B;
  Tensor tiled = reshape(repeat(targets.detach(), M), {M * B, targets.dim(1)});
  Tensor ce = cross_entropy(tiled, anchor_preds);
  Tensor reg = me_max(anchor_preds);
  Tensor loss = sub(ce, scale(reg, config.lambda));
  return {loss, ce, reg};
}

namespace {

double grad_norm(std::span<const double> g) {
  double s = 0.0;
  for (double v : g) s += v * v;
  return std::sqrt(s);
}

}  // namespace

CollapseGradients collapse_gradient_check(const Tensor& z, const Tensor& prototypes, const Tensor& targets,
                                          std::size_t views, const LossConfig& config) {
  if (z.rank() != 1) throw DimensionError("collapse_gradient_check: z must be a single [d] vector");
  if (targets.rank() != 2 || targets.dim(1) != prototypes.dim(0)) {
    throw DimensionError("collapse_gradient_check: targets must be [B, K]");
  }
  if (views == 0) throw PreconditionError("collapse_gradient_check: need at least one anchor view");
  const std::size_t B = targets.dim(0), K = targets.dim(1);
  for (std::size_t i = 0; i < B; ++i) {
    double dev = 0.0;
    for (std::size_t k = 0; k < K; ++k) dev = std::max(dev, std::fabs(targets.at(i * K + k) - 1.0 / static_cast<double>(K)));
    if (dev <= 1e-12) {
      throw PreconditionError("collapse_gradient_check: target row " + std::to_string(i) +
                              " is uniform; sharpened targets must not be uniform");
    }
  }

  auto norms = [&](bool use_ce) {
    Tensor zl = z.detach();
    zl.set_requires_grad(true);
    Tensor ql = prototypes.detach();
    ql.set_requires_grad(true);
    Tensor anchors = reshape(repeat(zl, views * B), {views * B, z.dim(0)});
    Tensor preds = predict(anchors, ql, config.tau_anchor);
    LossTerms terms = msn_loss(preds, targets, config);
    (use_ce ? terms.ce : terms.memax).backward();
    const double nz = zl.has_grad() ? grad_norm(zl.grad()) : 0.0;
    const double nq = ql.has_grad() ? grad_norm(ql.grad()) : 0.0;
    return std::sqrt(nz * nz + nq * nq);
  };
  return {norms(true), norms(false)};
}

}  // namespace msn
