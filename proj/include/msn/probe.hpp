#pragma once

// Frozen-feature evaluation: logistic-regression probes on target-trunk
// features and the masked/unmasked representation similarity.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msn/data.hpp"
#include "msn/masking.hpp"
#include "msn/vit.hpp"

namespace msn {

struct FeatureBank {
  std::vector<double> features;  // row-major [N, dim], L2-normalised rows
  std::vector<int> labels;
  std::size_t dim = 0;

  std::size_t size() const { return labels.size(); }
  FeatureBank subset(const std::vector<std::size_t>& rows) const;
};

struct ProbeConfig {
  double l2_strength = 1e-3;
  std::size_t max_iters = 5000;
  double tolerance = 1e-6;  // on the gradient norm
};

// Trunk CLS features of every image (no augmentation), optionally masked by
// `mask` with a fresh draw per image from streams keyed by `mask_seed`.
// Only trunk parameters are read; the projection head never enters.
FeatureBank extract_features(const Encoder& encoder, const std::vector<ImageRecord>& data,
                             const std::optional<MaskSpec>& mask = std::nullopt, std::uint64_t mask_seed = 0,
                             std::size_t threads = 1);

struct LogisticModel {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> weight;  // [dim, classes]
  std::vector<double> bias;    // [classes], unregularised, sums to zero
  double l2 = 0.0;
  double objective = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> history;  // objective after each iteration

  std::vector<double> logits(const double* x) const;
  int predict(const double* x) const;
};

// Mean multinomial cross-entropy + (l2/2) ||W||^2, full-batch gradient descent
// with a Barzilai-Borwein trial step and Armijo backtracking.
LogisticModel fit_logistic(const FeatureBank& bank, const ProbeConfig& config, std::size_t classes = 0);

double accuracy(const LogisticModel& model, const FeatureBank& bank);

// Picks l2 from `grid` by accuracy on a stratified held-out fifth, then refits on everything.
LogisticModel fit_probe(const FeatureBank& bank, const std::vector<double>& grid, std::size_t classes,
                        const ProbeConfig& base = {});

inline const std::vector<double>& default_l2_grid() {
  static const std::vector<double> grid{1e-4, 1e-3, 1e-2};
  return grid;
}

struct LowShotRun {
  std::uint64_t seed = 0;
  double top1 = 0.0;  // percent
  double l2 = 0.0;
  bool converged = true;
};

struct LowShotResult {
  std::size_t k = 0;
  std::vector<LowShotRun> runs;
  double mean = 0.0;
  double std = 0.0;  // population
};

// For each seed: k-shot split of `train`, probe fit, top-1 on `test`.
LowShotResult lowshot_eval(const FeatureBank& train, const FeatureBank& test, std::size_t k,
                           const std::vector<std::uint64_t>& seeds, const ProbeConfig& base = {});

// Same, extracting features from the encoder; `train_mask` masks only the probe's
// training images while the test images stay unmasked.
LowShotResult lowshot_eval(const Encoder& encoder, const std::vector<ImageRecord>& train,
                           const std::vector<ImageRecord>& test, std::size_t k, const std::vector<std::uint64_t>& seeds,
                           const std::optional<MaskSpec>& train_mask = std::nullopt, std::size_t threads = 1);

// Mean cos(trunk(masked), trunk(unmasked)) with one random mask per image.
double mask_invariance(const Encoder& encoder, const std::vector<ImageRecord>& data, double ratio,
                       std::uint64_t seed = 0, std::size_t threads = 1);

// One JSON line per (k, seed): {"run_id", "k", "seed", "top1"}.
std::string lowshot_report(const std::string& run_id, const LowShotResult& result);

}  // namespace msn
