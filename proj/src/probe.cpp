#include "msn/probe.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include "json.hpp"

#include "msn/error.hpp"
#include "msn/parallel.hpp"

namespace msn {

namespace {

constexpr std::size_t kFeatureChunk = 64;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Raw trunk features [N, d_enc], row-major.
std::vector<double> trunk_features(const Encoder& encoder, const std::vector<ImageRecord>& data,
                                   const std::optional<MaskSpec>& mask, std::uint64_t mask_seed, std::size_t threads) {
  const std::size_t N = data.size(), D = encoder.config.hidden_dim;
  std::vector<double> out(N * D);
  const std::size_t chunks = (N + kFeatureChunk - 1) / kFeatureChunk;
  const Rng base(mask_seed);
  parallel_for(chunks, threads, [&](std::size_t c) {
    NoGradGuard no_grad;
    const std::size_t lo = c * kFeatureChunk, hi = std::min(N, lo + kFeatureChunk);
    std::vector<PatchSequence> seqs;
    seqs.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      PatchSequence seq = patchify(data[i].pixels, encoder.config.patch_size);
      if (mask) {
        Rng r = base.derive({i});
        seq = apply_mask(seq, make_mask(*mask, seq.grid_h, seq.grid_w, r));
      }
      seqs.push_back(std::move(seq));
    }
    for (const auto& group : group_by_length(seqs)) {
      std::vector<PatchSequence> batch;
      for (std::size_t g : group) batch.push_back(seqs[g]);
      const Tensor trunk = encode_trunk(batch, encoder);
      for (std::size_t r = 0; r < group.size(); ++r) {
        std::copy_n(trunk.values().begin() + static_cast<std::ptrdiff_t>(r * D), D,
                    out.begin() + static_cast<std::ptrdiff_t>((lo + group[r]) * D));
      }
    }
  });
  return out;
}

std::size_t infer_classes(const std::vector<int>& labels) {
  int top = -1;
  for (int l : labels) top = std::max(top, l);
  return static_cast<std::size_t>(top + 1);
}

struct Objective {
  const RowMatrix& X;
  const std::vector<int>& y;
  double l2;
  std::size_t C;

  // Value and gradient at theta = [W (D x C, row-major), b (C)].
  double operator()(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
    const auto N = X.rows(), D = X.cols();
    const auto Cs = static_cast<Eigen::Index>(C);
    Eigen::Map<const RowMatrix> W(theta.data(), D, Cs);
    Eigen::Map<const Eigen::RowVectorXd> b(theta.data() + D * Cs, Cs);
    RowMatrix Z = X * W;
    Z.rowwise() += b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double m = Z.row(i).maxCoeff();
      double s = 0.0;
      for (Eigen::Index k = 0; k < Cs; ++k) {
        Z(i, k) = std::exp(Z(i, k) - m);
        s += Z(i, k);
      }
      const auto yi = static_cast<Eigen::Index>(y[static_cast<std::size_t>(i)]);
      loss += std::log(s) - std::log(Z(i, yi));
      Z.row(i) /= s;
      Z(i, yi) -= 1.0;  // now P - Y
    }
    const double n = static_cast<double>(N);
    const double value = loss / n + 0.5 * l2 * W.squaredNorm();
    if (grad) {
      grad->resize(theta.size());
      Eigen::Map<RowMatrix> gW(grad->data(), D, Cs);
      gW = X.transpose() * Z / n + l2 * W;
      Eigen::Map<Eigen::RowVectorXd>(grad->data() + D * Cs, Cs) = Z.colwise().sum() / n;
    }
    return value;
  }
};

}  // namespace

FeatureBank FeatureBank::subset(const std::vector<std::size_t>& rows) const {
  FeatureBank out;
  out.dim = dim;
  out.features.reserve(rows.size() * dim);
  for (std::size_t r : rows) {
    if (r >= size()) throw DimensionError("feature bank: row " + std::to_string(r) + " out of range");
    out.features.insert(out.features.end(), features.begin() + static_cast<std::ptrdiff_t>(r * dim),
                        features.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim));
    out.labels.push_back(labels[r]);
  }
  return out;
}

FeatureBank extract_features(const Encoder& encoder, const std::vector<ImageRecord>& data,
                             const std::optional<MaskSpec>& mask, std::uint64_t mask_seed, std::size_t threads) {
  FeatureBank bank;
  bank.dim = encoder.config.hidden_dim;
  bank.features = trunk_features(encoder, data, mask, mask_seed, threads);
  for (std::size_t i = 0; i < data.size(); ++i) {
    double* row = bank.features.data() + i * bank.dim;
    double sq = 0.0;
    for (std::size_t j = 0; j < bank.dim; ++j) sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    for (std::size_t j = 0; j < bank.dim; ++j) row[j] = norm < 1e-12 ? 0.0 : row[j] / norm;
    bank.labels.push_back(data[i].label.value_or(-1));
  }
  return bank;
}

std::vector<double> LogisticModel::logits(const double* x) const {
  std::vector<double> z(bias);
  for (std::size_t j = 0; j < dim; ++j)
    for (std::size_t k = 0; k < classes; ++k) z[k] += x[j] * weight[j * classes + k];
  return z;
}

int LogisticModel::predict(const double* x) const {
  const auto z = logits(x);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

LogisticModel fit_logistic(const FeatureBank& bank, const ProbeConfig& config, std::size_t classes) {
  if (!(config.l2_strength > 0.0)) throw ParameterError("probe: l2_strength must be > 0");
  if (bank.size() == 0) throw PreconditionError("probe: empty feature bank");
  const std::size_t C = classes ? classes : infer_classes(bank.labels);
  if (C < 2) throw PreconditionError("probe: need at least two classes");
  for (int l : bank.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= C) throw PreconditionError("probe: label outside 0.." + std::to_string(C - 1));
  }
  const auto N = static_cast<Eigen::Index>(bank.size()), D = static_cast<Eigen::Index>(bank.dim);
  RowMatrix X = Eigen::Map<const RowMatrix>(bank.features.data(), N, D);
  const Objective f{X, bank.labels, config.l2_strength, C};

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(D * static_cast<Eigen::Index>(C) + static_cast<Eigen::Index>(C));
  Eigen::VectorXd g, g_prev, theta_prev, trial, g_trial;
  double value = f(theta, &g);

  LogisticModel model;
  model.dim = bank.dim;
  model.classes = C;
  model.l2 = config.l2_strength;
  double step = 1.0;
  std::size_t it = 0;
  for (; it < config.max_iters; ++it) {
    const double gsq = g.squaredNorm();
    if (std::sqrt(gsq) < config.tolerance) {
      model.converged = true;
      break;
    }
    if (it > 0) {
      const Eigen::VectorXd s = theta - theta_prev, y = g - g_prev;
      const double sy = s.dot(y);
      step = sy > 0.0 ? s.squaredNorm() / sy : 2.0 * step;
    }
    double trial_value = 0.0;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      trial = theta - step * g;
      trial_value = f(trial, &g_trial);
      if (trial_value <= value - 1e-4 * step * gsq) {
        accepted = true;
        break;
      }
      // near the optimum the Armijo decrease drops under the rounding noise of the
      // objective; then trust the gradient, allowing the value to move by that noise
      const double noise = 1e-14 * std::fabs(value);
      if (1e-4 * step * gsq < noise && trial_value <= value + noise && g_trial.squaredNorm() < gsq) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no descent left at machine precision
    theta_prev = std::move(theta);
    g_prev = std::move(g);
    theta = std::move(trial);
    g = g_trial;
    value = trial_value;
    model.history.push_back(value);
  }
  if (!model.converged && g.norm() < config.tolerance) model.converged = true;
  model.iterations = it;
  model.objective = value;
  model.grad_norm = g.norm();
  model.weight.assign(theta.data(), theta.data() + D * static_cast<Eigen::Index>(C));
  model.bias.assign(theta.data() + D * static_cast<Eigen::Index>(C), theta.data() + theta.size());
  return model;
}

double accuracy(const LogisticModel& model, const FeatureBank& bank) {
  if (bank.size() == 0) return 0.0;
  if (bank.dim != model.dim) throw DimensionError("probe: feature dim does not match the model");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < bank.size(); ++i)
    hits += model.predict(bank.features.data() + i * bank.dim) == bank.labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(bank.size());
}

namespace {

double mean_log_loss(const LogisticModel& model, const FeatureBank& bank) {
  double total = 0.0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto z = model.logits(bank.features.data() + i * bank.dim);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    total += std::log(s) + m - z[static_cast<std::size_t>(bank.labels[i])];
  }
  return total / static_cast<double>(bank.size());
}

}  // namespace

LogisticModel fit_probe(const FeatureBank& bank, const std::vector<double>& grid, std::size_t classes,
                        const ProbeConfig& base) {
  if (grid.empty()) throw ParameterError("probe: empty l2 grid");
  const std::size_t C = classes ? classes : infer_classes(bank.labels);
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < bank.size(); ++i) by_class[static_cast<std::size_t>(bank.labels[i])].push_back(i);
  std::vector<std::size_t> fit_rows, val_rows;
  bool can_validate = grid.size() > 1;
  for (const auto& rows : by_class) {
    const std::size_t n_val = rows.size() / 5;
    if (!rows.empty() && n_val == 0) can_validate = false;
    for (std::size_t r = 0; r < rows.size(); ++r) (r + n_val < rows.size() ? fit_rows : val_rows).push_back(rows[r]);
  }
  ProbeConfig cfg = base;
  cfg.l2_strength = grid[grid.size() / 2];
  if (can_validate) {
    const FeatureBank fit = bank.subset(fit_rows), val = bank.subset(val_rows);
    double best_acc = -1.0, best_loss = std::numeric_limits<double>::infinity();
    for (double l2 : grid) {
      ProbeConfig trial = base;
      trial.l2_strength = l2;
      const LogisticModel m = fit_logistic(fit, trial, C);
      const double acc = accuracy(m, val), loss = mean_log_loss(m, val);
      if (acc > best_acc || (acc == best_acc && loss < best_loss)) {
        best_acc = acc;
        best_loss = loss;
        cfg.l2_strength = l2;
      }
    }
  }
  LogisticModel model = fit_logistic(bank, cfg, C);
  return model;
}

LowShotResult lowshot_eval(const FeatureBank& train, const FeatureBank& test, std::size_t k,
                           const std::vector<std::uint64_t>& seeds, const ProbeConfig& base) {
  if (seeds.empty()) throw ParameterError("lowshot: need at least one seed");
  const std::size_t C = std::max(infer_classes(train.labels), infer_classes(test.labels));
  LowShotResult result;
  result.k = k;
  for (std::uint64_t seed : seeds) {
    const LowShotSplit split = make_lowshot_split(train.labels, k, seed);
    const FeatureBank probe_set = train.subset(split.indices());
    const LogisticModel model = fit_probe(probe_set, default_l2_grid(), C, base);
    LowShotRun run;
    run.seed = seed;
    run.top1 = 100.0 * accuracy(model, test);
    run.l2 = model.l2;
    run.converged = model.converged;
    result.runs.push_back(run);
  }
  double sum = 0.0;
  for (const auto& r : result.runs) sum += r.top1;
  result.mean = sum / static_cast<double>(result.runs.size());
  double var = 0.0;
  for (const auto& r : result.runs) var += (r.top1 - result.mean) * (r.top1 - result.mean);
  result.std = std::sqrt(var / static_cast<double>(result.runs.size()));
  return result;
}

LowShotResult lowshot_eval(const Encoder& encoder, const std::vector<ImageRecord>& train,
                           const std::vector<ImageRecord>& test, std::size_t k, const std::vector<std::uint64_t>& seeds,
                           const std::optional<MaskSpec>& train_mask, std::size_t threads) {
  const FeatureBank train_bank = extract_features(encoder, train, train_mask, 0, threads);
  const FeatureBank test_bank = extract_features(encoder, test, std::nullopt, 0, threads);
  return lowshot_eval(train_bank, test_bank, k, seeds);
}

double mask_invariance(const Encoder& encoder, const std::vector<ImageRecord>& data, double ratio, std::uint64_t seed,
                       std::size_t threads) {
  if (data.empty()) throw PreconditionError("mask_invariance: empty dataset");
  const std::size_t D = encoder.config.hidden_dim;
  const auto full = trunk_features(encoder, data, std::nullopt, seed, threads);
  const auto masked = trunk_features(encoder, data, MaskSpec::random(ratio), seed, threads);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double* a = full.data() + i * D;
    const double* b = masked.data() + i * D;
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      ab += a[j] * b[j];
      aa += a[j] * a[j];
      bb += b[j] * b[j];
    }
    const double denom = std::sqrt(aa * bb);
    total += denom < 1e-24 ? 0.0 : ab / denom;
  }
  return total / static_cast<double>(data.size());
}

std::string lowshot_report(const std::string& run_id, const LowShotResult& result) {
  std::string out;
  for (const auto& r : result.runs) {
    nlohmann::json j{{"run_id", run_id}, {"k", result.k}, {"seed", r.seed}, {"top1", r.top1}};
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace msn
