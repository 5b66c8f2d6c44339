#pragma once

// Run orchestration: configuration, the training step, checkpoints and
// ablation sweeps.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msn/data.hpp"
#include "msn/ema.hpp"
#include "msn/masking.hpp"
#include "msn/objective.hpp"
#include "msn/optimizer.hpp"
#include "msn/probe.hpp"
#include "msn/vit.hpp"

namespace msn {

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | cifar10
  std::string path;                // cifar10: directory with data_batch_*.bin / test_batch.bin, or one file
  std::size_t classes = 8;
  std::size_t per_class = 500;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 0;

  std::string to_string() const;
  static DatasetSpec parse(const std::string& text);
};

// Which statistics the target head's batch norms use.
enum class TargetNorm {
  RunningStats,  // eval mode with the target's own (EMA) running statistics
  BatchStats,    // current target batch, running statistics untouched
};

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 3000;
  std::size_t batch_size = 64;
  EncoderConfig encoder;
  std::size_t prototypes = 64;
  LossConfig loss;
  double ema_start = 0.996;
  double ema_end = 1.0;
  double lr_start = 0.0002;
  double lr_peak = 0.001;
  double lr_final = 1e-6;
  std::size_t warmup_steps = 300;
  double wd_start = 0.04;
  double wd_end = 0.4;
  std::vector<MaskSpec> anchors;
  AugmentPolicy augment;
  DatasetSpec data;
  TargetNorm target_norm = TargetNorm::BatchStats;
  std::size_t checkpoint_every = 0;  // 0 = only at the end

  std::size_t views() const { return anchors.size(); }
  EmaSchedule ema() const;
  ScheduleConfig schedule() const;

  void validate() const;
  // Flat "key = value" lines covering every field, in a fixed order.
  std::string dump() const;
  // Applies one key; unknown keys throw ParameterError.
  void set(const std::string& key, const std::string& value);
  std::vector<std::string> keys() const;
};

TrainConfig desk_preset();
// Hyperparameters of the full-size recipe (ViT-S/16, 224 px, 1 random + 10 focal anchors).
TrainConfig paper_preset();

// Parses key = value text on top of `base`; '#' starts a comment.
TrainConfig parse_config(const std::string& text, const TrainConfig& base = desk_preset());
TrainConfig load_config(const std::string& path);

struct Datasets {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> test;
};
Datasets load_datasets(const DatasetSpec& spec, std::size_t image_size);

struct TrainState {
  TrainConfig config;
  Encoder anchor;
  Encoder target;
  Tensor prototypes;
  OptimState optim;
  std::size_t step = 0;
};

// Step-0 state: anchor from the seed, target an exact copy, fresh optimizer.
TrainState init_state(const TrainConfig& config);

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double ce = 0.0;
  double memax = 0.0;
  double target_entropy = 0.0;  // mean row entropy of the sharpened targets
  double anchor_entropy = 0.0;  // mean row entropy of the anchor predictions
  double min_pbar = 0.0;        // smallest entry of the mean anchor prediction
  double lr = 0.0;
  double wd = 0.0;
  double momentum = 0.0;
  double wallclock_ms = 0.0;

  std::string to_json() const;
};

class Trainer {
 public:
  Trainer(TrainState state, const std::vector<ImageRecord>& train, std::size_t threads = 1);

  // One optimisation step. On a non-finite loss the state is left as it was
  // before the step and NumericError is thrown.
  StepMetrics step();

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }

  // Image indices of the batch at `step` (epoch-wise permutations of the pool).
  std::vector<std::size_t> batch_indices(std::size_t step) const;
  std::vector<ViewBundle> make_batch(std::size_t step) const;

 private:
  TrainState state_;
  const std::vector<ImageRecord>& train_;
  std::size_t threads_;
  ParameterSet trainable_;
  mutable std::size_t perm_epoch_ = static_cast<std::size_t>(-1);
  mutable std::vector<std::size_t> perm_;
};

// ---- checkpoints ----
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);
// JSON summary: version, step, config, and every record's name and shape.
std::string inspect_checkpoint(const std::string& path);

// ---- whole runs ----
struct RunOptions {
  std::string out_dir = "run";
  std::optional<std::string> resume;
  std::optional<std::size_t> stop_at;  // checkpoint and return once this many steps are done
  std::size_t threads = 1;
  bool verbose = false;
};

// Trains to config.steps (or stop_at), writing metrics.jsonl (appended when
// resuming) and checkpoint.bin under out_dir.
TrainState train(const TrainConfig& config, const RunOptions& options);

// In-memory training; `on_step` sees every metrics record.
TrainState train(TrainState state, const std::vector<ImageRecord>& data, std::size_t threads,
                 const std::function<void(const StepMetrics&)>& on_step = {});

// ---- ablations ----
struct AblationVariant {
  std::string name;
  TrainConfig config;
};

// masking_strategy | masking_ratio | view_sharing | prototypes | sinkhorn
std::vector<AblationVariant> ablation_variants(const TrainConfig& base, const std::string& axis);

struct AblationRow {
  std::string axis;
  std::string variant;
  std::size_t k = 0;
  std::vector<double> top1;  // per training seed, mean over probe splits
  double mean = 0.0;
  double std = 0.0;

  std::string to_json() const;
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t k = 13;
  std::vector<std::uint64_t> probe_seeds{0, 1, 2};
  std::size_t threads = 1;
  std::optional<std::string> out_dir;  // per-variant metrics logs when set
};

std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::string& axis, const AblationOptions& options,
                                      const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace msn
