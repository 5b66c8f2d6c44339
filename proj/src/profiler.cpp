#include "msn/profiler.hpp"

#include <algorithm>
#include <chrono>

#include "json.hpp"
#include "msn/error.hpp"

namespace msn {

double flops_forward(const EncoderConfig& config, std::size_t S, std::size_t head_rows) {
  if (S < 1) throw ParameterError("flops_forward: S must be >= 1");
  const double d = static_cast<double>(config.hidden_dim);
  const double L = static_cast<double>(S) + 1.0;
  const double hidden = static_cast<double>(config.mlp_dim());
  const double attention = 4.0 * L * d * d + 2.0 * L * L * d;
  const double mlp = 2.0 * L * d * hidden;
  const double embed = static_cast<double>(S) * static_cast<double>(config.token_dim()) * d;
  const double h = static_cast<double>(config.head_hidden_dim), out = static_cast<double>(config.output_dim);
  const double head = static_cast<double>(head_rows) * (d * h + h * h + h * out);
  const double macs = embed + static_cast<double>(config.depth) * (attention + mlp) + head;
  return 2.0 * macs;
}

std::string CostReport::to_json() const {
  nlohmann::ordered_json j;
  j["masking_ratio"] = masking_ratio;
  j["sequence_length"] = sequence_length;
  j["flops_forward"] = flops_forward;
  j["view_ms"] = view_ms;
  j["step_ms"] = step_ms;
  j["peak_bytes"] = peak_bytes;
  j["steps"] = steps;
  return j.dump();
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

CostReport measure_step(const TrainConfig& config, double masking_ratio, std::size_t steps, std::size_t warmup,
                        const std::vector<ImageRecord>& data) {
  TrainConfig c = config;
  std::size_t random_view = c.anchors.size();
  for (std::size_t m = 0; m < c.anchors.size(); ++m) {
    if (c.anchors[m].kind == MaskKind::Random) {
      c.anchors[m].ratio = masking_ratio;
      if (random_view == c.anchors.size()) random_view = m;
    }
  }
  if (random_view == c.anchors.size()) {
    c.anchors.insert(c.anchors.begin(), MaskSpec::random(masking_ratio));
    random_view = 0;
  }
  c.steps = std::max(c.steps, warmup + steps + 1);
  c.warmup_steps = std::min(c.warmup_steps, c.steps - 1);
  c.validate();

  Trainer trainer(init_state(c), data, 1);
  const std::size_t P = c.encoder.num_patches();
  CostReport report;
  report.masking_ratio = masking_ratio;
  report.sequence_length = random_keep_count(P, masking_ratio);
  report.flops_forward = flops_forward(c.encoder, report.sequence_length);
  report.steps = steps;

  std::vector<double> view_times, step_times;
  for (std::size_t t = 0; t < warmup + steps; ++t) {
    const std::vector<ViewBundle> batch = trainer.make_batch(trainer.state().step);
    std::vector<PatchSequence> seqs;
    for (const auto& b : batch) seqs.push_back(b.anchors[random_view]);
    TrainState& s = trainer.state();
    const std::size_t B = seqs.size();
    const Tensor targets = Tensor::full({B, c.prototypes}, 1.0 / static_cast<double>(c.prototypes));

    // Scratch statistics so the timing pass leaves the run untouched.
    Encoder scratch{s.anchor.config, s.anchor.params, s.anchor.norm_stats};
    const auto v0 = std::chrono::steady_clock::now();
    {
      const Tensor trunk = encode_trunk(seqs, scratch);
      const Tensor z = project(trunk, scratch, B >= 2 ? Mode::Train : Mode::Eval);
      const Tensor p = predict(z, s.prototypes, c.loss.tau_anchor);
      cross_entropy(targets, p).backward();
    }
    const double view_ms = ms_since(v0);
    for (auto& [name, tensor] : s.anchor.params) tensor.zero_grad();
    s.prototypes.zero_grad();

    reset_peak_memory();
    const auto s0 = std::chrono::steady_clock::now();
    trainer.step();
    const double step_ms = ms_since(s0);
    if (t >= warmup) {
      view_times.push_back(view_ms);
      step_times.push_back(step_ms);
      report.peak_bytes = std::max(report.peak_bytes, memory_stats().peak_bytes);
    }
  }
  report.view_ms = median(view_times);
  report.step_ms = median(step_times);
  return report;
}

CostReport measure_step(const TrainConfig& config, double masking_ratio, std::size_t steps, std::size_t warmup) {
  Rng rng(config.data.seed);
  const std::size_t classes = std::clamp<std::size_t>(config.data.classes, 2, kSynthClassLimit);
  const std::size_t per_class = std::max<std::size_t>(1, (config.batch_size + classes - 1) / classes) * 2;
  const auto data = synth_dataset(classes, per_class, config.encoder.image_size, rng);
  return measure_step(config, masking_ratio, steps, warmup, data);
}

}  // namespace msn
