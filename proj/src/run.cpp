#include "msn/run.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "msn/error.hpp"
#include "msn/parallel.hpp"

namespace msn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// value formatting

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ParameterError("config: " + key + " expects a number, got '" + text + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ParameterError("config: " + key + " expects a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ParameterError("config: " + key + " expects true or false, got '" + text + "'");
}

std::string anchors_string(const std::vector<MaskSpec>& anchors) {
  std::string out;
  for (std::size_t i = 0; i < anchors.size(); ++i) out += (i ? "," : "") + anchors[i].to_string();
  return out;
}

std::vector<MaskSpec> parse_anchors(const std::string& text) {
  std::vector<MaskSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    // "focal:3x4*2" repeats a view.
    std::size_t repeat = 1;
    if (const auto star = item.find('*'); star != std::string::npos) {
      repeat = parse_u64("anchors", trim(item.substr(star + 1)));
      item = trim(item.substr(0, star));
    }
    const MaskSpec spec = MaskSpec::parse(item);
    for (std::size_t r = 0; r < repeat; ++r) out.push_back(spec);
  }
  return out;
}

struct Field {
  const char* name;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define MSN_SIZE(key, expr)                                                                    \
  Field {                                                                                      \
    key, [](const TrainConfig& c) { return std::to_string(c.expr); },                          \
        [](TrainConfig& c, const std::string& v) { c.expr = static_cast<std::size_t>(parse_u64(key, v)); } \
  }
#define MSN_DOUBLE(key, expr)                                                       \
  Field {                                                                           \
    key, [](const TrainConfig& c) { return fmt_double(c.expr); },                   \
        [](TrainConfig& c, const std::string& v) { c.expr = parse_double(key, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](const TrainConfig& c) { return std::to_string(c.seed); },
            [](TrainConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
      MSN_SIZE("steps", steps),
      MSN_SIZE("batch_size", batch_size),
      MSN_SIZE("image_size", encoder.image_size),
      MSN_SIZE("patch_size", encoder.patch_size),
      MSN_SIZE("channels", encoder.channels),
      MSN_SIZE("depth", encoder.depth),
      MSN_SIZE("hidden_dim", encoder.hidden_dim),
      MSN_SIZE("heads", encoder.heads),
      MSN_DOUBLE("mlp_ratio", encoder.mlp_ratio),
      MSN_SIZE("head_hidden_dim", encoder.head_hidden_dim),
      MSN_SIZE("output_dim", encoder.output_dim),
      MSN_SIZE("prototypes", prototypes),
      MSN_DOUBLE("tau_anchor", loss.tau_anchor),
      MSN_DOUBLE("tau_target", loss.tau_target),
      MSN_DOUBLE("lambda", loss.lambda),
      Field{"sinkhorn", [](const TrainConfig& c) { return std::string(c.loss.sinkhorn_enabled ? "true" : "false"); },
            [](TrainConfig& c, const std::string& v) { c.loss.sinkhorn_enabled = parse_bool("sinkhorn", v); }},
      MSN_SIZE("sinkhorn_iters", loss.sinkhorn_iters),
      MSN_DOUBLE("ema_start", ema_start),
      MSN_DOUBLE("ema_end", ema_end),
      MSN_DOUBLE("lr_start", lr_start),
      MSN_DOUBLE("lr_peak", lr_peak),
      MSN_DOUBLE("lr_final", lr_final),
      MSN_SIZE("warmup_steps", warmup_steps),
      MSN_DOUBLE("wd_start", wd_start),
      MSN_DOUBLE("wd_end", wd_end),
      Field{"anchors", [](const TrainConfig& c) { return anchors_string(c.anchors); },
            [](TrainConfig& c, const std::string& v) { c.anchors = parse_anchors(v); }},
      Field{"view_sharing", [](const TrainConfig& c) { return std::string(to_string(c.augment.sharing)); },
            [](TrainConfig& c, const std::string& v) { c.augment.sharing = parse_view_sharing(v); }},
      MSN_DOUBLE("crop_scale_min", augment.crop_scale_min),
      MSN_DOUBLE("crop_scale_max", augment.crop_scale_max),
      MSN_DOUBLE("aspect_min", augment.aspect_min),
      MSN_DOUBLE("aspect_max", augment.aspect_max),
      MSN_DOUBLE("flip_prob", augment.flip_prob),
      MSN_DOUBLE("jitter_prob", augment.jitter_prob),
      MSN_DOUBLE("brightness", augment.brightness),
      MSN_DOUBLE("contrast", augment.contrast),
      MSN_DOUBLE("saturation", augment.saturation),
      MSN_DOUBLE("grayscale_prob", augment.grayscale_prob),
      MSN_DOUBLE("blur_prob", augment.blur_prob),
      MSN_DOUBLE("blur_sigma_min", augment.blur_sigma_min),
      MSN_DOUBLE("blur_sigma_max", augment.blur_sigma_max),
      Field{"dataset", [](const TrainConfig& c) { return c.data.to_string(); },
            [](TrainConfig& c, const std::string& v) {
              const DatasetSpec parsed = DatasetSpec::parse(v);
              c.data.kind = parsed.kind;
              c.data.path = parsed.path;
            }},
      MSN_SIZE("classes", data.classes),
      MSN_SIZE("per_class", data.per_class),
      MSN_SIZE("test_per_class", data.test_per_class),
      Field{"data_seed", [](const TrainConfig& c) { return std::to_string(c.data.seed); },
            [](TrainConfig& c, const std::string& v) { c.data.seed = parse_u64("data_seed", v); }},
      Field{"target_norm",
            [](const TrainConfig& c) {
              return std::string(c.target_norm == TargetNorm::RunningStats ? "running" : "batch");
            },
            [](TrainConfig& c, const std::string& v) {
              if (v == "running") c.target_norm = TargetNorm::RunningStats;
              else if (v == "batch") c.target_norm = TargetNorm::BatchStats;
              else throw ParameterError("config: target_norm must be running or batch, got '" + v + "'");
            }},
      MSN_SIZE("checkpoint_every", checkpoint_every),
  };
  return table;
}

#undef MSN_SIZE
#undef MSN_DOUBLE

}  // namespace

// ---------------------------------------------------------------------------
// config

std::string DatasetSpec::to_string() const { return kind == "cifar10" ? "cifar10:" + path : kind; }

DatasetSpec DatasetSpec::parse(const std::string& text) {
  DatasetSpec s;
  if (text == "synthetic") return s;
  if (text.rfind("cifar10:", 0) == 0 && text.size() > 8) {
    s.kind = "cifar10";
    s.path = text.substr(8);
    return s;
  }
  throw ParameterError("config: dataset must be 'synthetic' or 'cifar10:PATH', got '" + text + "'");
}

EmaSchedule TrainConfig::ema() const { return {ema_start, ema_end, std::max<std::size_t>(steps, 1)}; }

ScheduleConfig TrainConfig::schedule() const {
  return {lr_start, lr_peak, lr_final, warmup_steps, std::max<std::size_t>(steps, 1), wd_start, wd_end};
}

void TrainConfig::validate() const {
  encoder.validate();
  loss.validate();
  ema().validate();
  if (steps > 0) schedule().validate();
  if (batch_size < 1) throw ParameterError("config: batch_size must be >= 1");
  if (anchors.empty()) throw ParameterError("config: need at least one anchor view (M >= 1)");
  if (prototypes < 2) throw ParameterError("config: prototypes must be > 1");
  if (batch_size * anchors.size() < 2) throw ParameterError("config: head batch norm needs M*B >= 2");
  if (target_norm == TargetNorm::BatchStats && batch_size < 2) {
    throw ParameterError("config: target_norm = batch needs batch_size >= 2");
  }
  const std::size_t g = encoder.grid();
  for (const MaskSpec& m : anchors) {
    if (m.kind == MaskKind::Focal && (m.block_h < 1 || m.block_w < 1 || m.block_h > g || m.block_w > g)) {
      throw ParameterError("config: focal block " + m.to_string() + " does not fit the " + std::to_string(g) + "x" +
                           std::to_string(g) + " grid");
    }
    if (m.kind == MaskKind::Random && !(m.ratio >= 0.0 && m.ratio < 1.0)) {
      throw ParameterError("config: random mask ratio must be in [0, 1)");
    }
  }
  if (data.kind == "synthetic") {
    if (data.classes < 2 || data.classes > kSynthClassLimit) {
      throw ParameterError("config: synthetic classes must be in 2.." + std::to_string(kSynthClassLimit));
    }
    if (data.per_class < 1) throw ParameterError("config: per_class must be >= 1");
  }
}

std::string TrainConfig::dump() const {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.name) + " = " + f.get(*this) + "\n";
  return out;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (key == f.name) {
      f.set(*this, value);
      return;
    }
  }
  throw ParameterError("config: unknown key '" + key + "'");
}

std::vector<std::string> TrainConfig::keys() const {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.emplace_back(f.name);
  return out;
}

TrainConfig desk_preset() {
  TrainConfig c;
  c.encoder = EncoderConfig{};
  c.encoder.image_size = 32;
  c.encoder.patch_size = 4;
  c.encoder.channels = 3;
  c.encoder.depth = 3;
  c.encoder.hidden_dim = 64;
  c.encoder.heads = 4;
  c.encoder.mlp_ratio = 4.0;
  c.encoder.head_hidden_dim = 64;
  c.encoder.output_dim = 32;
  c.prototypes = 64;
  c.batch_size = 64;
  c.steps = 3000;
  c.warmup_steps = 300;
  c.anchors = {MaskSpec::random(0.5), MaskSpec::focal(3, 4), MaskSpec::focal(3, 4)};
  // blur radius scaled from 224 px to the 32 px images
  c.augment.blur_sigma_min = 0.1 * 32.0 / 224.0;
  c.augment.blur_sigma_max = 2.0 * 32.0 / 224.0;
  return c;
}

TrainConfig paper_preset() {
  TrainConfig c;
  c.encoder.image_size = 224;
  c.encoder.patch_size = 16;
  c.encoder.channels = 3;
  c.encoder.depth = 12;
  c.encoder.hidden_dim = 384;
  c.encoder.heads = 6;
  c.encoder.mlp_ratio = 4.0;
  c.encoder.head_hidden_dim = 384;
  c.encoder.output_dim = 256;
  c.prototypes = 1024;
  c.batch_size = 1024;
  // 300 epochs of 1251 steps with a 15-epoch warmup.
  c.steps = 300 * 1251;
  c.warmup_steps = 15 * 1251;
  c.anchors = {MaskSpec::random(0.15)};
  for (int i = 0; i < 10; ++i) c.anchors.push_back(MaskSpec::focal(6, 6));
  c.data.classes = 10;
  return c;
}

TrainConfig parse_config(const std::string& text, const TrainConfig& base) {
  TrainConfig c = base;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      c.set(key, value);
    } catch (const ParameterError& e) {
      throw ParameterError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

Datasets load_datasets(const DatasetSpec& spec, std::size_t image_size) {
  Datasets d;
  if (spec.kind == "synthetic") {
    Rng base(spec.seed);
    Rng train_rng = base.derive({0}), test_rng = base.derive({1});
    d.train = synth_dataset(spec.classes, spec.per_class, image_size, train_rng);
    d.test = synth_dataset(spec.classes, spec.test_per_class, image_size, test_rng);
    return d;
  }
  if (spec.kind == "cifar10") {
    if (image_size != 32) throw ParameterError("cifar10 images are 32x32; set image_size = 32");
    if (fs::is_directory(spec.path)) {
      for (int b = 1; b <= 5; ++b) {
        const fs::path p = fs::path(spec.path) / ("data_batch_" + std::to_string(b) + ".bin");
        if (fs::exists(p)) {
          auto part = load_cifar10(p.string());
          d.train.insert(d.train.end(), part.begin(), part.end());
        }
      }
      const fs::path t = fs::path(spec.path) / "test_batch.bin";
      if (fs::exists(t)) d.test = load_cifar10(t.string());
      if (d.train.empty()) throw FormatError("cifar10: no data_batch_*.bin files in " + spec.path);
    } else {
      d.train = load_cifar10(spec.path);
    }
    return d;
  }
  throw ParameterError("unknown dataset kind '" + spec.kind + "'");
}

// ---------------------------------------------------------------------------
// training state

namespace {

enum StreamKey : std::uint64_t { kInitStream = 1, kPrototypeStream = 2, kEpochStream = 3, kViewStream = 4 };

double row_entropy_mean(const Tensor& p) {
  const std::size_t R = p.dim(0), K = p.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t k = 0; k < K; ++k) {
      const double v = p.at(r * K + k);
      if (v > 0.0) total -= v * std::log(v);
    }
  return total / static_cast<double>(R);
}

double min_mean_prediction(const Tensor& p) {
  const std::size_t R = p.dim(0), K = p.dim(1);
  std::vector<double> mean(K, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t k = 0; k < K; ++k) mean[k] += p.at(r * K + k);
  return *std::min_element(mean.begin(), mean.end()) / static_cast<double>(R);
}

}  // namespace

TrainState init_state(const TrainConfig& config) {
  config.validate();
  Rng root(config.seed);
  Rng init = root.derive({kInitStream});
  Rng proto = root.derive({kPrototypeStream});
  TrainState s{config, make_encoder(config.encoder, init), {}, {}, {}, 0};
  s.target = s.anchor.copy(false);
  s.prototypes = init_prototypes(config.prototypes, config.encoder.output_dim, proto);
  return s;
}

std::string StepMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["ce"] = ce;
  j["memax"] = memax;
  j["target_entropy"] = target_entropy;
  j["anchor_entropy"] = anchor_entropy;
  j["min_pbar"] = min_pbar;
  j["lr"] = lr;
  j["wd"] = wd;
  j["momentum"] = momentum;
  j["wallclock_ms"] = wallclock_ms;
  return j.dump();
}

Trainer::Trainer(TrainState state, const std::vector<ImageRecord>& train, std::size_t threads)
    : state_(std::move(state)), train_(train), threads_(std::max<std::size_t>(1, threads)) {
  if (train_.empty()) throw PreconditionError("trainer: empty training set");
  for (auto& [name, t] : state_.anchor.params) trainable_.add(name, t);
  trainable_.add("prototypes", state_.prototypes);
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t N = train_.size(), B = state_.config.batch_size;
  std::vector<std::size_t> out(B);
  for (std::size_t j = 0; j < B; ++j) {
    const std::size_t g = step * B + j;
    const std::size_t epoch = g / N;
    if (epoch != perm_epoch_) {
      perm_.resize(N);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng r = Rng(state_.config.seed).derive({kEpochStream, epoch});
      for (std::size_t i = N; i > 1; --i) std::swap(perm_[i - 1], perm_[r.below(i)]);
      perm_epoch_ = epoch;
    }
    out[j] = perm_[g % N];
  }
  return out;
}

std::vector<ViewBundle> Trainer::make_batch(std::size_t step) const {
  const TrainConfig& c = state_.config;
  const auto idx = batch_indices(step);
  std::vector<ViewBundle> bundles(idx.size());
  const Rng root(c.seed);
  parallel_for(idx.size(), threads_, [&](std::size_t j) {
    Rng r = root.derive({kViewStream, step, j});
    bundles[j] = make_view_bundle(train_[idx[j]], c.anchors, c.encoder.patch_size, c.augment, r);
  });
  return bundles;
}

StepMetrics Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig& c = state_.config;
  const std::size_t s = state_.step, M = c.views();
  const std::vector<ViewBundle> batch = make_batch(s);

  Tensor targets;
  {
    NoGradGuard no_grad;
    std::vector<PatchSequence> seqs;
    for (const auto& b : batch) seqs.push_back(b.target);
    const Tensor trunk = encode_trunk(seqs, state_.target);
    Tensor z;
    if (c.target_norm == TargetNorm::RunningStats) {
      z = project(trunk, state_.target, Mode::Eval);
    } else {
      Encoder scratch{state_.target.config, state_.target.params, state_.target.norm_stats};
      z = project(trunk, scratch, Mode::Train);
    }
    targets = sharpen_targets(z, state_.prototypes, c.loss);
  }

  const auto saved_stats = state_.anchor.norm_stats;
  LossTerms terms;
  Tensor preds;
  try {
    std::vector<Tensor> trunks;
    for (std::size_t m = 0; m < M; ++m) {
      std::vector<PatchSequence> seqs;
      for (const auto& b : batch) seqs.push_back(b.anchors[m]);
      trunks.push_back(encode_trunk(seqs, state_.anchor));
    }
    const Tensor z = project(concat(trunks, 0), state_.anchor, Mode::Train);
    preds = predict(z, state_.prototypes, c.loss.tau_anchor);
    terms = msn_loss(preds, targets, c.loss);
    if (!std::isfinite(terms.loss.item())) throw NumericError("non-finite loss");
  } catch (const NumericError& e) {
    state_.anchor.norm_stats = saved_stats;
    throw NumericError("step " + std::to_string(s) + ": " + e.what());
  }

  terms.loss.backward();
  for (const auto& [name, t] : state_.target.params) {
    if (t.requires_grad() || t.has_grad()) throw Error("target parameter " + name + " received a gradient");
  }
  if (targets.requires_grad()) throw Error("sharpened targets are attached to the graph");

  StepMetrics m;
  m.step = s;
  m.lr = lr_at(s, c.schedule());
  m.wd = wd_at(s, c.schedule());
  m.momentum = momentum_at(s, c.ema());
  adamw_step(trainable_, state_.optim, m.lr, m.wd);
  trainable_.zero_grad();
  ema_update(state_.target.params, state_.anchor.params, m.momentum);
  ema_update(state_.target.norm_stats, state_.anchor.norm_stats, m.momentum);
  state_.step = s + 1;

  m.loss = terms.loss.item();
  m.ce = terms.ce.item();
  m.memax = terms.memax.item();
  m.target_entropy = row_entropy_mean(targets);
  m.anchor_entropy = row_entropy_mean(preds);
  m.min_pbar = min_mean_prediction(preds);
  m.wallclock_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'S', 'N', 'C', 'K', 'P', 'T', '1'};

// Little-endian writers; the host is assumed little-endian and checked once.
void require_little_endian() {
  const std::uint16_t probe = 1;
  std::uint8_t first = 0;
  std::memcpy(&first, &probe, 1);
  if (first != 1) throw CheckpointError("checkpoint: big-endian hosts are not supported");
}

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void record(const std::string& name, const Shape& shape, std::span<const double> values) {
    str(name);
    pod<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) pod<std::uint64_t>(d);
    out_.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  void scalar(const std::string& name, double v) { record(name, {}, std::span<const double>(&v, 1)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  void raw(void* dst, std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointTruncatedError("checkpoint: file ends mid-record");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > bytes_.size() - pos_) throw CheckpointTruncatedError("checkpoint: file ends inside a string");
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

struct Record {
  Shape shape;
  std::vector<double> values;
};

struct RawCheckpoint {
  std::uint32_t version = 0;
  std::string config;
  std::vector<std::pair<std::string, Record>> records;
};

RawCheckpoint read_raw(const std::string& path) {
  require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t head = std::min<std::size_t>(bytes.size(), sizeof kMagic);
  if (std::memcmp(bytes.data(), kMagic, head) != 0) throw CheckpointMagicError("checkpoint: bad magic in " + path);
  if (bytes.size() < sizeof kMagic) throw CheckpointTruncatedError("checkpoint: file ends inside the magic");
  Reader r(bytes);
  char magic[8];
  r.raw(magic, 8);
  RawCheckpoint raw;
  raw.version = r.pod<std::uint32_t>();
  if (raw.version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint: file has format version " + std::to_string(raw.version) +
                                 ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  raw.config = r.str();
  bool ended = false;
  while (!r.done()) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint8_t>();
    Record rec;
    for (std::uint8_t i = 0; i < rank; ++i) rec.shape.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>()));
    const std::size_t n = shape_numel(rec.shape);
    rec.values.resize(n);
    r.raw(rec.values.data(), n * sizeof(double));
    if (name == "end") {
      ended = true;
      break;
    }
    raw.records.emplace_back(std::move(name), std::move(rec));
  }
  if (!ended) throw CheckpointTruncatedError("checkpoint: missing end record in " + path);
  return raw;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& s) {
  require_little_endian();
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp);
    Writer w(out);
    out.write(kMagic, sizeof kMagic);
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.str(s.config.dump());
    for (const auto& [name, t] : s.anchor.params) w.record("anchor/" + name, t.shape(), t.values());
    for (const auto& [name, t] : s.target.params) w.record("target/" + name, t.shape(), t.values());
    for (const auto& [name, st] : s.anchor.norm_stats) {
      w.record("anchor_bn/" + name + "/mean", {st.mean.size()}, st.mean);
      w.record("anchor_bn/" + name + "/var", {st.var.size()}, st.var);
    }
    for (const auto& [name, st] : s.target.norm_stats) {
      w.record("target_bn/" + name + "/mean", {st.mean.size()}, st.mean);
      w.record("target_bn/" + name + "/var", {st.var.size()}, st.var);
    }
    w.record("prototypes", s.prototypes.shape(), s.prototypes.values());
    for (const auto& [name, v] : s.optim.first_moment) w.record("adam_m/" + name, {v.size()}, v);
    for (const auto& [name, v] : s.optim.second_moment) w.record("adam_v/" + name, {v.size()}, v);
    w.scalar("meta/step", static_cast<double>(s.step));
    w.scalar("meta/adam_step", static_cast<double>(s.optim.step));
    w.scalar("meta/rng_seed_hi", static_cast<double>(s.config.seed >> 32));
    w.scalar("meta/rng_seed_lo", static_cast<double>(s.config.seed & 0xFFFFFFFFULL));
    w.record("end", {0}, {});
    if (!out) throw CheckpointError("checkpoint: write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

TrainState load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  TrainConfig config;
  try {
    config = parse_config(raw.config);
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint: stored config is invalid: ") + e.what());
  }
  TrainState s = init_state(config);
  s.optim.first_moment.clear();
  s.optim.second_moment.clear();
  std::map<std::string, Record> recs;
  for (auto& [name, rec] : raw.records) recs.emplace(name, std::move(rec));
  auto take = [&](const std::string& name) -> Record& {
    auto it = recs.find(name);
    if (it == recs.end()) throw FormatError("checkpoint: missing record " + name);
    return it->second;
  };
  auto fill = [&](const std::string& name, Tensor& t) {
    Record& r = take(name);
    if (r.shape != t.shape()) {
      throw FormatError("checkpoint: record " + name + " has shape " + shape_string(r.shape) + ", expected " +
                        shape_string(t.shape()));
    }
    std::copy(r.values.begin(), r.values.end(), t.mutable_values().begin());
  };
  auto fill_vec = [&](const std::string& name, std::vector<double>& v) {
    Record& r = take(name);
    if (r.values.size() != v.size()) throw FormatError("checkpoint: record " + name + " has the wrong length");
    v = r.values;
  };
  for (auto& [name, t] : s.anchor.params) fill("anchor/" + name, t);
  for (auto& [name, t] : s.target.params) fill("target/" + name, t);
  for (auto& [name, st] : s.anchor.norm_stats) {
    fill_vec("anchor_bn/" + name + "/mean", st.mean);
    fill_vec("anchor_bn/" + name + "/var", st.var);
  }
  for (auto& [name, st] : s.target.norm_stats) {
    fill_vec("target_bn/" + name + "/mean", st.mean);
    fill_vec("target_bn/" + name + "/var", st.var);
  }
  fill("prototypes", s.prototypes);
  for (const auto& [name, rec] : recs) {
    if (name.rfind("adam_m/", 0) == 0) s.optim.first_moment[name.substr(7)] = rec.values;
    if (name.rfind("adam_v/", 0) == 0) s.optim.second_moment[name.substr(7)] = rec.values;
  }
  s.step = static_cast<std::size_t>(take("meta/step").values.at(0));
  s.optim.step = static_cast<std::size_t>(take("meta/adam_step").values.at(0));
  const auto hi = static_cast<std::uint64_t>(take("meta/rng_seed_hi").values.at(0));
  const auto lo = static_cast<std::uint64_t>(take("meta/rng_seed_lo").values.at(0));
  if (((hi << 32) | lo) != s.config.seed) throw FormatError("checkpoint: stored seed disagrees with the config");
  return s;
}

std::string inspect_checkpoint(const std::string& path) {
  const RawCheckpoint raw = read_raw(path);
  nlohmann::ordered_json j;
  j["version"] = raw.version;
  std::size_t params = 0;
  nlohmann::ordered_json records = nlohmann::ordered_json::array();
  for (const auto& [name, rec] : raw.records) {
    if (name == "meta/step") j["step"] = static_cast<std::uint64_t>(rec.values.at(0));
    if (name.rfind("anchor/", 0) == 0) params += rec.values.size();
    records.push_back({{"name", name}, {"shape", rec.shape}});
  }
  j["anchor_parameters"] = params;
  nlohmann::ordered_json cfg;
  std::stringstream ss(raw.config);
  std::string line;
  while (std::getline(ss, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) cfg[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  j["config"] = cfg;
  j["records"] = records;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// whole runs

TrainState train(TrainState state, const std::vector<ImageRecord>& data, std::size_t threads,
                 const std::function<void(const StepMetrics&)>& on_step) {
  Trainer trainer(std::move(state), data, threads);
  while (trainer.state().step < trainer.state().config.steps) {
    const StepMetrics m = trainer.step();
    if (on_step) on_step(m);
  }
  return std::move(trainer.state());
}

TrainState train(const TrainConfig& config, const RunOptions& options) {
  fs::create_directories(options.out_dir);
  const std::string ckpt = (fs::path(options.out_dir) / "checkpoint.bin").string();
  const std::string log_path = (fs::path(options.out_dir) / "metrics.jsonl").string();
  TrainState state = options.resume ? load_checkpoint(*options.resume) : init_state(config);
  const Datasets data = load_datasets(state.config.data, state.config.encoder.image_size);
  std::ofstream log(log_path, options.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot open " + log_path);

  Trainer trainer(std::move(state), data.train, options.threads);
  const TrainConfig& c = trainer.state().config;
  const std::size_t end = std::min(c.steps, options.stop_at.value_or(c.steps));
  while (trainer.state().step < end) {
    StepMetrics m;
    try {
      m = trainer.step();
    } catch (const NumericError&) {
      save_checkpoint(ckpt, trainer.state());
      throw;
    }
    log << m.to_json() << "\n";
    if (options.verbose && (m.step % 50 == 0 || m.step + 1 == end)) {
      std::cerr << "step " << m.step << " loss " << m.loss << " memax " << m.memax << " anchor_H " << m.anchor_entropy
                << " " << m.wallclock_ms << " ms\n";
    }
    if (c.checkpoint_every && trainer.state().step % c.checkpoint_every == 0) {
      log.flush();
      save_checkpoint(ckpt, trainer.state());
    }
  }
  log.flush();
  save_checkpoint(ckpt, trainer.state());
  return std::move(trainer.state());
}

// ---------------------------------------------------------------------------
// ablations

std::vector<AblationVariant> ablation_variants(const TrainConfig& base, const std::string& axis) {
  std::vector<AblationVariant> out;
  auto variant = [&](const std::string& name, auto&& edit) {
    TrainConfig c = base;
    edit(c);
    out.push_back({name, c});
  };
  double ratio = 0.5;
  MaskSpec focal = default_focal_spec(base.encoder.grid(), base.encoder.grid());
  for (const MaskSpec& m : base.anchors) {
    if (m.kind == MaskKind::Random) ratio = m.ratio;
  }
  for (const MaskSpec& m : base.anchors) {
    if (m.kind == MaskKind::Focal) {
      focal = m;
      break;
    }
  }
  if (axis == "masking_strategy") {
    // One anchor view per image, two for the combined row.
    variant("no_mask", [&](TrainConfig& c) { c.anchors = {MaskSpec::none()}; });
    variant("focal", [&](TrainConfig& c) { c.anchors = {focal}; });
    variant("random", [&](TrainConfig& c) { c.anchors = {MaskSpec::random(ratio)}; });
    variant("random+focal", [&](TrainConfig& c) { c.anchors = {MaskSpec::random(ratio), focal}; });
  } else if (axis == "masking_ratio") {
    for (double r : {0.15, 0.3, 0.5, 0.7}) {
      variant("ratio_" + fmt_double(r), [&](TrainConfig& c) {
        bool found = false;
        for (MaskSpec& m : c.anchors) {
          if (m.kind == MaskKind::Random) {
            m.ratio = r;
            found = true;
          }
        }
        if (!found) c.anchors.insert(c.anchors.begin(), MaskSpec::random(r));
      });
    }
  } else if (axis == "view_sharing") {
    variant("target_view", [](TrainConfig& c) { c.augment.sharing = ViewSharing::Shared; });
    variant("target_view+color", [](TrainConfig& c) { c.augment.sharing = ViewSharing::ColorJitterOnly; });
    variant("target_view+color+geometry", [](TrainConfig& c) { c.augment.sharing = ViewSharing::Independent; });
  } else if (axis == "prototypes") {
    const std::size_t K = base.prototypes;
    for (std::size_t k : {std::max<std::size_t>(2, K / 2), K, 2 * K}) {
      variant("K_" + std::to_string(k), [&](TrainConfig& c) { c.prototypes = k; });
    }
  } else if (axis == "sinkhorn") {
    variant("sinkhorn_lambda_1", [](TrainConfig& c) {
      c.loss.sinkhorn_enabled = true;
      c.loss.lambda = 1.0;
    });
    variant("none_lambda_1", [](TrainConfig& c) {
      c.loss.sinkhorn_enabled = false;
      c.loss.lambda = 1.0;
    });
    variant("none_lambda_5", [](TrainConfig& c) {
      c.loss.sinkhorn_enabled = false;
      c.loss.lambda = 5.0;
    });
  } else {
    throw ParameterError("ablate: unknown axis '" + axis +
                         "' (masking_strategy, masking_ratio, view_sharing, prototypes, sinkhorn)");
  }
  for (auto& v : out) v.config.validate();
  return out;
}

std::string AblationRow::to_json() const {
  nlohmann::ordered_json j;
  j["axis"] = axis;
  j["variant"] = variant;
  j["k"] = k;
  j["top1"] = top1;
  j["mean"] = mean;
  j["std"] = std;
  return j.dump();
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::string& axis, const AblationOptions& options,
                                      const std::function<void(const AblationRow&)>& on_row) {
  const auto variants = ablation_variants(base, axis);
  const Datasets data = load_datasets(base.data, base.encoder.image_size);
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    AblationRow row{axis, v.name, options.k, {}, 0.0, 0.0};
    for (std::uint64_t seed : options.seeds) {
      TrainConfig c = v.config;
      c.seed = seed;
      std::ofstream log;
      if (options.out_dir) {
        const fs::path dir = fs::path(*options.out_dir) / (v.name + "_seed" + std::to_string(seed));
        fs::create_directories(dir);
        log.open(dir / "metrics.jsonl", std::ios::trunc);
      }
      TrainState s = train(init_state(c), data.train, options.threads, [&](const StepMetrics& m) {
        if (log) log << m.to_json() << "\n";
      });
      const LowShotResult r =
          lowshot_eval(s.target, data.train, data.test, options.k, options.probe_seeds, std::nullopt, options.threads);
      row.top1.push_back(r.mean);
    }
    double sum = 0.0;
    for (double t : row.top1) sum += t;
    row.mean = sum / static_cast<double>(row.top1.size());
    double var = 0.0;
    for (double t : row.top1) var += (t - row.mean) * (t - row.mean);
    row.std = std::sqrt(var / static_cast<double>(row.top1.size()));
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace msn
