// msn: train, evaluate, ablate and profile masked siamese pre-training runs.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "msn/error.hpp"
#include "msn/probe.hpp"
#include "msn/profiler.hpp"
#include "msn/run.hpp"

namespace fs = std::filesystem;
using namespace msn;

namespace {

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::stringstream is(item);
    T v{};
    is >> v;
    if (is.fail() || !is.eof()) throw ParameterError("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  return out;
}

struct Common {
  std::string config_path;
  std::string preset = "desk";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 1;

  TrainConfig config() const {
    TrainConfig base;
    if (preset == "desk") base = desk_preset();
    else if (preset == "paper") base = paper_preset();
    else throw ParameterError("unknown preset '" + preset + "' (desk, paper)");
    std::string text;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ParameterError("cannot open config " + config_path);
      std::stringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    for (const auto& o : overrides) text += "\n" + o;
    TrainConfig c = parse_config(text, base);
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", c.config_path, "key = value config file");
    cmd->add_option("--preset", c.preset, "base preset: desk or paper")->capture_default_str();
    cmd->add_option("--set", c.overrides, "extra key=value overrides (repeatable)");
  }
  cmd->add_option("--seed", c.seed, "override the run seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--threads", c.threads, "worker threads for view generation and feature extraction")
      ->capture_default_str();
}

void write_lines(const std::string& dir, const std::string& file, const std::string& text) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / file, std::ios::app);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked siamese network pre-training at desk scale"};
  app.require_subcommand(1);

  Common train_opts;
  std::string resume;
  std::optional<std::size_t> stop_at;
  bool verbose = false;
  bool dump_config = false;
  auto* train_cmd = app.add_subcommand("train", "pre-train an encoder");
  add_common(train_cmd, train_opts);
  train_cmd->add_option("--resume", resume, "continue from a checkpoint (its stored config wins)");
  train_cmd->add_option("--stop-at", stop_at, "checkpoint and exit after this many steps");
  train_cmd->add_flag("--verbose", verbose, "progress on stderr");
  train_cmd->add_flag("--dump-config", dump_config, "print the effective config and exit");

  Common eval_opts;
  std::string eval_ckpt;
  std::string eval_k = "1,2,5,13";
  std::string eval_seeds = "0,1,2";
  std::string eval_mask;
  bool random_init = false;
  auto* eval_cmd = app.add_subcommand("eval", "low-shot probe of a checkpoint's target trunk");
  add_common(eval_cmd, eval_opts, false);
  eval_cmd->add_option("--checkpoint,--resume", eval_ckpt, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--k", eval_k, "images per class, comma-separated")->capture_default_str();
  eval_cmd->add_option("--seeds", eval_seeds, "split seeds, comma-separated")->capture_default_str();
  eval_cmd->add_option("--train-mask", eval_mask, "mask applied to probe training images only, e.g. random:0.7");
  eval_cmd->add_flag("--random-init", random_init, "evaluate the step-0 initialisation of the checkpoint's config");

  Common ablate_opts;
  std::string axis;
  std::string ablate_seeds = "0,1,2";
  std::size_t ablate_k = 13;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and probe every variant of one axis");
  add_common(ablate_cmd, ablate_opts);
  ablate_cmd->add_option("--axis", axis, "masking_strategy | masking_ratio | view_sharing | prototypes | sinkhorn")
      ->required();
  ablate_cmd->add_option("--seeds", ablate_seeds, "training seeds")->capture_default_str();
  ablate_cmd->add_option("--k", ablate_k, "images per class for the probe")->capture_default_str();

  Common profile_opts;
  std::string ratios = "0,0.3,0.5,0.7";
  std::size_t profile_steps = 50;
  std::size_t profile_warmup = 3;
  auto* profile_cmd = app.add_subcommand("profile", "analytic FLOPs and measured step cost per masking ratio");
  add_common(profile_cmd, profile_opts);
  profile_cmd->add_option("--ratios", ratios, "random masking ratios")->capture_default_str();
  profile_cmd->add_option("--steps", profile_steps, "timed steps per ratio")->capture_default_str();
  profile_cmd->add_option("--warmup", profile_warmup, "untimed steps per ratio")->capture_default_str();

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "print a checkpoint summary as JSON");
  inspect_cmd->add_option("path", inspect_path, "checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      RunOptions opts;
      opts.out_dir = train_opts.out.empty() ? "run" : train_opts.out;
      if (!resume.empty()) opts.resume = resume;
      opts.stop_at = stop_at;
      opts.threads = train_opts.threads;
      opts.verbose = verbose;
      const TrainConfig config = resume.empty() ? train_opts.config() : load_checkpoint(resume).config;
      if (dump_config) {
        std::cout << config.dump();
        return 0;
      }
      const TrainState s = train(config, opts);
      std::cout << "trained to step " << s.step << "; checkpoint in " << (fs::path(opts.out_dir) / "checkpoint.bin")
                << "\n";
    } else if (*eval_cmd) {
      TrainState s = load_checkpoint(eval_ckpt);
      if (random_init) s = init_state(s.config);
      const Datasets data = load_datasets(s.config.data, s.config.encoder.image_size);
      if (data.test.empty()) throw PreconditionError("eval: the dataset has no held-out test split");
      std::optional<MaskSpec> mask;
      if (!eval_mask.empty()) mask = MaskSpec::parse(eval_mask);
      const FeatureBank train = extract_features(s.target, data.train, mask, 0, eval_opts.threads);
      const FeatureBank test = extract_features(s.target, data.test, std::nullopt, 0, eval_opts.threads);
      const std::string run_id = fs::path(eval_ckpt).parent_path().filename().string() + (random_init ? ":init" : "");
      for (std::size_t k : parse_list<std::size_t>(eval_k)) {
        const LowShotResult r = lowshot_eval(train, test, k, parse_list<std::uint64_t>(eval_seeds));
        const std::string lines = lowshot_report(run_id, r);
        std::cout << lines;
        std::cerr << "k=" << k << ": " << std::fixed << std::setprecision(2) << r.mean << " +- " << r.std << "\n";
        write_lines(eval_opts.out, "eval.jsonl", lines);
      }
    } else if (*ablate_cmd) {
      AblationOptions opts;
      opts.seeds = parse_list<std::uint64_t>(ablate_seeds);
      opts.k = ablate_k;
      opts.threads = ablate_opts.threads;
      if (!ablate_opts.out.empty()) opts.out_dir = ablate_opts.out;
      run_ablation(ablate_opts.config(), axis, opts, [&](const AblationRow& row) {
        std::cout << row.to_json() << "\n" << std::flush;
        write_lines(ablate_opts.out, "ablation.jsonl", row.to_json() + "\n");
      });
    } else if (*profile_cmd) {
      const TrainConfig c = profile_opts.config();
      for (double r : parse_list<double>(ratios)) {
        const CostReport rep = measure_step(c, r, profile_steps, profile_warmup);
        std::cout << rep.to_json() << "\n" << std::flush;
        write_lines(profile_opts.out, "cost.jsonl", rep.to_json() + "\n");
      }
    } else if (*inspect_cmd) {
      std::cout << inspect_checkpoint(inspect_path) << "\n";
    }
  } catch (const msn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
