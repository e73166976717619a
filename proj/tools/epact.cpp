// epact: collect demonstrations, train policies, evaluate, replay and serve
// teleoperation from one binary. Exit codes: 0 success, 1 runtime failure,
// 2 usage error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "epact/config.hpp"
#include "epact/errors.hpp"
#include "epact/evalharness.hpp"
#include "epact/expert.hpp"
#include "epact/runtime.hpp"
#include "epact/teleop.hpp"
#include "epact/train.hpp"

namespace fs = std::filesystem;
using namespace epact;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void info(const std::string& msg) { std::cerr << msg << std::endl; }

// Flags left at their sentinel were not given and do not override the
// config file.
struct Overrides {
  std::map<std::string, std::string> values;
  std::vector<std::string> assignments;  // raw --set key=value

  void apply(RunConfig& cfg) const {
    for (const auto& a : assignments) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + a + "'");
      cfg.set(a.substr(0, eq), a.substr(eq + 1));
    }
    for (const auto& [k, v] : values) cfg.set(k, v);
  }
};

// Binds a string flag straight to a config key.
void bind(CLI::App* cmd, Overrides& o, const std::string& flag, const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>(flag, [&o, key](const std::string& v) { o.values[key] = v; }, help);
}

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw UsageError(what + " '" + p.string() + "' does not exist");
}

void require_fresh(const fs::path& p) {
  if (fs::exists(p) && !fs::is_empty(p)) throw UsageError("output '" + p.string() + "' already exists and is not empty");
}

RunConfig resolve(const std::string& config_file, const Overrides& o) {
  RunConfig cfg;
  if (!config_file.empty()) {
    if (!fs::is_regular_file(config_file)) throw UsageError("config file '" + config_file + "' does not exist");
    cfg.load_file(config_file);
  }
  o.apply(cfg);
  cfg.validate();
  return cfg;
}

int cmd_collect(const RunConfig& cfg, const fs::path& out) {
  const CollectSummary summary =
      collect_demos(cfg.collect_episodes, cfg.collect_states, cfg.collect_seed, out, cfg.sim, cfg.expert, info);
  cfg.write(out);
  std::printf("collected %d episodes in %d attempts\n", summary.episodes, summary.attempts);
  for (const auto& [state, n] : summary.per_state) std::printf("  state %d: %d\n", state, n);
  for (const auto& [strategy, n] : summary.per_strategy) std::printf("  %s: %d\n", strategy.c_str(), n);
  return kOk;
}

int cmd_train(const RunConfig& cfg, const fs::path& data, const fs::path& out) {
  require_dir(data, "dataset");
  require_fresh(out);
  TrainOptions opts;
  opts.states = cfg.train_states;
  opts.arm = cfg.sim.arm;
  opts.on_log = [](const LossRow& r) {
    std::fprintf(stderr, "step %6d  total %.5f  action %.5f  reg %.5f  end_pose %.5f  val %.5f\n", r.step,
                 r.train.total, r.train.rec_action, r.train.reg, r.train.rec_end_pose, r.val_total);
  };
  const PolicyConfig pc = cfg.policy_config();
  std::printf("training %s on %s (cameras %s, %zu parameters)\n", variant_name(pc.variant).c_str(), data.c_str(),
              cfg.get("policy.cameras").c_str(), count_parameters(pc));
  Checkpoint ckpt = train_policy(pc, data, opts);
  ckpt.meta["dataset"] = fs::absolute(data).string();
  ckpt.meta["run_config"] = cfg.to_json();
  save_checkpoint(ckpt, out);
  cfg.write(out);
  std::printf("checkpoint written to %s\n", out.c_str());
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& ckpts, const fs::path& report, bool save_rollouts) {
  std::vector<PolicySpec> specs;
  for (const auto& c : ckpts) {
    // NAME=PATH names a row explicitly; otherwise the directory name is used.
    const auto eq = c.find('=');
    PolicySpec s;
    s.checkpoint = eq == std::string::npos ? fs::path(c) : fs::path(c.substr(eq + 1));
    s.name = eq == std::string::npos ? fs::absolute(s.checkpoint).lexically_normal().filename().string() : c.substr(0, eq);
    if (s.name.empty()) s.name = s.checkpoint.string();
    require_dir(s.checkpoint, "checkpoint");
    for (const auto& other : specs)
      if (other.name == s.name) throw UsageError("two checkpoints share the name '" + s.name + "'; use NAME=PATH");
    specs.push_back(s);
  }
  nlohmann::json fp = cfg.to_json();
  for (const auto& s : specs) fp["checkpoints"][s.name] = fs::absolute(s.checkpoint).string();
  const fs::path run = make_run_directory(report, fp);
  cfg.write(run);

  MatrixOptions opts;
  opts.states = cfg.eval_states;
  opts.trials_per_cell = cfg.eval_trials;
  opts.base_seed = cfg.eval_seed;
  opts.cache_dir = run / "cache";
  if (save_rollouts) opts.rollout_dir = run / "rollouts";
  opts.sim = cfg.sim;
  opts.rollout.ensemble = cfg.ensemble;
  opts.rollout.ensemble_decay = cfg.ensemble_decay;
  opts.log = info;
  const ResultsTable table = run_matrix(specs, opts);
  render_report(table, run);
  std::printf("%s\nreport: %s\n", results_markdown(table).c_str(), run.c_str());
  return table.cell_errors.empty() ? kOk : kRuntime;
}

int cmd_replay(const RunConfig& cfg, const fs::path& data, int episode, const fs::path& ckpt, const fs::path& out,
               bool overlay) {
  require_dir(data, "dataset");
  require_dir(ckpt, "checkpoint");
  const auto ids = list_episodes(data);
  if (std::find(ids.begin(), ids.end(), episode) == ids.end())
    throw UsageError("episode " + std::to_string(episode) + " not found in " + data.string());
  const EpisodeRecord record = read_episode(data, episode);
  const Policy policy = Policy::load(ckpt);
  const OpenLoopResult r = replay_open_loop(policy, record, cfg.sim.arm);
  fs::create_directories(out);
  int frames = 0;
  if (overlay) frames = render_replay(policy, record, out, cfg.sim);
  nlohmann::json summary{{"episode", episode},
                         {"steps", record.length()},
                         {"position_rms_m", r.position_rms},
                         {"frames", frames},
                         {"variant", variant_name(policy.config().variant)}};
  std::ofstream(out / "replay.json") << summary.dump(2) << "\n";
  cfg.write(out);
  std::printf("episode %d: %d steps, open-loop position rms %.4f m, %d frames\n", episode, record.length(),
              r.position_rms, frames);
  return kOk;
}

int cmd_serve(const RunConfig& cfg, const fs::path& data) {
  TeleopOptions opts;
  opts.sim = cfg.sim;
  opts.sim.max_steps = cfg.serve_max_steps;
  opts.state = cfg.serve_state;
  opts.seed = cfg.serve_seed;
  opts.stream_fps = cfg.serve_fps;
  opts.data_dir = data;
  opts.log = info;
  TeleopServer server(opts, cfg.serve_port);
  info("teleop listening on ws://0.0.0.0:" + std::to_string(server.port()) + " (state " +
       std::to_string(cfg.serve_state) + ", " + cfg.get("serve.fps") + " fps), recordings -> " + data.string());
  server.run(true);
  info("teleop stopped");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EPACT strawberry-picking pipeline"};
  app.require_subcommand(1);
  std::string config_file;
  Overrides o;
  app.add_option("--config", config_file, "INI file with [section] key = value settings");
  app.add_option("--set", o.assignments, "Override one setting, e.g. --set train.lr=2e-4 (repeatable)");

  fs::path out, data, report, ckpt_path;
  std::vector<std::string> ckpts;
  int episode = -1;
  bool overlay = false, save_rollouts = false;

  auto* collect = app.add_subcommand("collect", "Write expert demonstrations");
  bind(collect, o, "--episodes", "collect.episodes", "Number of successful episodes");
  bind(collect, o, "--states", "collect.states", "States, e.g. 1,2,3 or 1-5");
  bind(collect, o, "--seed", "collect.seed", "Base seed");
  collect->add_option("--source", [](const CLI::results_t& r) { return r.size() == 1 && r[0] == "expert"; },
                      "Demonstration source (expert)");
  collect->add_option("--out", out, "Dataset directory")->required();

  auto* train = app.add_subcommand("train", "Train a policy checkpoint");
  bind(train, o, "--variant", "policy.variant", "act | epact-l | epact-ee");
  bind(train, o, "--cams", "policy.cameras", "up, down or up,down");
  bind(train, o, "--beta", "train.beta", "KL weight");
  bind(train, o, "--gamma", "train.gamma", "End-pose loss weight");
  bind(train, o, "--chunk", "policy.chunk", "Chunk size k");
  bind(train, o, "--steps", "train.steps", "Optimizer steps");
  bind(train, o, "--batch", "train.batch", "Batch size");
  bind(train, o, "--lr", "train.lr", "Peak learning rate");
  bind(train, o, "--seed", "train.seed", "Seed for init, split and sampling");
  bind(train, o, "--states", "train.states", "Dataset states to train on");
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--out", out, "Checkpoint directory")->required();

  auto* eval = app.add_subcommand("eval", "Closed-loop success matrix");
  eval->add_option("--ckpt", ckpts, "Checkpoint directory or NAME=DIR (repeatable)")->required();
  bind(eval, o, "--states", "eval.states", "States, e.g. 0-5");
  bind(eval, o, "--trials", "eval.trials", "Trials per cell");
  bind(eval, o, "--seed", "eval.seed", "Base trial seed");
  bind(eval, o, "--ensemble", "eval.ensemble", "Temporal ensembling on/off");
  eval->add_flag("--save-rollouts", save_rollouts, "Store every rollout under the run directory");
  eval->add_option("--report", report, "Parent directory for the run directory")->required();

  auto* replay = app.add_subcommand("replay", "Replay a recorded episode through a policy");
  replay->add_option("--episode", episode, "Episode id")->required();
  replay->add_option("--data", data, "Dataset directory")->required();
  replay->add_option("--ckpt", ckpt_path, "Checkpoint directory")->required();
  replay->add_flag("--overlay", overlay, "Write frames with the predicted trajectory drawn in");
  replay->add_option("--out", out, "Output directory")->required();

  auto* serve = app.add_subcommand("serve", "Teleoperation websocket service");
  bind(serve, o, "--port", "serve.port", "TCP port (default 8765)");
  bind(serve, o, "--state-id", "serve.state", "Initial state");
  bind(serve, o, "--fps", "serve.fps", "Observation stream rate");
  bind(serve, o, "--seed", "serve.seed", "Initial scene seed");
  bind(serve, o, "--max-steps", "serve.max_steps", "Env steps before an episode times out");
  serve->add_option("--data", data, "Directory for kept recordings")->default_val("teleop_data");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  RunConfig cfg;
  try {
    cfg = resolve(config_file, o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*collect) return cmd_collect(cfg, out);
    if (*train) return cmd_train(cfg, data, out);
    if (*eval) return cmd_eval(cfg, ckpts, report, save_rollouts);
    if (*replay) return cmd_replay(cfg, data, episode, ckpt_path, out, overlay);
    if (*serve) return cmd_serve(cfg, data);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
