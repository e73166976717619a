#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epact/expert.hpp"
#include "epact/policy.hpp"
#include "epact/sim_env.hpp"

namespace epact {

/// Every tunable of the pipeline in one place. Values resolve in three
/// layers: built-in defaults, then an INI file, then command-line flags.
/// Keys are "section.name", e.g. "train.beta" or "sim.image_width".
struct RunConfig {
  SimParams sim;
  std::string scene_file;  // optional SceneTable INI
  ExpertParams expert;
  PolicyConfig policy;
  std::vector<int> train_states{1, 2, 3, 4, 5};

  int collect_episodes = 200;
  std::vector<int> collect_states{1, 2, 3, 4, 5};
  std::uint64_t collect_seed = 0;

  std::vector<int> eval_states{0, 1, 2, 3, 4, 5};
  int eval_trials = 10;
  std::uint64_t eval_seed = 0;
  bool ensemble = true;
  double ensemble_decay = 0.01;

  int serve_port = 8765;
  int serve_state = 1;
  std::uint64_t serve_seed = 0;
  double serve_fps = 15.0;
  int serve_max_steps = 900;

  /// Sets one key from its text form; throws InvalidConfig for unknown keys
  /// or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();

  /// Applies every key of an INI file ([section] headers, key = value).
  void load_file(const std::filesystem::path& path);
  /// Writes run_config.ini and run_config.json into `dir`.
  void write(const std::filesystem::path& dir) const;

  nlohmann::json to_json() const;
  std::string to_ini() const;

  /// The policy settings with the image size taken from the simulator.
  PolicyConfig policy_config() const;

  /// Cross-field checks; throws InvalidConfig / InvalidState.
  void validate() const;
};

/// Parses "1,2,5", "0-5" or mixes such as "0,2-4"; throws InvalidConfig.
std::vector<int> parse_int_list(const std::string& text);
std::string format_int_list(const std::vector<int>& values);

/// Parses "up,down" / "wrist_up" style lists into canonical camera names.
std::vector<std::string> parse_cameras(const std::string& text);

}  // namespace epact
