#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epact/runtime.hpp"
#include "epact/train.hpp"

namespace epact {

enum class FailureCategory { TargetMisidentification, MultiPicking, TrajectoryErrors };

std::string category_name(FailureCategory c);

struct TrialResult {
  std::string policy;
  int state_id = 0;
  int index = 0;
  std::uint64_t seed = 0;
  Outcome outcome = Outcome::Timeout;
  int steps = 0;
  std::string log_ref;  // rollout episode directory, empty when not saved

  nlohmann::json to_json() const;
  static TrialResult from_json(const nlohmann::json& j);
  bool operator==(const TrialResult&) const = default;
};

/// wrong_target -> Target Misidentification, multi_pick -> Multi-Picking,
/// timeout -> Trajectory Errors. Throws SuccessNotAFailure for successes.
FailureCategory classify_failure(const TrialResult& trial);

/// Env seed of trial `index` on `state`; the policy does not enter, so all
/// policies face the same scenes.
std::uint64_t trial_seed(std::uint64_t base_seed, int state, int index);

struct ResultsTable {
  std::vector<std::string> policies;  // row order
  std::vector<int> states;            // column order
  int trials_per_cell = 0;
  std::vector<TrialResult> trials;
  std::map<std::string, std::string> fingerprints;  // policy -> config hash
  std::map<std::string, std::string> cell_errors;   // "policy/state" -> message

  int count(const std::string& policy, int state) const;
  int successes(const std::string& policy, int state) const;
  /// Success fraction; nullopt for an errored or empty cell.
  std::optional<double> rate(const std::string& policy, int state) const;
  /// Mean of the available per-state rates.
  std::optional<double> average(const std::string& policy) const;
  std::map<FailureCategory, int> failure_counts(const std::string& policy) const;
  bool empty() const { return trials.empty(); }
};

/// Runs one trial; injectable so the harness can be tested without models.
using TrialRunner = std::function<TrialResult(const std::string& policy, int state, int index, std::uint64_t seed)>;

struct MatrixOptions {
  std::vector<int> states{0, 1, 2, 3, 4, 5};
  int trials_per_cell = 10;
  std::uint64_t base_seed = 0;
  std::filesystem::path cache_dir;    // per-cell JSON cache; empty disables resuming
  std::filesystem::path rollout_dir;  // save rollouts here when non-empty
  SimParams sim;
  RolloutOptions rollout;
  std::function<void(const std::string&)> log;
};

/// Evaluates every (policy, state) cell with `runner`. Completed cells found
/// in the cache with a matching key are reused. A runner exception marks the
/// cell as errored and the matrix continues.
ResultsTable run_matrix(const std::vector<std::string>& policies, const TrialRunner& runner,
                        const MatrixOptions& opts, const std::map<std::string, std::string>& fingerprints = {});

struct PolicySpec {
  std::string name;
  std::filesystem::path checkpoint;
};

/// Closed-loop evaluation of checkpoints; a checkpoint that fails to load
/// errors all of its cells.
ResultsTable run_matrix(const std::vector<PolicySpec>& checkpoints, const MatrixOptions& opts);

/// Short hash of a JSON document (canonical dump).
std::string fingerprint(const nlohmann::json& j);

/// trials.csv (one row per trial), cells.csv (one row per cell), results.md
/// (success-rate table with reference rows) and failures.json. Throws
/// InvalidConfig for an empty table and IOFailure on write errors.
void render_report(const ResultsTable& table, const std::filesystem::path& dir);

/// Markdown success-rate table: one row per policy, State columns, Avg.
std::string results_markdown(const ResultsTable& table, bool include_reference = true);

/// Creates `<parent>/<UTC timestamp>_<hash8>` and writes fingerprint.json
/// holding `config` and its hash.
std::filesystem::path make_run_directory(const std::filesystem::path& parent, const nlohmann::json& config);

struct AblationSetting {
  std::string label;  // "up", "down", "up+down"
  std::vector<std::string> cameras;
  std::size_t parameters = 0;
  double inference_ms = 0.0;
  ResultsTable table;
};

struct AblationReport {
  std::vector<AblationSetting> settings;
};

/// Trains one checkpoint per camera setting from the same data and seed,
/// evaluates each with run_matrix and measures size and latency.
/// Checkpoints are saved under `out/<label>`.
AblationReport camera_ablation(const PolicyConfig& base, const std::filesystem::path& dataset,
                               const std::vector<std::vector<std::string>>& cameras_list, const MatrixOptions& opts,
                               const std::filesystem::path& out, const TrainOptions& train_opts = {});

/// camera_success.csv (setting, state, success rate), camera_cost.csv (setting, cameras,
/// parameters, inference ms, average success) and per-setting reports.
void write_ablation_report(const AblationReport& report, const std::filesystem::path& dir);

}  // namespace epact
