#include "epact/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "epact/errors.hpp"
#include "epact/random.hpp"

namespace epact {

namespace fs = std::filesystem;

std::string category_name(FailureCategory c) {
  switch (c) {
    case FailureCategory::TargetMisidentification: return "Target Misidentification";
    case FailureCategory::MultiPicking: return "Multi-Picking";
    case FailureCategory::TrajectoryErrors: return "Trajectory Errors";
  }
  return "Trajectory Errors";
}

nlohmann::json TrialResult::to_json() const {
  return {{"policy", policy}, {"state_id", state_id}, {"index", index}, {"seed", seed},
          {"outcome", outcome_name(outcome)}, {"steps", steps}, {"log_ref", log_ref}};
}

TrialResult TrialResult::from_json(const nlohmann::json& j) {
  TrialResult t;
  t.policy = j.at("policy").get<std::string>();
  t.state_id = j.at("state_id").get<int>();
  t.index = j.at("index").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.outcome = outcome_from_name(j.at("outcome").get<std::string>());
  t.steps = j.at("steps").get<int>();
  t.log_ref = j.value("log_ref", std::string());
  return t;
}

FailureCategory classify_failure(const TrialResult& trial) {
  switch (trial.outcome) {
    case Outcome::WrongTarget: return FailureCategory::TargetMisidentification;
    case Outcome::MultiPick: return FailureCategory::MultiPicking;
    case Outcome::Timeout: return FailureCategory::TrajectoryErrors;
    case Outcome::Success:
      throw Error(ErrorCode::SuccessNotAFailure, "trial " + std::to_string(trial.index) + " succeeded");
    case Outcome::Ongoing: break;
  }
  throw Error(ErrorCode::InvalidConfig, "trial outcome is not terminal");
}

std::uint64_t trial_seed(std::uint64_t base_seed, int state, int index) {
  return derive_seed(base_seed, {0x7e1a1, std::uint64_t(state), std::uint64_t(index)});
}

int ResultsTable::count(const std::string& policy, int state) const {
  return int(std::count_if(trials.begin(), trials.end(),
                           [&](const TrialResult& t) { return t.policy == policy && t.state_id == state; }));
}

int ResultsTable::successes(const std::string& policy, int state) const {
  return int(std::count_if(trials.begin(), trials.end(), [&](const TrialResult& t) {
    return t.policy == policy && t.state_id == state && t.outcome == Outcome::Success;
  }));
}

std::optional<double> ResultsTable::rate(const std::string& policy, int state) const {
  const int n = count(policy, state);
  if (n == 0) return std::nullopt;
  return double(successes(policy, state)) / n;
}

std::optional<double> ResultsTable::average(const std::string& policy) const {
  double sum = 0.0;
  int n = 0;
  for (int s : states)
    if (const auto r = rate(policy, s)) {
      sum += *r;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::map<FailureCategory, int> ResultsTable::failure_counts(const std::string& policy) const {
  std::map<FailureCategory, int> out{{FailureCategory::TargetMisidentification, 0},
                                     {FailureCategory::MultiPicking, 0},
                                     {FailureCategory::TrajectoryErrors, 0}};
  for (const auto& t : trials)
    if (t.policy == policy && t.outcome != Outcome::Success) ++out[classify_failure(t)];
  return out;
}

std::string fingerprint(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_string(j.dump())));
  return buf;
}

namespace {

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  return out;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorCode::IOFailure, "cannot write " + tmp.string());
    out << text;
    if (!out) throw Error(ErrorCode::IOFailure, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot rename " + tmp.string() + ": " + ec.message());
}

nlohmann::json cell_key(const std::string& policy, int state, const MatrixOptions& opts, const std::string& fp) {
  return {{"policy", policy}, {"state", state}, {"trials", opts.trials_per_cell},
          {"base_seed", opts.base_seed}, {"fingerprint", fp}};
}

std::optional<std::vector<TrialResult>> load_cell(const fs::path& path, const nlohmann::json& key) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("key") != key) return std::nullopt;
    std::vector<TrialResult> out;
    for (const auto& t : j.at("trials")) out.push_back(TrialResult::from_json(t));
    return out;
  } catch (const std::exception&) {
    return std::nullopt;  // unreadable cache entries are recomputed
  }
}

}  // namespace

ResultsTable run_matrix(const std::vector<std::string>& policies, const TrialRunner& runner, const MatrixOptions& opts,
                        const std::map<std::string, std::string>& fingerprints) {
  if (opts.trials_per_cell < 1) throw Error(ErrorCode::InvalidConfig, "trials_per_cell must be >= 1");
  for (int s : opts.states)
    if (s < 0 || s > 5) throw Error(ErrorCode::InvalidState, "state " + std::to_string(s) + " not in 0..5");
  ResultsTable table;
  table.policies = policies;
  table.states = opts.states;
  table.trials_per_cell = opts.trials_per_cell;
  table.fingerprints = fingerprints;
  if (!opts.cache_dir.empty()) fs::create_directories(opts.cache_dir);

  for (const auto& policy : policies) {
    const auto fp_it = fingerprints.find(policy);
    const std::string fp = fp_it == fingerprints.end() ? "" : fp_it->second;
    for (int state : opts.states) {
      const nlohmann::json key = cell_key(policy, state, opts, fp);
      const fs::path cache_path =
          opts.cache_dir.empty() ? fs::path() : opts.cache_dir / ("cell_" + sanitize(policy) + "_s" + std::to_string(state) + ".json");
      if (!cache_path.empty())
        if (auto cached = load_cell(cache_path, key)) {
          if (opts.log) opts.log(policy + " state " + std::to_string(state) + ": cached");
          table.trials.insert(table.trials.end(), cached->begin(), cached->end());
          continue;
        }
      std::vector<TrialResult> cell;
      try {
        for (int i = 0; i < opts.trials_per_cell; ++i) {
          TrialResult r = runner(policy, state, i, trial_seed(opts.base_seed, state, i));
          r.policy = policy;
          r.state_id = state;
          r.index = i;
          r.seed = trial_seed(opts.base_seed, state, i);
          cell.push_back(std::move(r));
        }
      } catch (const std::exception& e) {
        table.cell_errors[policy + "/" + std::to_string(state)] = e.what();
        if (opts.log) opts.log(policy + " state " + std::to_string(state) + ": error: " + e.what());
        continue;
      }
      if (!cache_path.empty()) {
        nlohmann::json j{{"key", key}, {"trials", nlohmann::json::array()}};
        for (const auto& t : cell) j["trials"].push_back(t.to_json());
        write_text_atomic(cache_path, j.dump(1) + "\n");
      }
      if (opts.log) {
        const int ok = int(std::count_if(cell.begin(), cell.end(), [](const auto& t) { return t.outcome == Outcome::Success; }));
        opts.log(policy + " state " + std::to_string(state) + ": " + std::to_string(ok) + "/" + std::to_string(cell.size()));
      }
      table.trials.insert(table.trials.end(), cell.begin(), cell.end());
    }
  }
  return table;
}

ResultsTable run_matrix(const std::vector<PolicySpec>& checkpoints, const MatrixOptions& opts) {
  std::map<std::string, std::optional<Policy>> loaded;
  std::map<std::string, std::string> load_errors, fingerprints;
  std::vector<std::string> names;
  for (const auto& spec : checkpoints) {
    names.push_back(spec.name);
    try {
      loaded.emplace(spec.name, Policy::load(spec.checkpoint));
      fingerprints[spec.name] = fingerprint(loaded.at(spec.name)->config().to_json());
    } catch (const std::exception& e) {
      loaded.emplace(spec.name, std::nullopt);
      load_errors[spec.name] = e.what();
    }
  }
  std::map<std::string, int> saved_count;
  TrialRunner runner = [&](const std::string& name, int state, int index, std::uint64_t seed) {
    const auto& policy = loaded.at(name);
    if (!policy) throw Error(ErrorCode::IOFailure, "checkpoint load failed: " + load_errors.at(name));
    SimParams sim = opts.sim;
    sim.image_width = policy->config().image_width;
    sim.image_height = policy->config().image_height;
    Env env(sim);
    RolloutOptions ro = opts.rollout;
    if (opts.rollout_dir.empty()) ro.keep_images = false;
    const RolloutLog log = run_episode(env, *policy, state, seed, ro);
    TrialResult r;
    r.outcome = log.outcome;
    r.steps = log.steps;
    if (!opts.rollout_dir.empty()) {
      const fs::path root = opts.rollout_dir / sanitize(name);
      const int id = save_rollout(log, root);
      r.log_ref = (fs::path(sanitize(name)) / episode_dir("", id)).string();
    }
    (void)index;
    return r;
  };
  return run_matrix(names, runner, opts, fingerprints);
}

// ---------------------------------------------------------------------------
// Reporting

namespace {

struct ReferenceRow {
  const char* name;
  double rates[6];
  double average;
};

// Success rates (%) of the reference real-robot study, states 0-5.
constexpr ReferenceRow kReference[] = {
    {"ACT", {10, 60, 30, 70, 30, 10}, 35.0},
    {"EPACT-L", {50, 90, 70, 50, 80, 60}, 66.7},
    {"EPACT-EE", {70, 60, 80, 90, 60, 70}, 71.7},
};

std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f%%", 100.0 * fraction);
  return buf;
}

}  // namespace

std::string results_markdown(const ResultsTable& table, bool include_reference) {
  std::ostringstream md;
  md << "| Method |";
  for (int s : table.states) md << " State" << s << " |";
  md << " Avg. |\n|---|";
  for (std::size_t i = 0; i < table.states.size(); ++i) md << "---|";
  md << "---|\n";
  for (const auto& p : table.policies) {
    md << "| " << p << " |";
    for (int s : table.states) {
      const auto r = table.rate(p, s);
      md << ' ' << (r ? percent(*r) : std::string("error")) << " |";
    }
    const auto avg = table.average(p);
    md << ' ' << (avg ? percent(*avg) : std::string("error")) << " |\n";
  }
  const bool full_states = table.states == std::vector<int>{0, 1, 2, 3, 4, 5};
  if (include_reference && full_states) {
    for (const auto& ref : kReference) {
      md << "| " << ref.name << " (reference) |";
      for (int s = 0; s < 6; ++s) md << ' ' << percent(ref.rates[s] / 100.0) << " |";
      md << ' ' << percent(ref.average / 100.0) << " |\n";
    }
  }
  return md.str();
}

void render_report(const ResultsTable& table, const fs::path& dir) {
  if (table.empty() || table.policies.empty() || table.states.empty())
    throw Error(ErrorCode::InvalidConfig, "cannot render an empty results table");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + dir.string() + ": " + ec.message());

  std::ostringstream trials;
  trials << "policy,state,index,seed,outcome,steps,failure_category,log_ref\n";
  for (const auto& t : table.trials)
    trials << t.policy << ',' << t.state_id << ',' << t.index << ',' << t.seed << ',' << outcome_name(t.outcome) << ','
           << t.steps << ',' << (t.outcome == Outcome::Success ? "" : category_name(classify_failure(t))) << ','
           << t.log_ref << '\n';
  write_text_atomic(dir / "trials.csv", trials.str());

  std::ostringstream cells;
  cells << "policy,state,trials,successes,success_rate\n";
  for (const auto& p : table.policies)
    for (int s : table.states) {
      const auto r = table.rate(p, s);
      char rate[32] = "";
      if (r) std::snprintf(rate, sizeof(rate), "%.4f", *r);
      cells << p << ',' << s << ',' << table.count(p, s) << ',' << table.successes(p, s) << ',' << rate << '\n';
    }
  write_text_atomic(dir / "cells.csv", cells.str());

  std::ostringstream md;
  md << "# Success rate by cluster state\n\n"
     << table.trials_per_cell << " trials per cell; trial seeds are shared across policies.\n\n"
     << results_markdown(table, true);
  if (table.states == std::vector<int>{0, 1, 2, 3, 4, 5})
    md << "\nRows marked (reference) are the published real-robot results, shown for orientation only.\n";
  if (!table.cell_errors.empty()) {
    md << "\n## Errors\n\n";
    for (const auto& [cell, msg] : table.cell_errors) md << "- " << cell << ": " << msg << "\n";
  }
  write_text_atomic(dir / "results.md", md.str());

  nlohmann::json failures = nlohmann::json::object();
  for (const auto& p : table.policies) {
    nlohmann::json counts = nlohmann::json::object();
    int total = 0;
    for (const auto& [cat, n] : table.failure_counts(p)) {
      counts[category_name(cat)] = n;
      total += n;
    }
    int trials_run = 0;
    for (int s : table.states) trials_run += table.count(p, s);
    failures[p] = {{"categories", counts}, {"failures", total}, {"trials", trials_run},
                   {"fingerprint", table.fingerprints.count(p) ? table.fingerprints.at(p) : ""}};
  }
  write_text_atomic(dir / "failures.json", failures.dump(2) + "\n");
}

fs::path make_run_directory(const fs::path& parent, const nlohmann::json& config) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", &tm);
  const std::string hash = fingerprint(config);
  fs::path dir = parent / (std::string(stamp) + "_" + hash.substr(0, 8));
  for (int i = 1; fs::exists(dir); ++i) dir = parent / (std::string(stamp) + "_" + hash.substr(0, 8) + "_" + std::to_string(i));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + dir.string() + ": " + ec.message());
  write_text_atomic(dir / "fingerprint.json", nlohmann::json{{"hash", hash}, {"config", config}}.dump(2) + "\n");
  return dir;
}

// ---------------------------------------------------------------------------
// Camera ablation

namespace {

std::string camera_label(const std::vector<std::string>& cams) {
  std::string label;
  for (const auto& c : cams) {
    if (!label.empty()) label += "+";
    label += c == "wrist_up" ? "up" : c == "wrist_down" ? "down" : c;
  }
  return label;
}

}  // namespace

AblationReport camera_ablation(const PolicyConfig& base, const fs::path& dataset,
                               const std::vector<std::vector<std::string>>& cameras_list, const MatrixOptions& opts,
                               const fs::path& out, const TrainOptions& train_opts) {
  if (cameras_list.empty()) throw Error(ErrorCode::InvalidConfig, "no camera settings given");
  AblationReport report;
  for (const auto& cams : cameras_list) {
    std::vector<std::string> names;
    for (const auto& c : cams) names.push_back(camera_name(camera_from_name(c)));
    PolicyConfig cfg = base;
    cfg.cameras = names;
    cfg.validate();
    AblationSetting setting;
    setting.label = camera_label(names);
    setting.cameras = names;
    if (opts.log) opts.log("camera setting " + setting.label + ": training");
    const Checkpoint ckpt = train_policy(cfg, dataset, train_opts);
    const fs::path ckpt_dir = out / setting.label;
    save_checkpoint(ckpt, ckpt_dir);
    setting.parameters = count_parameters(cfg);
    setting.inference_ms = measure_inference_ms(Policy(ckpt), 3, 20);
    MatrixOptions mo = opts;
    if (!mo.cache_dir.empty()) mo.cache_dir /= setting.label;
    setting.table = run_matrix(std::vector<PolicySpec>{{variant_name(cfg.variant) + "[" + setting.label + "]", ckpt_dir}}, mo);
    report.settings.push_back(std::move(setting));
  }
  return report;
}

void write_ablation_report(const AblationReport& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream rates, cost;
  rates << "setting,state,success_rate\n";
  cost << "setting,cameras,parameters,inference_ms,average_success\n";
  for (const auto& s : report.settings) {
    const std::string policy = s.table.policies.empty() ? "" : s.table.policies.front();
    for (int st : s.table.states) {
      const auto r = s.table.rate(policy, st);
      char buf[32] = "";
      if (r) std::snprintf(buf, sizeof(buf), "%.4f", *r);
      rates << s.label << ',' << st << ',' << buf << '\n';
    }
    const auto avg = s.table.average(policy);
    char ms[32], av[32] = "";
    std::snprintf(ms, sizeof(ms), "%.3f", s.inference_ms);
    if (avg) std::snprintf(av, sizeof(av), "%.4f", *avg);
    std::string cams;
    for (const auto& c : s.cameras) cams += (cams.empty() ? "" : " ") + c;
    cost << s.label << ',' << cams << ',' << s.parameters << ',' << ms << ',' << av << '\n';
    if (!s.table.empty()) render_report(s.table, dir / s.label);
  }
  write_text_atomic(dir / "camera_success.csv", rates.str());
  write_text_atomic(dir / "camera_cost.csv", cost.str());
}

}  // namespace epact
