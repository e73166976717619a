#include <doctest.h>

#include <fstream>
#include <sstream>

#include "epact/errors.hpp"
#include "epact/evalharness.hpp"
#include "support.hpp"

using namespace epact;
using epact::testing::TempDir;

namespace {

// Outcome pattern driven by (policy, state, index) so expected rates are
// known in closed form: policy "a" succeeds on index < state, "b" never.
TrialResult scripted(const std::string& policy, int state, int index, std::uint64_t seed) {
  TrialResult r;
  r.outcome = policy == "a" && index < state ? Outcome::Success
              : index % 3 == 0             ? Outcome::WrongTarget
              : index % 3 == 1             ? Outcome::MultiPick
                                           : Outcome::Timeout;
  r.steps = 10 + index;
  r.seed = seed;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int lines(const std::string& s) { return int(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_SUITE("evalharness") {
  TEST_CASE("failure taxonomy") {
    TrialResult r;
    r.outcome = Outcome::WrongTarget;
    CHECK(classify_failure(r) == FailureCategory::TargetMisidentification);
    r.outcome = Outcome::MultiPick;
    CHECK(classify_failure(r) == FailureCategory::MultiPicking);
    r.outcome = Outcome::Timeout;
    CHECK(classify_failure(r) == FailureCategory::TrajectoryErrors);
    r.outcome = Outcome::Success;
    try {
      classify_failure(r);
      FAIL("expected SuccessNotAFailure");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::SuccessNotAFailure);
    }
  }

  TEST_CASE("trial seeds are paired across policies and distinct across cells") {
    CHECK(trial_seed(5, 2, 3) == trial_seed(5, 2, 3));
    CHECK(trial_seed(5, 2, 3) != trial_seed(5, 3, 2));
    CHECK(trial_seed(5, 2, 3) != trial_seed(6, 2, 3));
  }

  TEST_CASE("injected outcomes give exact rates and a full failure partition") {
    MatrixOptions o;
    o.trials_per_cell = 6;
    const ResultsTable t = run_matrix({"a", "b"}, scripted, o);
    CHECK(t.trials.size() == 2 * 6 * 6);
    for (int s = 0; s <= 5; ++s) {
      CHECK(t.count("a", s) == 6);
      CHECK(*t.rate("a", s) == doctest::Approx(s / 6.0));
      CHECK(*t.rate("b", s) == 0.0);
    }
    CHECK(*t.average("a") == doctest::Approx(15.0 / 36.0));
    for (const std::string p : {"a", "b"}) {
      const auto f = t.failure_counts(p);
      int failures = 0;
      for (const auto& r : t.trials)
        if (r.policy == p && r.outcome != Outcome::Success) ++failures;
      int sum = 0;
      for (const auto& [cat, n] : f) sum += n;
      CHECK(sum == failures);
    }
    const auto fb = t.failure_counts("b");
    CHECK(fb.at(FailureCategory::TargetMisidentification) == 12);
    CHECK(fb.at(FailureCategory::MultiPicking) == 12);
    CHECK(fb.at(FailureCategory::TrajectoryErrors) == 12);
    // Seeds depend only on (state, index).
    for (const auto& r : t.trials) CHECK(r.seed == trial_seed(o.base_seed, r.state_id, r.index));
  }

  TEST_CASE("errored cells are reported and skipped in the average") {
    MatrixOptions o;
    o.states = {1, 2};
    o.trials_per_cell = 2;
    const TrialRunner flaky = [](const std::string& p, int state, int index, std::uint64_t seed) {
      if (state == 2) throw Error(ErrorCode::IOFailure, "boom");
      return scripted(p, state, index, seed);
    };
    const ResultsTable t = run_matrix({"a"}, flaky, o);
    CHECK(t.cell_errors.count("a/2") == 1);
    CHECK_FALSE(t.rate("a", 2).has_value());
    CHECK(*t.average("a") == doctest::Approx(0.5));
  }

  TEST_CASE("cached cells are reused and keyed on the configuration") {
    TempDir dir("cache");
    MatrixOptions o;
    o.states = {0, 3};
    o.trials_per_cell = 3;
    o.cache_dir = dir.path();
    int calls = 0;
    const TrialRunner counting = [&](const std::string& p, int s, int i, std::uint64_t seed) {
      ++calls;
      return scripted(p, s, i, seed);
    };
    const ResultsTable first = run_matrix({"a"}, counting, o);
    CHECK(calls == 6);
    const ResultsTable second = run_matrix({"a"}, counting, o);
    CHECK(calls == 6);
    CHECK(second.trials == first.trials);
    o.base_seed = 1;
    run_matrix({"a"}, counting, o);
    CHECK(calls == 12);
  }

  TEST_CASE("report files") {
    TempDir dir("report");
    MatrixOptions o;
    o.trials_per_cell = 10;
    const ResultsTable t = run_matrix({"act", "epact_l", "epact_ee"}, scripted, o);
    render_report(t, dir.path());
    const std::string trials = slurp(dir / "trials.csv");
    CHECK(lines(trials) == 1 + 180);
    CHECK(trials.rfind("policy,state,index,seed,outcome,steps,failure_category,log_ref", 0) == 0);
    CHECK(lines(slurp(dir / "cells.csv")) == 1 + 18);
    const std::string md = slurp(dir / "results.md");
    CHECK(md.find("| Method | State0 | State1 | State2 | State3 | State4 | State5 | Avg. |") != std::string::npos);
    CHECK(md.find("(reference)") != std::string::npos);
    CHECK(md.find("71.7%") != std::string::npos);
    CHECK(md.find("35.0%") != std::string::npos);
    const auto failures = nlohmann::json::parse(slurp(dir / "failures.json"));
    CHECK(failures.contains("act"));
    CHECK_THROWS_AS(render_report(ResultsTable{}, dir / "empty"), Error);

    MatrixOptions partial;
    partial.states = {1, 2};
    partial.trials_per_cell = 1;
    const std::string md2 = results_markdown(run_matrix({"a"}, scripted, partial));
    CHECK(md2.find("(reference)") == std::string::npos);
  }

  TEST_CASE("run directories carry a fingerprint") {
    TempDir dir("runs");
    const nlohmann::json cfg{{"x", 1}};
    const auto run = make_run_directory(dir.path(), cfg);
    CHECK(std::filesystem::is_directory(run));
    CHECK(run.filename().string().size() > 9);
    CHECK(run.filename().string().substr(run.filename().string().size() - 8) == fingerprint(cfg).substr(0, 8));
    const auto fp = nlohmann::json::parse(slurp(run / "fingerprint.json"));
    CHECK(fp.at("config") == cfg);
    CHECK(fingerprint(cfg) != fingerprint(nlohmann::json{{"x", 2}}));
  }

  TEST_CASE("trial results serialize losslessly") {
    TrialResult r{"epact_ee", 4, 7, 123456789012345ull, Outcome::MultiPick, 88, "x/episode_000001"};
    CHECK(TrialResult::from_json(r.to_json()) == r);
  }
}
