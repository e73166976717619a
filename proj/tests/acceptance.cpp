// Acceptance checks, one per criterion. Each run prints a single verdict line
//
//   [PASS] criterion N: ...
//   [FAIL] criterion N: ...
//   [FLAG] criterion N: ...   (directional expectation not met; exit code 0)
//
// Artifacts go to <work>/criterionN, default ./acceptance_artifacts.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "epact/errors.hpp"
#include "epact/evalharness.hpp"
#include "epact/expert.hpp"
#include "epact/runtime.hpp"
#include "epact/teleop.hpp"
#include "epact/train.hpp"
#include "support.hpp"

using namespace epact;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

enum class Status { Pass, Fail, Flag };

struct Verdict {
  Status status;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

void progress(const std::string& line) {
  std::cout << "  " << line << std::endl;
}

fs::path fresh_dir(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Relative paths of every regular file under `root`, sorted.
std::vector<fs::path> tree(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

// First difference between two directory trees, empty when byte-identical.
// Files named in `skip` are compared by the caller.
std::string tree_difference(const fs::path& a, const fs::path& b, const std::vector<std::string>& skip = {}) {
  const auto ta = tree(a), tb = tree(b);
  if (ta != tb) return "file lists differ";
  for (const auto& rel : ta) {
    if (std::find(skip.begin(), skip.end(), rel.filename().string()) != skip.end()) continue;
    if (slurp(a / rel) != slurp(b / rel)) return rel.string() + " differs";
  }
  return {};
}

// ---------------------------------------------------------------- 1

Verdict kinematics_roundtrip(const fs::path&) {
  const auto t0 = Clock::now();
  const ScaraParams p;
  Rng rng(20240601);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const JointState q{uniform(rng, p.theta1_range.lo, p.theta1_range.hi),
                       uniform(rng, p.theta2_range.lo, p.theta2_range.hi),
                       uniform(rng, p.d3_range.lo, p.d3_range.hi),
                       uniform(rng, p.theta4_range.lo, p.theta4_range.hi)};
    const EndPose pose = forward_kinematics(q, p);
    const JointState s = inverse_kinematics(pose, p, elbow_of(q));
    const EndPose back = forward_kinematics(s, p);
    worst = std::max(worst, (back.position() - pose.position()).cwiseAbs().maxCoeff());
    worst = std::max(worst, std::abs(wrap_angle(back.yaw - pose.yaw)));
    worst = std::max(worst, (s.vector() - q.vector()).head<3>().cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  const bool ok = worst < 1e-9 && secs < 10.0;
  return {ok ? Status::Pass : Status::Fail,
          fmt("FK/IK roundtrip over 10000 samples, max error %.3e (< 1e-9), %.2f s (< 10 s)", worst, secs)};
}

// ---------------------------------------------------------------- 2

const Variant kVariants[] = {Variant::Act, Variant::EpactL, Variant::EpactEE};

Verdict loss_formula(const fs::path&) {
  double worst = 0.0;
  bool gamma_zero_exact = true;
  std::string why;
  for (Variant v : kVariants) {
    PolicyConfig c = testing::miniature_config(v);
    c.beta = 10.0;
    c.gamma = 0.7;
    nn::ParamSet<double> p;
    const PolicyNet net = PolicyNet::create(c, 11, p);
    double sum_total = 0.0, sum_rec = 0.0, sum_reg = 0.0, sum_ep = 0.0;
    for (int b = 0; b < 8; ++b) {
      const auto s = testing::synthetic_sample<double>(c, 100 + b);
      const LossBreakdown l = net.loss_and_grad<double>(p, s.input, s.target, s.eps, nullptr);
      const double ep = v == Variant::Act ? 0.0 : c.gamma * l.rec_end_pose;
      worst = std::max(worst, std::abs(l.total - (l.rec_action + c.beta * l.reg + ep)));
      sum_total += l.total;
      sum_rec += l.rec_action;
      sum_reg += l.reg;
      sum_ep += ep;
    }
    worst = std::max(worst, std::abs(sum_total / 8 - (sum_rec / 8 + c.beta * sum_reg / 8 + sum_ep / 8)));

    if (v == Variant::Act) continue;
    // With gamma = 0 the objective and its gradient match the plain
    // reconstruction-plus-KL objective with the end-pose term switched off.
    PolicyConfig c0 = c;
    c0.gamma = 0.0;
    const PolicyNet net0(c0);
    for (int b = 0; b < 4; ++b) {
      const auto s = testing::synthetic_sample<double>(c0, 200 + b);
      auto g0 = p.zeros_like(), g_plain = p.zeros_like();
      const LossBreakdown l0 = net0.loss_and_grad<double>(p, s.input, s.target, s.eps, &g0);
      net.loss_and_grad<double>(p, s.input, s.target, s.eps, &g_plain, 1.0, LossTerms{true, true, false});
      if (l0.total != l0.rec_action + c0.beta * l0.reg) {
        gamma_zero_exact = false;
        why = variant_name(v) + " total";
      }
      for (std::size_t i = 0; i < p.size(); ++i)
        if (!(g0[i] == g_plain[i])) {
          gamma_zero_exact = false;
          why = variant_name(v) + " gradient of " + p.name(i);
        }
    }
  }
  const bool ok = worst <= 1e-12 && gamma_zero_exact;
  return {ok ? Status::Pass : Status::Fail,
          fmt("total vs rec + beta*reg + gamma*ep max deviation %.3e (<= 1e-12); gamma=0 exact: %s%s", worst,
              gamma_zero_exact ? "yes" : "no", why.empty() ? "" : (" (" + why + ")").c_str())};
}

// ---------------------------------------------------------------- 3

Verdict gradient_check(const fs::path&) {
  const auto t0 = Clock::now();
  constexpr int kChecks = 20;
  constexpr double h = 1e-5;
  int passed = 0, total = 0, floored = 0;
  double worst_rel = 0.0;
  std::string first_failure;
  for (Variant v : kVariants) {
    const PolicyConfig c = testing::miniature_config(v);
    nn::ParamSet<double> p;
    const PolicyNet net = PolicyNet::create(c, 13, p);
    const auto s = testing::synthetic_sample<double>(c, 13);
    auto g = p.zeros_like();
    net.loss_and_grad<double>(p, s.input, s.target, s.eps, &g);
    auto f = [&] { return net.loss_and_grad<double>(p, s.input, s.target, s.eps, nullptr).total; };

    Rng rng(derive_seed(3, {std::uint64_t(v)}));
    std::set<std::pair<std::size_t, Eigen::Index>> picked;
    while (int(picked.size()) < kChecks) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(rng);
      const Eigen::Index e = std::uniform_int_distribution<Eigen::Index>(0, p[i].size() - 1)(rng);
      picked.emplace(i, e);
    }
    for (const auto& [i, e] : picked) {
      const double x = p.element(i, e);
      double fv[4];
      const double offs[4] = {2 * h, h, -h, -2 * h};
      for (int k = 0; k < 4; ++k) {
        p.element(i, e) = x + offs[k];
        fv[k] = f();
      }
      p.element(i, e) = x;
      const double numeric = (-fv[0] + 8 * fv[1] - 8 * fv[2] + fv[3]) / (12 * h);
      const double analytic = g.element(i, e);
      const double diff = std::abs(analytic - numeric);
      const double rel = diff / std::max({std::abs(analytic), std::abs(numeric), 1e-300});
      const bool ok = rel < 1e-4 || diff < 1e-8;
      ++total;
      if (ok) {
        ++passed;
        if (rel >= 1e-4) ++floored;
        else worst_rel = std::max(worst_rel, rel);
      } else if (first_failure.empty()) {
        first_failure = fmt(" first failure %s %s[%ld] analytic %.6e numeric %.6e", variant_name(v).c_str(),
                            p.name(i).c_str(), long(e), analytic, numeric);
      }
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = passed == total && secs < 120.0;
  return {ok ? Status::Pass : Status::Fail,
          fmt("%d/%d parameters agree with finite differences (worst rel %.2e, %d under the 1e-8 absolute floor), "
              "%.1f s (< 120 s)%s",
              passed, total, worst_rel, floored, secs, first_failure.c_str())};
}

// ---------------------------------------------------------------- 4

// Averages the newest `capacity` chunks covering t with weights exp(-m * i),
// i = 0 for the oldest.
Eigen::VectorXd brute_force(const std::vector<std::pair<int, Eigen::MatrixXd>>& pushed, int t, int capacity,
                            double m) {
  std::vector<Eigen::VectorXd> rows;
  for (const auto& [birth, chunk] : pushed)
    if (t - birth >= 0 && t - birth < chunk.rows()) rows.push_back(chunk.row(t - birth).transpose());
  const std::size_t first = rows.size() > std::size_t(capacity) ? rows.size() - capacity : 0;
  Eigen::VectorXd num = Eigen::VectorXd::Zero(rows.front().size());
  double den = 0.0;
  for (std::size_t i = first; i < rows.size(); ++i) {
    const double w = std::exp(-m * double(i - first));
    num += w * rows[i];
    den += w;
  }
  return num / den;
}

Verdict ensemble_oracle(const fs::path&) {
  Rng rng(404);
  double worst = 0.0;
  for (int b = 0; b < 1000; ++b) {
    const int k = std::uniform_int_distribution<int>(1, 12)(rng);
    const int capacity = std::uniform_int_distribution<int>(1, k + 2)(rng);
    const double m = uniform(rng, 0.0, 0.5);
    const int dims = std::uniform_int_distribution<int>(1, 6)(rng);
    const int steps = std::uniform_int_distribution<int>(1, 30)(rng);
    EnsembleBuffer buf(capacity, m);
    std::vector<std::pair<int, Eigen::MatrixXd>> pushed;
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int t = 0; t < steps; ++t) {
      Eigen::MatrixXd chunk(k, dims);
      for (Eigen::Index i = 0; i < chunk.size(); ++i) chunk.data()[i] = u(rng);
      pushed.emplace_back(t, chunk);
      const Eigen::VectorXd got = ensemble_step(buf, chunk, t);
      worst = std::max(worst, (got - brute_force(pushed, t, capacity, m)).cwiseAbs().maxCoeff());
    }
  }
  EnsembleBuffer two(50, 0.01);
  ensemble_step(two, Eigen::MatrixXd::Zero(2, 1), 0);
  const double example = ensemble_step(two, Eigen::MatrixXd::Ones(2, 1), 1)(0);
  const bool ok = worst <= 1e-12 && std::abs(example - 0.49750) <= 1e-5;
  return {ok ? Status::Pass : Status::Fail,
          fmt("1000 random buffers, max deviation %.3e (<= 1e-12); two-chunk example %.5f (0.49750 +/- 1e-5)", worst,
              example)};
}

// ---------------------------------------------------------------- 5

Verdict expert_solvability(const fs::path&) {
  const auto t0 = Clock::now();
  SimParams sim;
  sim.image_width = sim.image_height = 32;
  Env env(sim);
  int success = 0, total = 0;
  std::string per_state;
  for (int state = 0; state <= 5; ++state) {
    int ok = 0;
    for (int i = 0; i < 10; ++i) {
      const std::uint64_t seed = derive_seed(555, {std::uint64_t(state), std::uint64_t(i)});
      env.reset(state, seed);
      try {
        const DemoPlan plan = plan_demo(env.scene(), env.q(), sim, derive_seed(seed, {7}));
        ok += execute_plan(env, plan).meta.outcome == Outcome::Success;
      } catch (const Error& e) {
        progress(fmt("state %d trial %d: %s", state, i, e.what()));
      }
    }
    success += ok;
    total += 10;
    per_state += fmt("%s%d:%d/10", state ? " " : "", state, ok);
  }
  const double secs = seconds_since(t0);
  const double rate = double(success) / total;
  const bool ok = rate >= 0.9 && secs < 300.0;
  return {ok ? Status::Pass : Status::Fail,
          fmt("scripted expert %d/%d = %.1f%% (>= 90%%) [%s], %.1f s (< 300 s)", success, total, 100 * rate,
              per_state.c_str(), secs)};
}

// ---------------------------------------------------------------- 6

PolicyConfig overfit_config(Variant v) {
  PolicyConfig c;
  c.variant = v;
  c.image_width = c.image_height = 64;
  c.width = 64;
  c.ffn_dim = 128;
  c.lr = 2e-3;
  c.batch = 16;
  c.steps = 2000;
  c.warmup_steps = 100;
  c.n_val = 0;
  c.log_every = 500;
  return c;
}

// Mean normalized action L1 over every timestep of every training episode,
// with the latent at the posterior mean.
double action_l1(const Checkpoint& ck, const TrainingData& data) {
  const PolicyConfig& c = ck.config;
  const PolicyNet net(c);
  double sum = 0.0;
  int n = 0;
  for (const auto& ep : data.train)
    for (int t = 0; t < ep.length(); ++t) {
      const ChunkSample cs = sample_chunk(ep, t, c.chunk, c.cameras, data.stats, {});
      const ChunkTarget<float> target{cs.action_chunk.cast<float>(), cs.end_pose_chunk.cast<float>(), cs.pad_mask};
      sum += net.loss_and_grad<float>(ck.params, make_input<float>(cs.images, cs.q, c), target,
                                      nn::RowVec<float>::Zero(c.latent_dim), nullptr)
                 .rec_action;
      ++n;
    }
  return sum / n;
}

Verdict overfit_replay(const fs::path& work) {
  const fs::path data = fresh_dir(work / "data");
  SimParams sim;
  sim.image_width = sim.image_height = 64;
  collect_demos(5, {1, 2, 3, 4, 5}, 7, data, sim);
  bool ok = true;
  std::string detail;
  for (Variant v : kVariants) {
    const auto t0 = Clock::now();
    const PolicyConfig c = overfit_config(v);
    const TrainingData td = load_training_data(c, data);
    TrainOptions opts;
    opts.on_log = [&](const LossRow& r) {
      progress(fmt("%s step %d rec_action %.4f total %.4f", variant_name(v).c_str(), r.step, r.train.rec_action,
                   r.train.total));
    };
    const Checkpoint ck = train_policy(c, td, opts);
    save_checkpoint(ck, work / variant_name(v));
    const double l1 = action_l1(ck, td);
    const Policy policy(ck);
    double rms = 0.0;
    for (const auto& ep : td.train) rms = std::max(rms, replay_open_loop(policy, ep, sim.arm).position_rms);
    const bool v_ok = l1 < 0.05 && rms < 0.02;
    ok = ok && v_ok;
    progress(fmt("%s: action L1 %.4f, worst replay RMS %.4f m, %.0f s", variant_name(v).c_str(), l1, rms,
                 seconds_since(t0)));
    detail += fmt("%s%s L1 %.4f RMS %.2f cm", detail.empty() ? "" : "; ", variant_name(v).c_str(), l1, 100 * rms);
  }
  return {ok ? Status::Pass : Status::Fail,
          "5 demos, 2000 steps (L1 < 0.05, replay RMS < 2 cm over all 5 demos): " + detail};
}

// ---------------------------------------------------------------- 7

Verdict desk_scale(const fs::path& work) {
  const auto t0 = Clock::now();
  SimParams sim;
  sim.image_width = sim.image_height = 64;
  const fs::path data = work / "data";
  if (!fs::exists(data / "collect_summary.json")) {
    fresh_dir(data);
    const CollectSummary cs = collect_demos(200, {1, 2, 3, 4, 5}, 1, data, sim);
    std::ofstream(data / "collect_summary.json") << cs.to_json().dump(2);
  }
  progress(fmt("dataset ready, %.0f s", seconds_since(t0)));

  std::vector<PolicySpec> specs;
  json config = {{"demos", 200}, {"states", "1-5"}, {"collect_seed", 1}, {"image", 64}};
  for (Variant v : kVariants) {
    PolicyConfig c = overfit_config(v);
    c.lr = 1e-3;
    c.steps = 3000;
    c.log_every = 500;
    const fs::path ckdir = work / "checkpoints" / variant_name(v);
    fs::remove_all(ckdir);
    TrainOptions opts;
    opts.on_log = [&](const LossRow& r) {
      progress(fmt("%s step %d total %.4f val %.4f", variant_name(v).c_str(), r.step, r.train.total, r.val_total));
    };
    save_checkpoint(train_policy(c, data, opts), ckdir);
    specs.push_back({variant_name(v), ckdir});
    config["train"][variant_name(v)] = c.to_json();
  }
  progress(fmt("training done, %.0f s", seconds_since(t0)));

  MatrixOptions mo;
  mo.trials_per_cell = 10;
  mo.base_seed = 2026;
  mo.sim = sim;
  mo.log = progress;
  config["eval"] = {{"trials", 10}, {"states", "0-5"}, {"seed", mo.base_seed}};
  const fs::path run = make_run_directory(work / "reports", config);
  mo.cache_dir = run / "cache";
  const ResultsTable table = run_matrix(specs, mo);
  render_report(table, run);
  std::cout << results_markdown(table) << std::flush;

  if (!table.cell_errors.empty()) return {Status::Fail, fmt("%zu evaluation cells errored", table.cell_errors.size())};
  // Paired seeds: every policy saw the same seed in each (state, index).
  std::map<std::pair<int, int>, std::uint64_t> seeds;
  bool paired = true;
  for (const auto& r : table.trials) {
    const auto [it, fresh] = seeds.emplace(std::make_pair(r.state_id, r.index), r.seed);
    paired = paired && it->second == r.seed;
  }
  if (!paired || table.trials.size() != 180) return {Status::Fail, "trials are not paired across policies"};
  const double act = table.average("act").value_or(0.0), ee = table.average("epact_ee").value_or(0.0),
               l = table.average("epact_l").value_or(0.0);
  const std::string summary = fmt("report at %s; averages act %.1f%%, epact_l %.1f%%, epact_ee %.1f%%, %.0f min",
                                  run.string().c_str(), 100 * act, 100 * l, 100 * ee, seconds_since(t0) / 60);
  if (ee >= act) return {Status::Pass, summary + "; epact_ee >= act"};
  return {Status::Flag, summary + "; ordering epact_ee >= act not observed"};
}

// ---------------------------------------------------------------- 8

Verdict head_decoupling(const fs::path&) {
  struct Case {
    Variant v;
    Fusion fusion;
  };
  double ee_max = 0.0, l_min = std::numeric_limits<double>::infinity();
  std::size_t ee_count = 0;
  for (const Case k : {Case{Variant::EpactEE, Fusion::Concat}, Case{Variant::EpactL, Fusion::Concat},
                       Case{Variant::EpactL, Fusion::Add}}) {
    PolicyConfig c = testing::miniature_config(k.v);
    c.fusion = k.fusion;
    nn::ParamSet<double> p;
    const PolicyNet net = PolicyNet::create(c, 17, p);
    const auto branch = net.gripper_branch_parameters();
    if (branch.empty()) return {Status::Fail, variant_name(k.v) + " reports no gripper-branch parameters"};
    for (int s = 0; s < 3; ++s) {
      const auto sample = testing::synthetic_sample<double>(c, 300 + s);
      auto g = p.zeros_like();
      net.loss_and_grad<double>(p, sample.input, sample.target, sample.eps, &g, 1.0, LossTerms{false, false, true});
      double largest = 0.0;
      for (std::size_t i : branch) largest = std::max(largest, g[i].cwiseAbs().maxCoeff());
      if (k.v == Variant::EpactEE) {
        ee_max = std::max(ee_max, largest);
        ee_count = branch.size();
      } else {
        l_min = std::min(l_min, largest);
      }
    }
  }
  const bool ok = ee_max == 0.0 && l_min > 0.0;
  return {ok ? Status::Pass : Status::Fail,
          fmt("end-pose loss gradient on gripper branch: epact_ee max |g| = %g over %zu tensors (== 0), epact_l "
              "min over samples of max |g| = %.3e (> 0)",
              ee_max, ee_count, l_min)};
}

// ---------------------------------------------------------------- 9

// Policy p succeeds on index < state + p (capped at 10); failures cycle
// through the three outcomes by index.
Outcome injected(int policy, int state, int index) {
  if (index < std::min(10, state + policy)) return Outcome::Success;
  const Outcome cycle[] = {Outcome::WrongTarget, Outcome::MultiPick, Outcome::Timeout};
  return cycle[index % 3];
}

Verdict reporting_fidelity(const fs::path& work) {
  const std::vector<std::string> names{"p0", "p1", "p2"};
  MatrixOptions o;
  o.trials_per_cell = 10;
  const ResultsTable t = run_matrix(
      names,
      [](const std::string& p, int state, int index, std::uint64_t seed) {
        TrialResult r;
        r.outcome = injected(p[1] - '0', state, index);
        r.steps = 1;
        r.seed = seed;
        return r;
      },
      o);
  bool rates_ok = true, partition_ok = true;
  for (int pi = 0; pi < 3; ++pi) {
    std::map<FailureCategory, int> expected;
    for (int s = 0; s <= 5; ++s) {
      int succ = 0;
      for (int i = 0; i < 10; ++i) {
        const Outcome out = injected(pi, s, i);
        if (out == Outcome::Success) ++succ;
        else ++expected[out == Outcome::WrongTarget ? FailureCategory::TargetMisidentification
                        : out == Outcome::MultiPick ? FailureCategory::MultiPicking
                                                    : FailureCategory::TrajectoryErrors];
      }
      rates_ok = rates_ok && t.rate(names[pi], s) == double(succ) / 10.0;
    }
    auto got = t.failure_counts(names[pi]);
    for (auto it = got.begin(); it != got.end();) it = it->second == 0 ? got.erase(it) : std::next(it);
    partition_ok = partition_ok && got == expected;
  }

  // Camera ablation on a tiny model: parameter counts and latency only.
  const fs::path data = fresh_dir(work / "data");
  SimParams sim;
  sim.image_width = sim.image_height = 24;
  collect_demos(2, {1}, 9, data, sim);
  PolicyConfig base = testing::miniature_config(Variant::EpactEE);
  base.image_width = base.image_height = 24;
  base.steps = 3;
  base.batch = 2;
  base.n_val = 0;
  MatrixOptions ao;
  ao.states = {1};
  ao.trials_per_cell = 1;
  ao.sim = sim;
  ao.sim.max_steps = 10;
  const AblationReport rep =
      camera_ablation(base, data, {{"wrist_up"}, {"wrist_down"}, {"wrist_up", "wrist_down"}}, ao, work / "ckpt");
  write_ablation_report(rep, work / "ablation");
  std::size_t one_max = 0, two = 0;
  bool latency_ok = true;
  std::string costs;
  for (const auto& s : rep.settings) {
    (s.cameras.size() == 2 ? two : one_max) = std::max(s.cameras.size() == 2 ? two : one_max, s.parameters);
    latency_ok = latency_ok && std::isfinite(s.inference_ms) && s.inference_ms > 0.0;
    costs += fmt("%s%s %zu params %.2f ms", costs.empty() ? "" : ", ", s.label.c_str(), s.parameters, s.inference_ms);
  }
  const bool files = fs::exists(work / "ablation" / "camera_cost.csv") && fs::exists(work / "ablation" / "camera_success.csv");
  const bool ok = rates_ok && partition_ok && two > one_max && latency_ok && files;
  return {ok ? Status::Pass : Status::Fail,
          fmt("injected rates exact: %s; failure partition exact: %s; ablation %s",
              rates_ok ? "yes" : "no", partition_ok ? "yes" : "no", costs.c_str())};
}

// ---------------------------------------------------------------- 10

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + EPACT_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  progress("epact " + args);
  return std::system(cmd.c_str());
}

Verdict determinism(const fs::path& work) {
  fresh_dir(work);
  const std::string common =
      "--set sim.image_width=32 --set sim.image_height=32 --set sim.max_steps=60 --set policy.width=32 "
      "--set policy.ffn_dim=64 --set policy.chunk=10 --set policy.latent_dim=8 --set policy.backbone=8,16 "
      "--set train.log_every=5 ";
  std::vector<std::string> failures;
  for (const char* run : {"a", "b"}) {
    const fs::path d = work / run;
    if (run_cli(common + "collect --episodes 4 --states 1-2 --seed 5 --out \"" + (d / "data").string() + "\"",
                work / (std::string(run) + "_collect.log")) != 0)
      failures.push_back(std::string("collect ") + run);
  }
  if (!failures.empty()) return {Status::Fail, "CLI failed: " + failures.front()};
  const std::string data_diff = tree_difference(work / "a" / "data", work / "b" / "data");

  // Both trainings read the same dataset so checkpoint metadata matches.
  for (const char* run : {"a", "b"})
    if (run_cli(common + "train --variant epact_ee --steps 30 --batch 4 --lr 1e-3 --seed 2 --data \"" +
                    (work / "a" / "data").string() + "\" --out \"" + (work / run / "ckpt").string() + "\"",
                work / (std::string(run) + "_train.log")) != 0)
      return {Status::Fail, std::string("CLI failed: train ") + run};
  const std::string ckpt_diff = tree_difference(work / "a" / "ckpt", work / "b" / "ckpt", {"loss_log.csv"});
  const auto la = read_loss_log(work / "a" / "ckpt" / "loss_log.csv");
  const auto lb = read_loss_log(work / "b" / "ckpt" / "loss_log.csv");
  double loss_rel = la.size() == lb.size() && !la.empty() ? 0.0 : 1.0;
  for (std::size_t i = 0; i < std::min(la.size(), lb.size()); ++i) {
    const double a = la[i].train.total, b = lb[i].train.total;
    loss_rel = std::max(loss_rel, std::abs(a - b) / std::max(std::abs(a), 1e-12));
  }

  for (const char* run : {"a", "b"})
    if (run_cli(common + "eval --ckpt ee=\"" + (work / "a" / "ckpt").string() + "\" --states 1,2 --trials 2 --seed 8 " +
                    "--report \"" + (work / run / "report").string() + "\"",
                work / (std::string(run) + "_eval.log")) != 0)
      return {Status::Fail, std::string("CLI failed: eval ") + run};
  auto only_run = [](const fs::path& parent) {
    for (const auto& e : fs::directory_iterator(parent))
      if (e.is_directory()) return e.path();
    return parent;
  };
  const fs::path ra = only_run(work / "a" / "report"), rb = only_run(work / "b" / "report");
  std::string eval_diff = ra.filename().string().substr(16) == rb.filename().string().substr(16)
                              ? tree_difference(ra, rb)
                              : "run fingerprints differ";

  const bool ok = data_diff.empty() && ckpt_diff.empty() && loss_rel <= 1e-5 && eval_diff.empty();
  auto said = [](const std::string& d) { return d.empty() ? std::string("identical") : d; };
  return {ok ? Status::Pass : Status::Fail,
          fmt("collect: %s; train: %s, loss curve max rel diff %.2e (<= 1e-5); eval: %s", said(data_diff).c_str(),
              said(ckpt_diff).c_str(), loss_rel, said(eval_diff).c_str())};
}

// ---------------------------------------------------------------- 11

Verdict teleop_end_to_end(const fs::path& work) {
  namespace net = boost::asio;
  namespace ws = boost::beast::websocket;
  fresh_dir(work);
  TeleopOptions opts;
  opts.sim.max_steps = 900;
  opts.stream_fps = 15.0;
  opts.data_dir = work / "teleop_data";
  TeleopServer server(opts, 0);
  std::thread loop([&] { server.run(); });

  net::io_context ioc;
  net::ip::tcp::resolver resolver(ioc);
  ws::stream<net::ip::tcp::socket> client(ioc);
  net::connect(client.next_layer(), resolver.resolve("127.0.0.1", std::to_string(server.port())));
  client.handshake("127.0.0.1", "/");
  boost::beast::flat_buffer buf;
  auto next = [&] {
    buf.clear();
    client.read(buf);
    return json::parse(boost::beast::buffers_to_string(buf.data()));
  };
  auto send = [&](const json& m) { client.write(net::buffer(m.dump())); };

  constexpr std::uint64_t kSeed = 4;
  send({{"type", "reset"}, {"state", 1}, {"seed", kSeed}});
  json obs;
  do obs = next();
  while (obs["type"] != "obs");
  // The client plans from its own copy of the scene and steers with joint
  // velocity commands, one per received observation.
  const Scene scene = make_scene(1, kSeed, opts.sim.table);
  const JointState q0 = JointState::from(Vec4(obs["q"][0], obs["q"][1], obs["q"][2], obs["q"][3]));
  const std::vector<Action> plan = interpolate_plan(plan_demo(scene, q0, opts.sim, 1), opts.sim);
  send({{"type", "record"}, {"action", "start"}});

  std::vector<Clock::time_point> stamps;
  json saved;
  bool stopping = false;
  const auto deadline = Clock::now() + std::chrono::seconds(60);
  while (!saved.contains("episode") && Clock::now() < deadline) {
    const json m = next();
    if (m["type"] == "error") progress("server error: " + m["msg"].get<std::string>());
    if (m["type"] == "status" && m.contains("episode")) saved = m;
    if (m["type"] != "obs" || stopping) continue;
    stamps.push_back(Clock::now());
    const int t = m["t"];
    if (m["done"].get<bool>()) {
      send({{"type", "record"}, {"action", "stop"}});
      stopping = true;
      continue;
    }
    // Observations arrive every second tick, so aim two steps ahead.
    const std::size_t target = std::min<std::size_t>(std::size_t(t) + 1, plan.size() - 1);
    Vec4 dq = Vec4::Zero();
    double grip = plan.back().grip;
    if (std::size_t(t) + 1 < plan.size()) {
      const Vec4 q(m["q"][0], m["q"][1], m["q"][2], m["q"][3]);
      dq = (plan[target].joints.vector() - q) / 2.0;
      dq(3) = wrap_angle(plan[target].joints.theta4 - q(3)) / 2.0;
      grip = plan[target].grip;
    }
    send({{"type", "cmd"}, {"dq", {dq(0), dq(1), dq(2), dq(3)}}, {"grip", grip}});
  }
  client.close(ws::close_code::normal);
  server.stop();
  loop.join();

  if (!saved.contains("episode")) return {Status::Fail, "no episode was kept within 60 s"};
  const double hz = stamps.size() > 2 ? double(stamps.size() - 1) /
                                            std::chrono::duration<double>(stamps.back() - stamps.front()).count()
                                      : 0.0;
  const EpisodeRecord rec = read_episode(opts.data_dir, saved["episode"].get<int>());
  std::string valid = "valid";
  try {
    rec.validate();
  } catch (const Error& e) {
    valid = e.what();
  }
  PolicyConfig c = testing::miniature_config(Variant::EpactEE);
  c.image_width = opts.sim.image_width;
  c.image_height = opts.sim.image_height;
  c.steps = 3;
  c.batch = 2;
  c.n_val = 0;
  std::string trained = "accepted";
  try {
    train_policy(c, opts.data_dir);
  } catch (const Error& e) {
    trained = e.what();
  }
  const bool ok = valid == "valid" && trained == "accepted" && rec.meta.source == EpisodeSource::Teleop &&
                  rec.meta.outcome == Outcome::Success && std::abs(hz - 15.0) <= 1.5;
  return {ok ? Status::Pass : Status::Fail,
          fmt("kept episode %d: %d steps, outcome %s, schema %s, train %s; observation stream %.2f Hz (15 +/- 1.5)",
              saved["episode"].get<int>(), rec.length(), outcome_name(rec.meta.outcome).c_str(), valid.c_str(),
              trained.c_str(), hz)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EPACT acceptance checks"};
  int criterion = 0;
  fs::path work = "acceptance_artifacts";
  app.add_option("--criterion", criterion, "Criterion number")->required()->check(CLI::Range(1, 11));
  app.add_option("--work", work, "Artifact directory");
  CLI11_PARSE(app, argc, argv);

  using Fn = Verdict (*)(const fs::path&);
  const Fn checks[] = {kinematics_roundtrip, loss_formula,    gradient_check,     ensemble_oracle,
                       expert_solvability,   overfit_replay,  desk_scale,         head_decoupling,
                       reporting_fidelity,   determinism,     teleop_end_to_end};
  Verdict v{Status::Fail, ""};
  try {
    v = checks[criterion - 1](fs::absolute(work) / ("criterion" + std::to_string(criterion)));
  } catch (const std::exception& e) {
    v = {Status::Fail, std::string("exception: ") + e.what()};
  }
  const char* tag = v.status == Status::Pass ? "[PASS]" : v.status == Status::Flag ? "[FLAG]" : "[FAIL]";
  std::cout << tag << " criterion " << criterion << ": " << v.detail << std::endl;
  return v.status == Status::Fail ? 1 : 0;
}
