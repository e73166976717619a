#include "epact/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "epact/errors.hpp"

namespace epact {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& why) {
  throw Error(ErrorCode::InvalidConfig, key + " = '" + value + "': " + why);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

long long to_integer(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) bad_value(key, text, "not an integer");
  return v;
}

double to_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) bad_value(key, text, "not a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, text, "not a number");
  }
}

bool to_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "1" || t == "true" || t == "on" || t == "yes") return true;
  if (t == "0" || t == "false" || t == "off" || t == "no") return false;
  bad_value(key, text, "not a boolean");
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream s;
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
  return s.str();
}

struct Binding {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Helpers that bind a member reached through `field` to a text codec.
template <typename F>
Binding int_key(F field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = int(to_integer(k, v)); },
          [field](const RunConfig& c) { return std::to_string(field(c)); }};
}

template <typename F>
Binding seed_key(F field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) {
            const long long s = to_integer(k, v);
            if (s < 0) bad_value(k, v, "seed must be >= 0");
            field(c) = std::uint64_t(s);
          },
          [field](const RunConfig& c) { return std::to_string(field(c)); }};
}

template <typename F>
Binding real_key(F field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = to_double(k, v); },
          [field](const RunConfig& c) { return fmt(field(c)); }};
}

template <typename F>
Binding bool_key(F field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = to_bool(k, v); },
          [field](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); }};
}

template <typename F>
Binding list_key(F field) {
  return {[field](RunConfig& c, const std::string&, const std::string& v) { field(c) = parse_int_list(v); },
          [field](const RunConfig& c) { return format_int_list(field(c)); }};
}

#define FIELD(expr) [](auto& c) -> auto& { return c.expr; }

const std::map<std::string, Binding>& bindings() {
  static const std::map<std::string, Binding> table = [] {
    std::map<std::string, Binding> b;
    b["sim.relax"] = real_key(FIELD(sim.relax));
    b["sim.capture_radius"] = real_key(FIELD(sim.capture_radius));
    b["sim.detach_distance"] = real_key(FIELD(sim.detach_distance));
    b["sim.grip_close"] = real_key(FIELD(sim.grip_close));
    b["sim.rate_revolute"] = real_key(FIELD(sim.rate_revolute));
    b["sim.rate_prismatic"] = real_key(FIELD(sim.rate_prismatic));
    b["sim.rate_grip"] = real_key(FIELD(sim.rate_grip));
    b["sim.max_steps"] = int_key(FIELD(sim.max_steps));
    b["sim.fps"] = real_key(FIELD(sim.fps));
    b["sim.image_width"] = int_key(FIELD(sim.image_width));
    b["sim.image_height"] = int_key(FIELD(sim.image_height));
    b["sim.home_distance_min"] = real_key(FIELD(sim.home_distance_min));
    b["sim.home_distance_max"] = real_key(FIELD(sim.home_distance_max));
    b["sim.approach_cone"] = real_key(FIELD(sim.approach_cone));
    b["sim.scene_file"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                             c.scene_file = trim(v);
                             c.sim.table = c.scene_file.empty() ? SceneTable::defaults() : SceneTable::load(c.scene_file);
                           },
                           [](const RunConfig& c) { return c.scene_file; }};

    b["expert.pregrasp_distance"] = real_key(FIELD(expert.pregrasp_distance));
    b["expert.detour_distance"] = real_key(FIELD(expert.detour_distance));
    b["expert.push_threshold"] = real_key(FIELD(expert.push_threshold));
    b["expert.waypoint_noise"] = real_key(FIELD(expert.waypoint_noise));
    b["expert.seconds_per_meter"] = real_key(FIELD(expert.seconds_per_meter));
    b["expert.settle_steps"] = int_key(FIELD(expert.settle_steps));
    b["expert.close_steps"] = int_key(FIELD(expert.close_steps));
    b["expert.pull_distance"] = real_key(FIELD(expert.pull_distance));

    b["policy.variant"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.policy.variant = variant_from_name(trim(v)); },
                           [](const RunConfig& c) { return variant_name(c.policy.variant); }};
    b["policy.cameras"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.policy.cameras = parse_cameras(v); },
                           [](const RunConfig& c) { return join(c.policy.cameras); }};
    b["policy.fusion"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.policy.fusion = fusion_from_name(trim(v)); },
                          [](const RunConfig& c) { return fusion_name(c.policy.fusion); }};
    b["policy.backbone"] = list_key(FIELD(policy.backbone));
    b["policy.chunk"] = int_key(FIELD(policy.chunk));
    b["policy.latent_dim"] = int_key(FIELD(policy.latent_dim));
    b["policy.width"] = int_key(FIELD(policy.width));
    b["policy.encoder_layers"] = int_key(FIELD(policy.encoder_layers));
    b["policy.decoder_layers"] = int_key(FIELD(policy.decoder_layers));
    b["policy.cvae_layers"] = int_key(FIELD(policy.cvae_layers));
    b["policy.heads"] = int_key(FIELD(policy.heads));
    b["policy.ffn_dim"] = int_key(FIELD(policy.ffn_dim));
    b["policy.ik_hidden"] = int_key(FIELD(policy.ik_hidden));
    b["policy.stop_end_pose_grad"] = bool_key(FIELD(policy.stop_end_pose_grad));

    b["train.beta"] = real_key(FIELD(policy.beta));
    b["train.gamma"] = real_key(FIELD(policy.gamma));
    b["train.lr"] = real_key(FIELD(policy.lr));
    b["train.weight_decay"] = real_key(FIELD(policy.weight_decay));
    b["train.grad_clip"] = real_key(FIELD(policy.grad_clip));
    b["train.warmup_steps"] = int_key(FIELD(policy.warmup_steps));
    b["train.cosine_decay"] = bool_key(FIELD(policy.cosine_decay));
    b["train.steps"] = int_key(FIELD(policy.steps));
    b["train.batch"] = int_key(FIELD(policy.batch));
    b["train.n_val"] = int_key(FIELD(policy.n_val));
    b["train.log_every"] = int_key(FIELD(policy.log_every));
    b["train.seed"] = seed_key(FIELD(policy.seed));
    b["train.states"] = list_key(FIELD(train_states));

    b["collect.episodes"] = int_key(FIELD(collect_episodes));
    b["collect.states"] = list_key(FIELD(collect_states));
    b["collect.seed"] = seed_key(FIELD(collect_seed));

    b["eval.states"] = list_key(FIELD(eval_states));
    b["eval.trials"] = int_key(FIELD(eval_trials));
    b["eval.seed"] = seed_key(FIELD(eval_seed));
    b["eval.ensemble"] = bool_key(FIELD(ensemble));
    b["eval.ensemble_decay"] = real_key(FIELD(ensemble_decay));

    b["serve.port"] = int_key(FIELD(serve_port));
    b["serve.state"] = int_key(FIELD(serve_state));
    b["serve.seed"] = seed_key(FIELD(serve_seed));
    b["serve.fps"] = real_key(FIELD(serve_fps));
    b["serve.max_steps"] = int_key(FIELD(serve_max_steps));
    return b;
  }();
  return table;
}

#undef FIELD

void check_states(const std::string& key, const std::vector<int>& states) {
  if (states.empty()) throw Error(ErrorCode::InvalidConfig, key + " is empty");
  for (int s : states)
    if (s < 0 || s > 5) throw Error(ErrorCode::InvalidState, key + ": state " + std::to_string(s) + " is not in 0..5");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = bindings().find(key);
  if (it == bindings().end()) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

std::string RunConfig::get(const std::string& key) const {
  const auto it = bindings().find(key);
  if (it == bindings().end()) throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  return it->second.get(*this);
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : bindings()) out.push_back(k);
  return out;
}

void RunConfig::load_file(const fs::path& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("cannot read config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw Error(ErrorCode::InvalidConfig, "config key '" + section + "' is outside a section");
    for (const auto& [name, leaf] : body) set(section + "." + name, leaf.data());
  }
}

std::string RunConfig::to_ini() const {
  std::ostringstream out;
  std::string current;
  for (const auto& key : keys()) {
    const auto dot = key.find('.');
    const std::string section = key.substr(0, dot);
    if (section != current) {
      out << (current.empty() ? "" : "\n") << "[" << section << "]\n";
      current = section;
    }
    out << key.substr(dot + 1) << " = " << get(key) << "\n";
  }
  return out.str();
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& key : keys()) {
    const auto dot = key.find('.');
    j[key.substr(0, dot)][key.substr(dot + 1)] = get(key);
  }
  return j;
}

void RunConfig::write(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + dir.string() + ": " + ec.message());
  std::ofstream ini(dir / "run_config.ini");
  std::ofstream js(dir / "run_config.json");
  if (!ini || !js) throw Error(ErrorCode::IOFailure, "cannot write run config into " + dir.string());
  ini << to_ini();
  js << to_json().dump(2) << "\n";
}

PolicyConfig RunConfig::policy_config() const {
  PolicyConfig p = policy;
  p.image_width = sim.image_width;
  p.image_height = sim.image_height;
  return p;
}

void RunConfig::validate() const {
  policy_config().validate();
  check_states("train.states", train_states);
  check_states("collect.states", collect_states);
  check_states("eval.states", eval_states);
  check_states("serve.state", {serve_state});
  if (collect_episodes < 1) throw Error(ErrorCode::InvalidConfig, "collect.episodes must be >= 1");
  if (eval_trials < 1) throw Error(ErrorCode::InvalidConfig, "eval.trials must be >= 1");
  if (!(ensemble_decay >= 0.0)) throw Error(ErrorCode::InvalidConfig, "eval.ensemble_decay must be >= 0");
  if (serve_port < 0 || serve_port > 65535) throw Error(ErrorCode::InvalidConfig, "serve.port out of range");
  if (!(serve_fps > 0.0 && serve_fps <= 30.0)) throw Error(ErrorCode::InvalidConfig, "serve.fps must be in (0, 30]");
  if (serve_max_steps < 1) throw Error(ErrorCode::InvalidConfig, "serve.max_steps must be >= 1");
  if (sim.max_steps < 1 || sim.image_width < 8 || sim.image_height < 8)
    throw Error(ErrorCode::InvalidConfig, "sim.max_steps and image size must be positive");
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& item : split(text, ',')) {
    if (item.empty()) throw Error(ErrorCode::InvalidConfig, "empty entry in list '" + text + "'");
    const auto dash = item.find('-', 1);
    if (dash == std::string::npos) {
      out.push_back(int(to_integer("list", item)));
      continue;
    }
    const int lo = int(to_integer("list", item.substr(0, dash)));
    const int hi = int(to_integer("list", item.substr(dash + 1)));
    if (hi < lo) throw Error(ErrorCode::InvalidConfig, "descending range '" + item + "'");
    for (int v = lo; v <= hi; ++v) out.push_back(v);
  }
  if (out.empty()) throw Error(ErrorCode::InvalidConfig, "empty list");
  return out;
}

std::string format_int_list(const std::vector<int>& values) { return join(values); }

std::vector<std::string> parse_cameras(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& item : split(text, ',')) {
    const std::string name = camera_name(camera_from_name(item));
    for (const auto& seen : out)
      if (seen == name) throw Error(ErrorCode::InvalidConfig, "camera '" + name + "' listed twice");
    out.push_back(name);
  }
  if (out.empty()) throw Error(ErrorCode::InvalidConfig, "no cameras given");
  return out;
}

}  // namespace epact
