#include "epact/sim_env.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <sstream>

#include "epact/errors.hpp"
#include "epact/random.hpp"

namespace epact {

namespace {

constexpr double kNearPlane = 0.01;

Vec3 closest_on_segment(const Vec3& a, const Vec3& b, const Vec3& p) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return a;
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return a + t * ab;
}

double step_toward(double cur, double target, double rate) {
  const double d = target - cur;
  if (d > rate) return cur + rate;
  if (d < -rate) return cur - rate;
  return target;
}

Vec3 clamp_displacement(const Vec3& pos, const Vec3& rest, double slack) {
  const Vec3 d = pos - rest;
  const double n = d.norm();
  if (n <= slack) return pos;
  return rest + d * (slack / n);
}

std::vector<Vec3> parse_points(const std::string& text, std::size_t arity, std::vector<std::vector<double>>* full) {
  std::vector<Vec3> out;
  std::stringstream groups(text);
  std::string group;
  while (std::getline(groups, group, '|')) {
    std::stringstream ss(group);
    std::vector<double> vals;
    double v;
    while (ss >> v) vals.push_back(v);
    if (vals.empty()) continue;
    if (vals.size() != arity) throw Error(ErrorCode::InvalidConfig, "scene table entry '" + group + "' has wrong arity");
    out.emplace_back(vals[0], vals[1], vals[2]);
    if (full) full->push_back(vals);
  }
  return out;
}

}  // namespace

const Berry& Scene::target() const {
  for (const auto& b : berries)
    if (b.id == target_id) return b;
  throw Error(ErrorCode::InvalidState, "scene has no target berry");
}

SceneTable SceneTable::defaults() {
  SceneTable t;
  // Offsets from the target center: x toward the arm is negative, y lateral,
  // z up. Occluders hang slightly higher so they sit in the gripper's path.
  t.states[1].unripe = {Vec3(-0.035, 0.020, 0.018)};
  t.states[2].unripe = {Vec3(-0.035, 0.000, 0.018)};
  t.states[3].unripe = {Vec3(-0.010, -0.032, 0.018), Vec3(-0.010, 0.032, 0.018)};
  t.states[4].unripe = {Vec3(-0.035, -0.018, 0.018), Vec3(-0.035, 0.020, 0.018)};
  t.states[4].leaves = {LeafSpec{Vec3(-0.060, 0.000, 0.030), 0.022, 0.012, 0.4}};
  t.states[5].unripe = {Vec3(-0.028, 0.010, 0.010)};
  return t;
}

SceneTable SceneTable::load(const std::filesystem::path& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::IOFailure, "cannot read scene table " + path.string() + ": " + e.what());
  }
  SceneTable t = defaults();
  if (auto scene = tree.get_child_optional("scene")) {
    if (auto v = scene->get_optional<std::string>("target")) t.target_center = parse_points(*v, 3, nullptr).at(0);
    t.pipe_height = scene->get("pipe_height", t.pipe_height);
    t.cluster_jitter = scene->get("cluster_jitter", t.cluster_jitter);
    t.member_jitter = scene->get("member_jitter", t.member_jitter);
    t.berry_radius = scene->get("berry_radius", t.berry_radius);
  }
  for (int s = 0; s < 6; ++s) {
    auto sec = tree.get_child_optional("state" + std::to_string(s));
    if (!sec) continue;
    StateLayout layout;
    layout.unripe = parse_points(sec->get("unripe", std::string()), 3, nullptr);
    std::vector<std::vector<double>> leaves;
    parse_points(sec->get("leaf", std::string()), 6, &leaves);
    for (const auto& l : leaves) layout.leaves.push_back(LeafSpec{Vec3(l[0], l[1], l[2]), l[3], l[4], l[5]});
    t.states[s] = std::move(layout);
  }
  return t;
}

std::string camera_name(CameraLabel label) { return label == CameraLabel::WristUp ? "wrist_up" : "wrist_down"; }

CameraLabel camera_from_name(const std::string& name) {
  if (name == "wrist_up" || name == "up") return CameraLabel::WristUp;
  if (name == "wrist_down" || name == "down") return CameraLabel::WristDown;
  throw Error(ErrorCode::InvalidConfig, "unknown camera '" + name + "'");
}

Eigen::Isometry3d look_at_mount(const Vec3& eye, const Vec3& target) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(Vec3::UnitZ()).normalized();
  const Vec3 down = forward.cross(right);
  Eigen::Isometry3d m = Eigen::Isometry3d::Identity();
  m.linear().col(0) = right;
  m.linear().col(1) = down;
  m.linear().col(2) = forward;
  m.translation() = eye;
  return m;
}

CameraModel CameraModel::wrist(CameraLabel label, int width, int height) {
  CameraModel cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = 120.0 * width / 96.0;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.label = label;
  if (label == CameraLabel::WristUp)
    cam.mount = look_at_mount(Vec3(-0.06, 0.0, 0.06), Vec3(0.03, 0.0, 0.0));
  else
    cam.mount = look_at_mount(Vec3(-0.06, 0.0, -0.06), Vec3(0.05, 0.0, -0.01));
  return cam;
}

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw Error(ErrorCode::InvalidConfig, "focal lengths must be positive");
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height))
    throw Error(ErrorCode::InvalidConfig, "principal point outside the image");
}

std::string outcome_name(Outcome o) {
  switch (o) {
    case Outcome::Ongoing: return "ongoing";
    case Outcome::Success: return "success";
    case Outcome::WrongTarget: return "wrong_target";
    case Outcome::MultiPick: return "multi_pick";
    case Outcome::Timeout: return "timeout";
  }
  return "ongoing";
}

Outcome outcome_from_name(const std::string& name) {
  for (auto o : {Outcome::Ongoing, Outcome::Success, Outcome::WrongTarget, Outcome::MultiPick, Outcome::Timeout})
    if (outcome_name(o) == name) return o;
  throw Error(ErrorCode::SchemaViolation, "unknown outcome '" + name + "'");
}

Scene make_scene(int state_id, std::uint64_t seed, const SceneTable& table) {
  if (state_id < 0 || state_id > 5)
    throw Error(ErrorCode::InvalidState, "state_id " + std::to_string(state_id) + " not in 0..5");
  Rng rng(derive_seed(seed, {std::uint64_t(state_id), 1}));
  const double cj = table.cluster_jitter;
  const double mj = table.member_jitter;
  const Vec3 cluster(uniform(rng, -cj, cj), uniform(rng, -cj, cj), uniform(rng, -cj, cj) * 0.5);
  auto member = [&] { return Vec3(uniform(rng, -mj, mj), uniform(rng, -mj, mj), uniform(rng, -mj, mj)); };

  Scene scene;
  scene.state_id = state_id;
  scene.seed = seed;
  auto add_berry = [&](bool ripe, const Vec3& center) {
    Berry b;
    b.id = int(scene.berries.size());
    b.ripe = ripe;
    b.radius = table.berry_radius;
    b.rest_pos = center;
    b.cur_pos = center;
    b.anchor = Vec3(center.x(), center.y(), table.pipe_height);
    scene.berries.push_back(b);
    return b.id;
  };
  const Vec3 target = table.target_center + cluster + member();
  scene.target_id = add_berry(true, target);
  const auto& layout = table.states[state_id];
  for (const auto& off : layout.unripe) add_berry(false, target + off + member());
  for (const auto& spec : layout.leaves) {
    Leaf leaf;
    leaf.id = int(scene.leaves.size());
    leaf.rest_center = target + spec.offset + member();
    leaf.cur_center = leaf.rest_center;
    leaf.anchor = Vec3(leaf.rest_center.x(), leaf.rest_center.y(), table.pipe_height);
    leaf.axis_a = spec.axis_a;
    leaf.axis_b = spec.axis_b;
    leaf.orientation = spec.orientation;
    scene.leaves.push_back(leaf);
  }
  return scene;
}

Eigen::Isometry3d tool_frame(const JointState& q, const ScaraParams& params) {
  const EndPose pose = forward_kinematics(q, params);
  Eigen::Isometry3d t = Eigen::Isometry3d::Identity();
  t.linear() = Eigen::AngleAxisd(pose.yaw, Vec3::UnitZ()).toRotationMatrix();
  t.translation() = pose.position();
  return t;
}

Eigen::Isometry3d camera_pose(const CameraModel& cam, const JointState& q, const ScaraParams& params) {
  return tool_frame(q, params) * cam.mount;
}

std::optional<Eigen::Vector2d> project_camera_point(const CameraModel& cam, const Vec3& p) {
  if (p.z() <= 0.0) return std::nullopt;
  return Eigen::Vector2d(cam.cx + cam.fx * p.x() / p.z(), cam.cy + cam.fy * p.y() / p.z());
}

std::optional<Eigen::Vector2d> project_point(const CameraModel& cam, const JointState& q, const ScaraParams& params,
                                             const Vec3& world_point) {
  return project_camera_point(cam, camera_pose(cam, q, params).inverse() * world_point);
}

namespace {

struct Primitive {
  double depth;
  enum Kind { Disc, Ellipse, Line } kind;
  double x0, y0, x1, y1;  // disc/ellipse: center in x0,y0; line: endpoints
  double a, b, angle;     // disc: radius in a; ellipse: semi-axes; line: width in a
  Rgb color;
};

// Clips a camera-frame segment to Z > near; false when fully behind.
bool clip_segment(Vec3& p0, Vec3& p1) {
  if (p0.z() <= kNearPlane && p1.z() <= kNearPlane) return false;
  if (p0.z() < kNearPlane) p0 = p0 + (p1 - p0) * ((kNearPlane - p0.z()) / (p1.z() - p0.z()));
  if (p1.z() < kNearPlane) p1 = p1 + (p0 - p1) * ((kNearPlane - p1.z()) / (p0.z() - p1.z()));
  return true;
}

}  // namespace

ImageRGB render_camera(const Scene& scene, const ArmState& arm, const CameraModel& cam, const SimParams& params) {
  ImageRGB img(cam.width, cam.height, kBackground);
  const Eigen::Isometry3d world_to_cam = camera_pose(cam, arm.q, params.arm).inverse();
  std::vector<Primitive> prims;

  auto add_line = [&](const Vec3& w0, const Vec3& w1, double world_width, Rgb color) {
    Vec3 p0 = world_to_cam * w0, p1 = world_to_cam * w1;
    if (!clip_segment(p0, p1)) return;
    const auto u0 = project_camera_point(cam, p0), u1 = project_camera_point(cam, p1);
    const double zmid = 0.5 * (p0.z() + p1.z());
    prims.push_back({zmid, Primitive::Line, u0->x(), u0->y(), u1->x(), u1->y(),
                     std::max(1.0, cam.fx * world_width / zmid), 0.0, 0.0, color});
  };

  for (const auto& b : scene.berries) {
    const Vec3 c = world_to_cam * b.cur_pos;
    if (b.attached) add_line(b.anchor, b.top(), 0.002, kStem);
    if (c.z() <= kNearPlane) continue;
    const auto u = project_camera_point(cam, c);
    prims.push_back({c.z(), Primitive::Disc, u->x(), u->y(), 0, 0, cam.fx * b.radius / c.z(), 0, 0,
                     b.ripe ? kRipe : kUnripe});
  }
  for (const auto& l : scene.leaves) {
    add_line(l.anchor, l.cur_center, 0.002, kStem);
    const Vec3 c = world_to_cam * l.cur_center;
    if (c.z() <= kNearPlane) continue;
    const auto u = project_camera_point(cam, c);
    prims.push_back({c.z(), Primitive::Ellipse, u->x(), u->y(), 0, 0, cam.fx * l.axis_a / c.z(),
                     cam.fy * l.axis_b / c.z(), l.orientation, kLeaf});
  }
  const Eigen::Isometry3d tool = tool_frame(arm.q, params.arm);
  const double half_gap = 0.003 + 0.012 * std::clamp(arm.grip, 0.0, 1.0);
  for (double side : {-1.0, 1.0}) {
    const Vec3 tip = tool * Vec3(0.0, side * half_gap, 0.0);
    const Vec3 root = tool * Vec3(-params.gripper_length, side * half_gap, 0.0);
    add_line(root, tip, 0.004, kFinger);
  }

  // Painter's algorithm: far to near; ties keep insertion order.
  std::stable_sort(prims.begin(), prims.end(), [](const Primitive& p, const Primitive& q) { return p.depth > q.depth; });
  for (const auto& p : prims) {
    switch (p.kind) {
      case Primitive::Disc: fill_disc(img, p.x0, p.y0, p.a, p.color); break;
      case Primitive::Ellipse: fill_ellipse(img, p.x0, p.y0, p.a, p.b, p.angle, p.color); break;
      case Primitive::Line: draw_thick_line(img, p.x0, p.y0, p.x1, p.y1, p.a, p.color); break;
    }
  }
  return img;
}

Env::Env(SimParams params) : params_(std::move(params)) {
  params_.arm.validate();
  for (auto label : params_.cameras) {
    cameras_.push_back(CameraModel::wrist(label, params_.image_width, params_.image_height));
    cameras_.back().validate();
  }
}

Observation Env::reset(int state_id, std::uint64_t seed) {
  scene_ = make_scene(state_id, seed, params_.table);
  Rng rng(derive_seed(seed, {std::uint64_t(state_id), 2}));
  const Vec3 pick = scene_.target().picking_point();
  const double base_angle = std::atan2(pick.y(), pick.x());
  // Retry a handful of draws; the defaults always succeed on the first.
  for (int attempt = 0;; ++attempt) {
    const double phi = base_angle + uniform(rng, -params_.approach_cone, params_.approach_cone);
    const double dist = uniform(rng, params_.home_distance_min, params_.home_distance_max);
    const double dz = uniform(rng, -params_.home_height_jitter, params_.home_height_jitter);
    EndPose home;
    home.x = pick.x() - dist * std::cos(phi);
    home.y = pick.y() - dist * std::sin(phi);
    home.z = pick.z() + dz;
    home.yaw = wrap_angle(phi);
    try {
      q_ = inverse_kinematics(home, params_.arm, Elbow::Up);
      break;
    } catch (const Error&) {
      if (attempt > 100) throw Error(ErrorCode::InvalidState, "no reachable home pose for this scene");
    }
  }
  grip_ = 1.0;
  t_ = 0;
  terminal_ = false;
  outcome_ = Outcome::Ongoing;
  reset_done_ = true;
  return observe();
}

void Env::set_arm(const JointState& q, double grip) {
  q_ = clamp_to_limits(q, params_.arm);
  grip_ = std::clamp(grip, 0.0, 1.0);
}

Observation Env::observe() const {
  Observation obs;
  for (const auto& cam : cameras_)
    obs.images.emplace(camera_name(cam.label), render_camera(scene_, ArmState{q_, grip_}, cam, params_));
  obs.q = q_;
  obs.grip = grip_;
  obs.t = t_;
  return obs;
}

std::vector<int> Env::detached_ids() const {
  std::vector<int> ids;
  for (const auto& b : scene_.berries)
    if (!b.attached) ids.push_back(b.id);
  return ids;
}

void Env::resolve_contacts(StepInfo& info) {
  const Eigen::Isometry3d tool = tool_frame(q_, params_.arm);
  const Vec3 tip = tool.translation();
  const Vec3 tail = tool * Vec3(-params_.gripper_length, 0.0, 0.0);
  const Vec3 lateral = tool.linear() * Vec3::UnitY();

  auto push_out = [&](Vec3& pos, const Vec3& rest, double radius) {
    const Vec3 s = closest_on_segment(tip, tail, pos);
    Vec3 d = pos - s;
    const double reach = radius + params_.gripper_radius;
    const double n = d.norm();
    if (n >= reach) return false;
    const Vec3 dir = n > 1e-12 ? Vec3(d / n) : lateral;
    pos = clamp_displacement(s + dir * reach, rest, params_.stem_slack);
    return true;
  };

  for (auto& b : scene_.berries) {
    if (!b.attached || b.grasped) continue;
    if (push_out(b.cur_pos, b.rest_pos, b.radius))
      info.contacts.push_back({ObjectKind::Berry, b.id});
    else
      b.cur_pos = b.rest_pos + params_.relax * (b.cur_pos - b.rest_pos);
  }
  for (auto& l : scene_.leaves) {
    if (l.pushable && push_out(l.cur_center, l.rest_center, l.contact_radius()))
      info.contacts.push_back({ObjectKind::Leaf, l.id});
    else
      l.cur_center = l.rest_center + params_.relax * (l.cur_center - l.rest_center);
  }
}

std::pair<Observation, StepInfo> Env::step(const Action& action) {
  if (!reset_done_) throw Error(ErrorCode::TerminalEnv, "step before reset");
  if (terminal_) throw Error(ErrorCode::TerminalEnv, "step after terminal");

  const JointState target = clamp_to_limits(action.joints, params_.arm);
  q_.theta1 = step_toward(q_.theta1, target.theta1, params_.rate_revolute);
  q_.theta2 = step_toward(q_.theta2, target.theta2, params_.rate_revolute);
  q_.d3 = step_toward(q_.d3, target.d3, params_.rate_prismatic);
  q_.theta4 = step_toward(q_.theta4, target.theta4, params_.rate_revolute);
  const bool was_closed = grip_ < params_.grip_close;
  grip_ = step_toward(grip_, std::clamp(action.grip, 0.0, 1.0), params_.rate_grip);
  const bool closed = grip_ < params_.grip_close;

  StepInfo info;
  const Vec3 tip = tool_frame(q_, params_.arm).translation();
  if (closed && !was_closed) {
    for (auto& b : scene_.berries) {
      if (b.attached && (b.picking_point() - tip).norm() <= params_.capture_radius) {
        b.grasped = true;
        b.grasp_origin = b.cur_pos;
      }
    }
  } else if (!closed) {
    for (auto& b : scene_.berries)
      if (b.attached) b.grasped = false;
  }
  for (auto& b : scene_.berries) {
    if (!b.grasped) continue;
    b.cur_pos = tip - Vec3(0, 0, b.radius + kPickAboveTop);
    if (b.attached && (b.cur_pos - b.grasp_origin).norm() >= params_.detach_distance) {
      b.attached = false;
      info.detached_ids.push_back(b.id);
    }
  }
  resolve_contacts(info);
  ++t_;

  if (!info.detached_ids.empty()) {
    const auto detached = detached_ids();
    terminal_ = true;
    if (detached.size() >= 2)
      outcome_ = Outcome::MultiPick;
    else if (detached.front() == scene_.target_id)
      outcome_ = Outcome::Success;
    else
      outcome_ = Outcome::WrongTarget;
  } else if (t_ >= params_.max_steps) {
    terminal_ = true;
    outcome_ = Outcome::Timeout;
  }
  info.terminal = terminal_;
  info.outcome = outcome_;
  return {observe(), std::move(info)};
}

Outcome Env::episode_outcome() const {
  if (!terminal_) throw Error(ErrorCode::NotTerminal, "episode still running at t=" + std::to_string(t_));
  return outcome_;
}

}  // namespace epact
