#include "epact/teleop.hpp"

#include <chrono>
#include <cmath>
#include <csignal>
#include <deque>

#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/signal_set.hpp>
#include <boost/asio/steady_timer.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "epact/errors.hpp"
#include "epact/image.hpp"

namespace epact {

using json = nlohmann::json;

std::string error_message(const std::string& msg) { return json{{"type", "error"}, {"msg", msg}}.dump(); }

namespace {

// Wire names for the two wrist cameras.
std::string image_field(const std::string& camera) {
  if (camera == "wrist_up") return "img_up";
  if (camera == "wrist_down") return "img_down";
  return "img_" + camera;
}

std::uint64_t read_seed(const json& j) {
  if (!j.is_number_integer() || j.get<long long>() < 0) throw std::invalid_argument("seed must be a non-negative integer");
  return j.get<std::uint64_t>();
}

}  // namespace

TeleopSession::TeleopSession(TeleopOptions opts) : opts_(std::move(opts)), env_(opts_.sim) {
  if (!(opts_.stream_fps > 0.0) || opts_.stream_fps > opts_.sim.fps)
    throw Error(ErrorCode::InvalidConfig, "stream fps must be in (0, env fps]");
  reset_env(opts_.state, opts_.seed);
}

void TeleopSession::log(const std::string& msg) const {
  if (opts_.log) opts_.log(msg);
}

void TeleopSession::reset_env(int state, std::uint64_t seed) {
  current_ = env_.reset(state, seed);
  state_ = state;
  seed_ = seed;
  dq_.setZero();
  grip_ = env_.grip();
}

std::vector<std::string> TeleopSession::handle_message(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    return {error_message(std::string("malformed JSON: ") + e.what())};
  }
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) return {error_message("message needs a string 'type'")};
  const std::string type = j["type"].get<std::string>();
  try {
    if (type == "cmd") return on_cmd(j);
    if (type == "reset") return on_reset(j);
    if (type == "record") return on_record(j);
  } catch (const Error& e) {
    return {error_message(e.what())};
  } catch (const std::exception& e) {
    return {error_message(type + ": " + e.what())};
  }
  return {error_message("unknown message type '" + type + "'")};
}

std::vector<std::string> TeleopSession::on_cmd(const json& j) {
  Eigen::Vector4d dq = dq_;
  double grip = grip_;
  if (j.contains("dq")) {
    const json& a = j["dq"];
    if (!a.is_array() || a.size() != 4) return {error_message("cmd: dq must be an array of 4 numbers")};
    for (int i = 0; i < 4; ++i) {
      if (!a[i].is_number() || !std::isfinite(a[i].get<double>())) return {error_message("cmd: dq must be finite numbers")};
      dq(i) = a[i].get<double>();
    }
  }
  if (j.contains("grip")) {
    if (!j["grip"].is_number() || !std::isfinite(j["grip"].get<double>())) return {error_message("cmd: grip must be a number")};
    grip = opts_.sim.arm.gripper_range.clamp(j["grip"].get<double>());
  }
  // Both fields replace the held command together.
  dq_ = dq;
  grip_ = grip;
  return {};
}

std::vector<std::string> TeleopSession::on_reset(const json& j) {
  int state = state_;
  std::uint64_t seed = seed_ + 1;
  if (j.contains("state")) {
    if (!j["state"].is_number_integer()) return {error_message("reset: state must be an integer")};
    state = j["state"].get<int>();
    if (state < 0 || state > 5) return {error_message("reset: state " + std::to_string(state) + " is not in 0..5")};
  }
  if (j.contains("seed")) seed = read_seed(j["seed"]);
  if (recording_) {
    recording_.reset();
    log("reset dropped the recording in progress");
  }
  reset_env(state, seed);
  log("reset to state " + std::to_string(state) + " seed " + std::to_string(seed));
  return {status_message(), observation_message()};
}

std::vector<std::string> TeleopSession::on_record(const json& j) {
  if (!j.contains("action") || !j["action"].is_string()) return {error_message("record: action must be start, stop or discard")};
  const std::string action = j["action"].get<std::string>();
  if (action == "start") {
    if (recording_) return {error_message("record: already recording")};
    if (env_.terminal()) return {error_message("record: episode is over, reset first")};
    recording_.emplace();
    recording_->meta.state_id = state_;
    recording_->meta.seed = seed_;
    recording_->meta.source = EpisodeSource::Teleop;
    recording_->meta.fps = opts_.sim.fps;
    recording_->meta.extra = {{"client", client_id_}, {"start_t", env_.t()}};
    return {status_message()};
  }
  if (action == "discard") {
    if (!recording_) return {error_message("record: not recording")};
    recording_.reset();
    return {status_message()};
  }
  if (action == "stop") {
    if (!recording_) return {error_message("record: not recording")};
    EpisodeRecord rec = std::move(*recording_);
    recording_.reset();
    if (rec.length() < 2) return {error_message("record: fewer than 2 steps recorded, nothing kept"), status_message()};
    rec.meta.outcome = env_.terminal() ? env_.episode_outcome() : Outcome::Ongoing;
    rec.validate();
    if (opts_.data_dir.empty()) return {error_message("record: no data directory configured"), status_message()};
    const int id = write_episode(rec, opts_.data_dir);
    saved_.push_back(id);
    log("kept episode " + std::to_string(id) + " (" + std::to_string(rec.length()) + " steps)");
    json status = json::parse(status_message());
    status["episode"] = id;
    status["steps"] = rec.length();
    return {status.dump()};
  }
  return {error_message("record: unknown action '" + action + "'")};
}

std::optional<std::string> TeleopSession::tick() {
  if (!env_.terminal()) {
    Action action;
    action.joints = clamp_to_limits(JointState::from(current_.q.vector() + dq_), opts_.sim.arm);
    action.grip = grip_;
    action = quantize(action);
    if (recording_) recording_->append(current_, action);
    current_ = env_.step(action).first;
  }
  ++ticks_;
  // Emit whenever the stream clock crosses a frame boundary, which keeps the
  // average rate exact even when the stream rate does not divide the env rate.
  const double ratio = opts_.stream_fps / opts_.sim.fps;
  if (std::floor(ticks_ * ratio + 1e-9) > std::floor((ticks_ - 1) * ratio + 1e-9)) return observation_message();
  return std::nullopt;
}

std::string TeleopSession::observation_message() const {
  json j{{"type", "obs"},
         {"t", current_.t},
         {"q", {current_.q.theta1, current_.q.theta2, current_.q.d3, current_.q.theta4}},
         {"grip", current_.grip},
         {"state", state_},
         {"recording", recording_.has_value()},
         {"done", env_.terminal()}};
  if (env_.terminal()) j["outcome"] = outcome_name(env_.episode_outcome());
  for (const auto& [cam, img] : current_.images) j[image_field(cam)] = base64_encode(encode_png(img));
  return j.dump();
}

std::string TeleopSession::status_message() const {
  return json{{"type", "status"},
              {"state", state_},
              {"seed", seed_},
              {"t", env_.t()},
              {"recording", recording_.has_value()},
              {"recorded_steps", recorded_steps()},
              {"saved", saved_}}
      .dump();
}

void TeleopSession::disconnect() {
  if (recording_) log("client left, recording discarded");
  recording_.reset();
  dq_.setZero();
}

// ---------------------------------------------------------------------------

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

struct TeleopServer::Impl {
  TeleopSession session;
  net::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  net::steady_timer timer{ioc};
  std::chrono::steady_clock::time_point epoch;
  std::chrono::nanoseconds period;
  long long tick_index = 0;

  struct Client {
    websocket::stream<beast::tcp_stream> ws;
    beast::flat_buffer buffer;
    std::deque<std::string> queue;
    bool writing = false;
    bool open = false;
    explicit Client(tcp::socket s) : ws(std::move(s)) {}
  };
  std::shared_ptr<Client> client;
  bool stopping = false;

  static constexpr std::size_t kMaxQueued = 4;

  Impl(TeleopOptions opts, int port)
      : session(std::move(opts)),
        period(std::chrono::nanoseconds(std::llround(1e9 / session.env().params().fps))) {
    beast::error_code ec;
    const tcp::endpoint ep(tcp::v4(), static_cast<unsigned short>(port));
    acceptor.open(ep.protocol(), ec);
    if (!ec) acceptor.set_option(net::socket_base::reuse_address(true), ec);
    if (!ec) acceptor.bind(ep, ec);
    if (!ec) acceptor.listen(net::socket_base::max_listen_connections, ec);
    if (ec) throw Error(ErrorCode::IOFailure, "cannot listen on port " + std::to_string(port) + ": " + ec.message());
  }

  void accept() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
      if (stopping) return;
      if (!ec) on_connection(std::move(socket));
      accept();
    });
  }

  void on_connection(tcp::socket socket) {
    auto c = std::make_shared<Client>(std::move(socket));
    c->ws.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    c->ws.async_accept([this, c](beast::error_code ec) {
      if (ec || stopping) return;
      if (client) {
        c->ws.text(true);
        auto busy = std::make_shared<std::string>(error_message("session busy: another client is connected"));
        c->ws.async_write(net::buffer(*busy), [c, busy](beast::error_code, std::size_t) {
          c->ws.async_close(websocket::close_code::try_again_later, [c](beast::error_code) {});
        });
        return;
      }
      client = c;
      c->open = true;
      c->ws.text(true);
      session.connect();
      send(c, session.status_message());
      send(c, session.observation_message());
      read(c);
    });
  }

  void read(const std::shared_ptr<Client>& c) {
    c->ws.async_read(c->buffer, [this, c](beast::error_code ec, std::size_t) {
      if (ec) {
        drop(c);
        return;
      }
      const std::string text = beast::buffers_to_string(c->buffer.data());
      c->buffer.consume(c->buffer.size());
      for (auto& reply : session.handle_message(text)) send(c, std::move(reply));
      read(c);
    });
  }

  void drop(const std::shared_ptr<Client>& c) {
    if (client != c) return;
    c->open = false;
    client.reset();
    session.disconnect();
  }

  // Replies are always queued; observations are dropped while the client
  // is behind.
  void send(const std::shared_ptr<Client>& c, std::string msg, bool droppable = false) {
    if (!c->open) return;
    if (droppable && c->queue.size() >= kMaxQueued) return;
    c->queue.push_back(std::move(msg));
    if (!c->writing) write_next(c);
  }

  void write_next(const std::shared_ptr<Client>& c) {
    if (c->queue.empty() || !c->open) {
      c->writing = false;
      return;
    }
    c->writing = true;
    c->ws.async_write(net::buffer(c->queue.front()), [this, c](beast::error_code ec, std::size_t) {
      c->queue.pop_front();
      if (ec) {
        c->writing = false;
        drop(c);
        return;
      }
      write_next(c);
    });
  }

  void schedule() {
    ++tick_index;
    timer.expires_at(epoch + tick_index * period);
    timer.async_wait([this](beast::error_code ec) {
      if (ec || stopping) return;
      auto obs = session.tick();
      if (obs && client) send(client, std::move(*obs), true);
      schedule();
    });
  }

  void shutdown() {
    if (stopping) return;
    stopping = true;
    session.disconnect();
    beast::error_code ec;
    acceptor.close(ec);
    timer.cancel();
    if (client) {
      auto c = client;
      client.reset();
      c->open = false;
      c->ws.async_close(websocket::close_code::going_away, [c](beast::error_code) {});
    }
    ioc.stop();
  }
};

TeleopServer::TeleopServer(TeleopOptions opts, int port) : impl_(std::make_unique<Impl>(std::move(opts), port)) {}

TeleopServer::~TeleopServer() = default;

int TeleopServer::port() const { return impl_->acceptor.local_endpoint().port(); }

const TeleopSession& TeleopServer::session() const { return impl_->session; }

void TeleopServer::run(bool handle_sigint) {
  Impl& s = *impl_;
  net::signal_set signals(s.ioc);
  if (handle_sigint) {
    signals.add(SIGINT);
    signals.add(SIGTERM);
    signals.async_wait([&s](beast::error_code ec, int) {
      if (!ec) s.shutdown();
    });
  }
  s.epoch = std::chrono::steady_clock::now();
  s.accept();
  s.schedule();
  s.ioc.run();
}

void TeleopServer::stop() {
  net::post(impl_->ioc, [this] { impl_->shutdown(); });
}

}  // namespace epact
