#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "epact/dataset.hpp"
#include "epact/sim_env.hpp"

namespace epact {

struct TeleopOptions {
  SimParams sim;                       // env stepping rate is sim.fps
  int state = 1;
  std::uint64_t seed = 0;
  double stream_fps = 15.0;            // observation messages per second
  std::filesystem::path data_dir;      // kept recordings are appended here
  std::function<void(const std::string&)> log;
};

/// One live env driven by incremental joint commands. Message handling and
/// ticking are plain calls so the protocol can be exercised without sockets.
///
/// Client -> server:
///   {"type":"cmd","dq":[4],"grip":f}            joint change per env step, gripper target
///   {"type":"reset","state":int,"seed":int}
///   {"type":"record","action":"start"|"stop"|"discard"}
/// Server -> client:
///   {"type":"obs","t":int,"q":[4],"grip":f,"img_up":b64 PNG,"img_down":b64 PNG, ...}
///   {"type":"status",...} after reset and record actions
///   {"type":"error","msg":string}
class TeleopSession {
 public:
  explicit TeleopSession(TeleopOptions opts);

  /// Parses and applies one client message; returns the replies to send.
  /// Never throws for bad input: problems come back as error messages.
  std::vector<std::string> handle_message(const std::string& text);

  /// One env-rate tick: applies the held command (one env step unless the
  /// episode is over), records the pair when recording, and returns an
  /// observation message when one is due at the stream rate.
  std::optional<std::string> tick();

  std::string observation_message() const;
  std::string status_message() const;

  /// Client went away: any in-progress recording is dropped.
  void disconnect();
  void connect() { ++client_id_; }

  const Env& env() const { return env_; }
  bool recording() const { return recording_.has_value(); }
  int recorded_steps() const { return recording_ ? recording_->length() : 0; }
  const std::vector<int>& saved_episodes() const { return saved_; }
  Eigen::Vector4d held_dq() const { return dq_; }
  double held_grip() const { return grip_; }
  int client_id() const { return client_id_; }
  long long ticks() const { return ticks_; }

 private:
  std::vector<std::string> on_cmd(const nlohmann::json& j);
  std::vector<std::string> on_reset(const nlohmann::json& j);
  std::vector<std::string> on_record(const nlohmann::json& j);
  void reset_env(int state, std::uint64_t seed);
  void log(const std::string& msg) const;

  TeleopOptions opts_;
  Env env_;
  Observation current_;
  int state_ = 1;
  std::uint64_t seed_ = 0;
  Eigen::Vector4d dq_ = Eigen::Vector4d::Zero();
  double grip_ = 1.0;
  std::optional<EpisodeRecord> recording_;
  std::vector<int> saved_;
  long long ticks_ = 0;
  int client_id_ = 0;
};

std::string error_message(const std::string& msg);

/// Websocket front end for a TeleopSession. One client at a time; a second
/// connection is told the session is busy and closed. All work runs on the
/// thread that calls run().
class TeleopServer {
 public:
  /// Binds the port (0 picks a free one). Throws IOFailure when the port is
  /// unavailable.
  TeleopServer(TeleopOptions opts, int port);
  ~TeleopServer();
  TeleopServer(const TeleopServer&) = delete;
  TeleopServer& operator=(const TeleopServer&) = delete;

  int port() const;

  /// Serves until stop() or, with `handle_sigint`, until SIGINT/SIGTERM.
  void run(bool handle_sigint = false);

  /// Thread-safe; makes run() return after discarding any open recording.
  void stop();

  const TeleopSession& session() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace epact
