#include <doctest.h>

#include <chrono>
#include <thread>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "epact/expert.hpp"
#include "epact/image.hpp"
#include "epact/teleop.hpp"
#include "epact/train.hpp"
#include "support.hpp"

using namespace epact;
using epact::testing::TempDir;
using json = nlohmann::json;

namespace {

TeleopOptions small_options(const std::filesystem::path& data) {
  TeleopOptions o;
  o.sim.image_width = o.sim.image_height = 32;
  o.sim.max_steps = 300;
  o.state = 1;
  o.seed = 3;
  o.stream_fps = 15.0;
  o.data_dir = data;
  return o;
}

json only(const std::vector<std::string>& replies) {
  REQUIRE(replies.size() == 1);
  return json::parse(replies.front());
}

std::string cmd(const Eigen::Vector4d& dq, double grip) {
  return json{{"type", "cmd"}, {"dq", {dq(0), dq(1), dq(2), dq(3)}}, {"grip", grip}}.dump();
}

// Drives the session through an expert pick using only protocol messages.
void scripted_pick(TeleopSession& s, const SimParams& sim) {
  const DemoPlan plan = plan_demo(s.env().scene(), s.env().q(), sim, 1);
  for (const Action& a : interpolate_plan(plan, sim)) {
    if (s.env().terminal()) break;
    Eigen::Vector4d dq = a.joints.vector() - s.env().q().vector();
    dq(3) = wrap_angle(dq(3));
    CHECK(s.handle_message(cmd(dq, a.grip)).empty());
    s.tick();
  }
  // Hold still until the pull registers or the cap is hit.
  s.handle_message(cmd(Eigen::Vector4d::Zero(), 0.0));
  while (!s.env().terminal()) s.tick();
}

}  // namespace

TEST_SUITE("teleop") {
  TEST_CASE("commands move the arm on the next tick and hold otherwise") {
    TempDir dir("teleop_cmd");
    TeleopSession s(small_options(dir.path()));
    const JointState q0 = s.env().q();
    s.tick();
    CHECK(s.env().q() == q0);
    CHECK(s.handle_message(R"({"type":"cmd","dq":[0.01,0,0,0],"grip":1.0})").empty());
    s.tick();
    CHECK(s.env().q().theta1 == doctest::Approx(q0.theta1 + 0.01).epsilon(1e-6));
    s.tick();
    CHECK(s.env().q().theta1 == doctest::Approx(q0.theta1 + 0.02).epsilon(1e-6));
    // Requests above the rate limit are capped by the env.
    s.handle_message(R"({"type":"cmd","dq":[1.0,0,0,0]})");
    const double before = s.env().q().theta1;
    s.tick();
    CHECK(s.env().q().theta1 - before <= s.env().params().rate_revolute + 1e-9);
  }

  TEST_CASE("reset re-seeds the scene") {
    TempDir dir("teleop_reset");
    TeleopSession s(small_options(dir.path()));
    const auto replies = s.handle_message(R"({"type":"reset","state":2,"seed":9})");
    REQUIRE(replies.size() == 2);
    CHECK(json::parse(replies[0])["type"] == "status");
    CHECK(json::parse(replies[1])["type"] == "obs");
    CHECK(s.env().scene() == make_scene(2, 9, s.env().params().table));
    CHECK(s.env().t() == 0);
    CHECK(only(s.handle_message(R"({"type":"reset","state":8})"))["type"] == "error");
  }

  TEST_CASE("malformed input yields an error and the session continues") {
    TempDir dir("teleop_bad");
    TeleopSession s(small_options(dir.path()));
    for (const char* bad : {"\x01\x02garbage", "[1,2]", R"({"type":"fly"})", R"({"type":"cmd","dq":[1,2]})",
                            R"({"type":"cmd","grip":"open"})", R"({"type":"record","action":"pause"})",
                            R"({"type":"record","action":"stop"})"}) {
      const json e = only(s.handle_message(bad));
      CHECK(e["type"] == "error");
      CHECK(e["msg"].is_string());
    }
    CHECK(s.handle_message(R"({"type":"cmd","dq":[0,0,0,0],"grip":0.5})").empty());
    CHECK(s.held_grip() == 0.5);
  }

  TEST_CASE("observation messages follow the wire format") {
    TempDir dir("teleop_obs");
    TeleopSession s(small_options(dir.path()));
    int emitted = 0;
    for (int i = 0; i < 30; ++i) emitted += s.tick().has_value();
    CHECK(emitted == 15);
    const json o = json::parse(s.observation_message());
    CHECK(o["type"] == "obs");
    CHECK(o["t"] == 30);
    CHECK(o["q"].size() == 4);
    CHECK(o["grip"].is_number());
    CHECK(o["img_up"].is_string());
    CHECK(o["img_down"].is_string());
  }

  TEST_CASE("record discard and disconnect write nothing") {
    TempDir dir("teleop_discard");
    TeleopSession s(small_options(dir.path()));
    CHECK(only(s.handle_message(R"({"type":"record","action":"start"})"))["recording"] == true);
    for (int i = 0; i < 5; ++i) s.tick();
    CHECK(s.recorded_steps() == 5);
    CHECK(only(s.handle_message(R"({"type":"record","action":"discard"})"))["recording"] == false);
    s.handle_message(R"({"type":"record","action":"start"})");
    for (int i = 0; i < 5; ++i) s.tick();
    s.disconnect();
    CHECK_FALSE(s.recording());
    CHECK(list_episodes(dir.path()).empty());
  }

  TEST_CASE("a recorded pick is a valid training episode") {
    TempDir dir("teleop_pick");
    const TeleopOptions opts = small_options(dir / "data");
    TeleopSession s(opts);
    s.handle_message(R"({"type":"reset","state":1,"seed":4})");
    s.handle_message(R"({"type":"record","action":"start"})");
    scripted_pick(s, opts.sim);
    CHECK(s.env().episode_outcome() == Outcome::Success);
    const json status = only(s.handle_message(R"({"type":"record","action":"stop"})"));
    REQUIRE(status.contains("episode"));
    const EpisodeRecord rec = read_episode(dir / "data", status["episode"].get<int>());
    CHECK_NOTHROW(rec.validate());
    CHECK(rec.meta.source == EpisodeSource::Teleop);
    CHECK(rec.meta.outcome == Outcome::Success);
    CHECK(rec.meta.state_id == 1);
    CHECK(rec.length() == s.env().t());

    PolicyConfig c = testing::miniature_config(Variant::EpactEE);
    c.image_width = c.image_height = 32;
    c.steps = 3;
    c.batch = 2;
    c.n_val = 0;
    const Checkpoint ck = train_policy(c, dir / "data");
    CHECK(ck.history.size() >= 1);
  }

  TEST_CASE("websocket service streams at the requested rate") {
    namespace net = boost::asio;
    namespace ws = boost::beast::websocket;
    TempDir dir("teleop_ws");
    TeleopServer server(small_options(dir / "data"), 0);
    const int port = server.port();
    CHECK(port > 0);
    std::thread loop([&] { server.run(); });

    net::io_context ioc;
    net::ip::tcp::resolver resolver(ioc);
    ws::stream<net::ip::tcp::socket> client(ioc);
    net::connect(client.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    client.handshake("127.0.0.1", "/");
    boost::beast::flat_buffer buf;
    auto next = [&] {
      buf.clear();
      client.read(buf);
      return json::parse(boost::beast::buffers_to_string(buf.data()));
    };

    // Second client is turned away while the first is connected.
    {
      ws::stream<net::ip::tcp::socket> other(ioc);
      net::connect(other.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
      other.handshake("127.0.0.1", "/");
      boost::beast::flat_buffer b2;
      other.read(b2);
      CHECK(json::parse(boost::beast::buffers_to_string(b2.data()))["type"] == "error");
    }

    client.write(net::buffer(std::string(R"({"type":"reset","state":1,"seed":2})")));
    std::vector<std::chrono::steady_clock::time_point> stamps;
    const auto start = std::chrono::steady_clock::now();
    while (std::chrono::steady_clock::now() - start < std::chrono::seconds(3)) {
      const json m = next();
      if (m["type"] == "obs" && m["t"].get<int>() > 0) stamps.push_back(std::chrono::steady_clock::now());
    }
    REQUIRE(stamps.size() > 10);
    const double span = std::chrono::duration<double>(stamps.back() - stamps.front()).count();
    const double hz = double(stamps.size() - 1) / span;
    MESSAGE("observation rate " << hz << " Hz");
    CHECK(hz == doctest::Approx(15.0).epsilon(0.10));
    const json decoded = next();
    if (decoded["type"] == "obs") {
      const std::string b64 = decoded["img_up"];
      CHECK(b64.size() > 20);
    }

    client.write(net::buffer(std::string(R"({"type":"record","action":"start"})")));
    client.write(net::buffer(std::string(R"({"type":"cmd","dq":[0.005,0,0,0],"grip":1.0})")));
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    client.write(net::buffer(std::string(R"({"type":"record","action":"stop"})")));
    json saved;
    for (int i = 0; i < 100 && !saved.contains("episode"); ++i) {
      const json m = next();
      if (m["type"] == "status") saved = m;
      CHECK(m["type"] != "error");
    }
    REQUIRE(saved.contains("episode"));
    CHECK(read_episode(dir / "data", saved["episode"].get<int>()).meta.source == EpisodeSource::Teleop);

    client.close(ws::close_code::normal);
    server.stop();
    loop.join();
  }
}
