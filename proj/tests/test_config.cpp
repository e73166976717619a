#include <doctest.h>

#include <fstream>

#include "epact/config.hpp"
#include "epact/errors.hpp"
#include "support.hpp"

using namespace epact;
using epact::testing::TempDir;

TEST_SUITE("config") {
  TEST_CASE("integer lists accept ranges and commas") {
    CHECK(parse_int_list("1,2,3") == std::vector<int>{1, 2, 3});
    CHECK(parse_int_list("0-5") == std::vector<int>{0, 1, 2, 3, 4, 5});
    CHECK(parse_int_list(" 0, 2-4 ") == std::vector<int>{0, 2, 3, 4});
    CHECK(format_int_list({1, 5}) == "1,5");
    CHECK_THROWS_AS(parse_int_list(""), Error);
    CHECK_THROWS_AS(parse_int_list("3-1"), Error);
    CHECK_THROWS_AS(parse_int_list("1,,2"), Error);
    CHECK_THROWS_AS(parse_int_list("a"), Error);
  }

  TEST_CASE("camera lists use canonical names") {
    CHECK(parse_cameras("up,down") == std::vector<std::string>{"wrist_up", "wrist_down"});
    CHECK(parse_cameras("wrist_down") == std::vector<std::string>{"wrist_down"});
    CHECK_THROWS_AS(parse_cameras("up,up"), Error);
    CHECK_THROWS_AS(parse_cameras("side"), Error);
  }

  TEST_CASE("keys set and get through text") {
    RunConfig c;
    c.set("train.beta", "2.5");
    c.set("policy.variant", "epact-l");
    c.set("eval.states", "0-2");
    c.set("eval.ensemble", "off");
    CHECK(c.policy.beta == 2.5);
    CHECK(c.policy.variant == Variant::EpactL);
    CHECK(c.eval_states == std::vector<int>{0, 1, 2});
    CHECK_FALSE(c.ensemble);
    CHECK(c.get("train.beta") == "2.5");
    CHECK(c.get("policy.variant") == "epact_l");
    try {
      c.set("train.betta", "1");
      FAIL("expected InvalidConfig");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InvalidConfig);
    }
    CHECK_THROWS_AS(c.set("train.steps", "12x"), Error);
    CHECK_THROWS_AS(c.set("eval.seed", "-1"), Error);
    CHECK_THROWS_AS(c.set("policy.variant", "big"), Error);
  }

  TEST_CASE("defaults, then file, then overrides") {
    TempDir dir("cfg");
    {
      std::ofstream f(dir / "run.ini");
      f << "[train]\nbeta = 3\nsteps = 50\n\n[eval]\ntrials = 4\n";
    }
    RunConfig c;
    c.load_file(dir / "run.ini");
    c.set("train.steps", "70");
    CHECK(c.policy.beta == 3.0);
    CHECK(c.policy.steps == 70);
    CHECK(c.eval_trials == 4);
    CHECK(c.policy.gamma == 1.0);
    {
      std::ofstream f(dir / "bad.ini");
      f << "[train]\nbogus = 1\n";
    }
    CHECK_THROWS_AS(RunConfig().load_file(dir / "bad.ini"), Error);
  }

  TEST_CASE("written configs reload to the same values") {
    TempDir dir("cfg_write");
    RunConfig c;
    c.set("policy.cameras", "down");
    c.set("train.lr", "0.00025");
    c.set("sim.image_width", "64");
    c.set("collect.states", "1-3");
    c.write(dir.path());
    CHECK(std::filesystem::exists(dir / "run_config.json"));
    RunConfig back;
    back.load_file(dir / "run_config.ini");
    for (const auto& key : RunConfig::keys()) CHECK_MESSAGE(back.get(key) == c.get(key), key);
    CHECK(back.to_json() == c.to_json());
    CHECK(back.policy_config().image_width == 64);
  }

  TEST_CASE("validation rejects states outside the table") {
    RunConfig c;
    CHECK_NOTHROW(c.validate());
    c.set("collect.states", "1,9");
    try {
      c.validate();
      FAIL("expected InvalidState");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InvalidState);
    }
    RunConfig d;
    d.set("serve.fps", "0");
    CHECK_THROWS_AS(d.validate(), Error);
  }
}
