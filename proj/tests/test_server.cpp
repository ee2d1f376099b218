#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <httplib.h>

#include <thread>

#include "ien/server.hpp"

using namespace ien;

namespace {

Model small_model(bool rgb = false) {
  IenConfig c = IenConfig::reference(rgb ? 3 : 1, true);
  c.convlstm_hidden = 3;
  c.affordance_features = 3;
  c.encoder_widths = {4, 6, 8};
  c.depth = 2;
  return {c, init_params(c, 17)};
}

struct FakeClock {
  double now = 100.0;
  SessionManager::Clock fn() {
    return [this] { return now; };
  }
};

json point(double x, double y, double t) { return {{"x", x}, {"y", y}, {"t", t}}; }

int api_status(const std::function<void()>& call) {
  try {
    call();
  } catch (const ApiError& e) {
    return e.status();
  }
  return 200;
}

}  // namespace

TEST_CASE("session creation contract") {
  FakeClock clock;
  SessionManager m(small_model(), {}, clock.fn());
  const json s = m.create({{"seed", 42}, {"n_objects", 2}});
  CHECK(s.at("id").get<std::string>().size() == 16);
  CHECK(s.at("bboxes").size() == 2);
  CHECK(s.at("grid") == json::array({64, 64}));
  CHECK(s.at("threshold") == 0.6);
  CHECK(s.at("max_frames") == 15);
  CHECK(s.at("scene") == scene_to_json(generate_scene(2, {}, 42)));
  CHECK(m.create({{"seed", 42}, {"n_objects", 2}}).at("scene") == s.at("scene"));
  CHECK(m.create({{"seed", 42}, {"n_objects", 2}}).at("id") != s.at("id"));
  CHECK(m.size() == 3);

  CHECK(api_status([&] { m.create({{"n_objects", 4}}); }) == 400);
  CHECK(api_status([&] { m.create({{"seed", "x"}}); }) == 400);
  CHECK(api_status([&] { m.create({{"threshold", 0.0}}); }) == 400);
  CHECK(api_status([&] { m.create(json::array()); }) == 400);
  CHECK(m.create({{"threshold", 0.8}}).at("threshold") == 0.8);
}

TEST_CASE("frames follow the offline pipeline exactly") {
  FakeClock clock;
  SessionManager m(small_model(), {}, clock.fn());
  const std::string id = m.create({{"seed", 5}, {"n_objects", 3}}).at("id");
  const Scene scene = generate_scene(3, {}, 5);
  Trajectory traj;
  for (int k = 0; k < 6; ++k) {
    const double x = 32.0 + k, y = 58.0 - 2.0 * k, t = k / 15.0;
    const json r = m.frame(id, point(x, y, t));
    CHECK(r.at("frame") == k + 1);
    CHECK(r.at("ignored") == false);
    CHECK(r.at("heatmap").size() == 64 * 64);
    traj.frames.push_back(pointer_hand_state(scene, x, y, t));
    const Model& model = m.model();
    const TensorF heat = predict(model.params, model.config, render_affordance_channels(scene),
                                 render_sequence(traj, RenderMode::DepthLike, scene.grid, scene.seed));
    const auto probs = object_probabilities(heat, detected_objects(scene));
    double total = 0.0;
    for (std::size_t o = 0; o < probs.size(); ++o) {
      CHECK(r.at("probabilities")[o].at("probability").get<double>() == probs[o].probability);
      total += probs[o].probability;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
  const json full = m.get(id);
  CHECK(full.at("frames_received") == 6);
  CHECK(full.at("trace").size() == 6);
}

TEST_CASE("frames beyond the cap are acknowledged and ignored") {
  FakeClock clock;
  SessionManager m(small_model(), {}, clock.fn());
  const std::string id = m.create({{"seed", 1}}).at("id");
  json last;
  for (int k = 0; k < 15; ++k) last = m.frame(id, point(30, 60 - k, k / 15.0));
  for (int k = 15; k < 18; ++k) {
    const json r = m.frame(id, point(10, 10, k / 15.0));
    CHECK(r.at("frame") == k + 1);
    CHECK(r.at("ignored") == true);
    CHECK(r.at("probabilities") == last.at("probabilities"));
  }
  const json full = m.get(id);
  CHECK(full.at("frames_received") == 18);
  CHECK(full.at("trace").size() == 15);
}

TEST_CASE("the first decision is latched") {
  FakeClock clock;
  SessionManager m(small_model(), {}, clock.fn());
  // Any two-object distribution has a member above 0.34, so frame 1 commits.
  const std::string id = m.create({{"seed", 3}, {"threshold", 0.34}}).at("id");
  const json first = m.frame(id, point(20, 60, 0.0));
  REQUIRE(first.at("decision").is_object());
  CHECK(first.at("decision").at("frame") == 1);
  for (int k = 1; k < 10; ++k) {
    const json r = m.frame(id, point(20 + 4.0 * k, 60 - 4.0 * k, k / 15.0));
    CHECK(r.at("decision") == first.at("decision"));
  }
  CHECK(m.get(id).at("decision") == first.at("decision"));

  const std::string strict = m.create({{"seed", 3}, {"threshold", 1.0}}).at("id");
  for (int k = 0; k < 5; ++k) CHECK(m.frame(strict, point(30, 50, k / 15.0)).at("decision").is_null());
}

TEST_CASE("interleaved sessions do not share state") {
  FakeClock clock;
  SessionManager m(small_model(), {}, clock.fn());
  SessionManager solo(small_model(), {}, clock.fn());
  const std::string a = m.create({{"seed", 8}}).at("id");
  const std::string b = m.create({{"seed", 9}, {"n_objects", 3}}).at("id");
  const std::string a_ref = solo.create({{"seed", 8}}).at("id");
  const std::string b_ref = solo.create({{"seed", 9}, {"n_objects", 3}}).at("id");
  for (int k = 0; k < 5; ++k) {
    const json pa = point(20 + k, 60 - 3 * k, k / 15.0);
    const json pb = point(45 - k, 61 - 2 * k, k / 15.0);
    CHECK(m.frame(a, pa).at("probabilities") == solo.frame(a_ref, pa).at("probabilities"));
    CHECK(m.frame(b, pb).at("probabilities") == solo.frame(b_ref, pb).at("probabilities"));
  }
  CHECK(m.get(a).at("trace") == solo.get(a_ref).at("trace"));
  CHECK(m.get(b).at("trace") == solo.get(b_ref).at("trace"));
}

TEST_CASE("concurrent requests on separate sessions are isolated") {
  SessionManager m(small_model(), {});
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(m.create({{"seed", 20 + i}}).at("id"));
  std::vector<json> traces(3);
  std::vector<std::thread> workers;
  for (int i = 0; i < 3; ++i) {
    workers.emplace_back([&, i] {
      for (int k = 0; k < 4; ++k) m.frame(ids[static_cast<std::size_t>(i)], point(25 + i, 60 - 2 * k, k / 15.0));
      traces[static_cast<std::size_t>(i)] = m.get(ids[static_cast<std::size_t>(i)]).at("trace");
    });
  }
  for (auto& w : workers) w.join();
  SessionManager solo(small_model(), {});
  for (int i = 0; i < 3; ++i) {
    const std::string id = solo.create({{"seed", 20 + i}}).at("id");
    for (int k = 0; k < 4; ++k) solo.frame(id, point(25 + i, 60 - 2 * k, k / 15.0));
    CHECK(solo.get(id).at("trace") == traces[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("idle sessions expire and deleted sessions are gone") {
  FakeClock clock;
  ServeOptions opt;
  opt.idle_timeout_s = 60;
  SessionManager m(small_model(), opt, clock.fn());
  const std::string a = m.create({{"seed", 1}}).at("id");
  const std::string b = m.create({{"seed", 2}}).at("id");
  clock.now += 50;
  m.frame(b, point(30, 60, 0));
  clock.now += 20;
  CHECK(api_status([&] { m.frame(a, point(30, 60, 0.1)); }) == 404);
  CHECK(api_status([&] { m.get(a); }) == 404);
  CHECK(api_status([&] { m.frame(b, point(30, 59, 0.1)); }) == 200);
  m.remove(b);
  CHECK(api_status([&] { m.get(b); }) == 404);
  CHECK(api_status([&] { m.remove(b); }) == 404);
  CHECK(m.size() == 0);
}

TEST_CASE("malformed frames are rejected") {
  FakeClock clock;
  SessionManager m(small_model(), {}, clock.fn());
  const std::string id = m.create({{"seed", 1}}).at("id");
  CHECK(api_status([&] { m.frame(id, point(64.5, 10, 0)); }) == 400);
  CHECK(api_status([&] { m.frame(id, point(10, -1, 0)); }) == 400);
  CHECK(api_status([&] { m.frame(id, point(10, 10, -0.5)); }) == 400);
  CHECK(api_status([&] { m.frame(id, {{"x", 3}}); }) == 400);
  CHECK(api_status([&] { m.frame(id, {{"x", "a"}, {"y", 1}, {"t", 0}}); }) == 400);
  CHECK(m.get(id).at("frames_received") == 0);
}

TEST_CASE("pointer hand state follows the reach schedule") {
  const Scene scene = generate_scene(2, {}, 4);
  const HandState start = pointer_hand_state(scene, 32, 60, 0.0);
  const HandState later = pointer_hand_state(scene, 32, 60, 1.0);
  CHECK(later.scale > start.scale);
  CHECK(start.aperture >= 0.0);
  CHECK(later.aperture <= 1.0);
  for (const auto& o : scene.objects) {
    const auto [cx, cy] = o.bbox.centroid();
    CHECK(pointer_hand_state(scene, cx, cy, 0.5).preshape == grasp_preshape(o));
  }
}

TEST_CASE("HTTP round trip") {
  FakeClock clock;
  ServeOptions opt;
  opt.host = "127.0.0.1";
  opt.idle_timeout_s = 30;
  HttpServer server(small_model(), opt, clock.fn());
  const int port = server.bind_any_port();
  REQUIRE(port > 0);
  std::thread th([&] { server.listen_after_bind(); });
  REQUIRE(server.wait_until_ready(std::chrono::seconds(5)));

  httplib::Client cli("127.0.0.1", port);
  auto health = cli.Get("/api/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body).at("status") == "ok");

  auto created = cli.Post("/api/session", R"({"seed": 42, "n_objects": 2})", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  CHECK(created->get_header_value("Content-Type").find("application/json") != std::string::npos);
  const json s = json::parse(created->body);
  const std::string id = s.at("id");
  CHECK(s.at("bboxes").size() == 2);

  auto f = cli.Post("/api/session/" + id + "/frame", R"({"x": 30.5, "y": 41.0, "t": 0.4})", "application/json");
  REQUIRE(f);
  CHECK(f->status == 200);
  const json fr = json::parse(f->body);
  CHECK(fr.at("probabilities").size() == 2);
  CHECK((fr.at("decision").is_null() || fr.at("decision").is_object()));

  auto g = cli.Get("/api/session/" + id);
  REQUIRE(g);
  CHECK(g->status == 200);
  CHECK(json::parse(g->body).at("trace").size() == 1);

  auto bad = cli.Post("/api/session/" + id + "/frame", "{not json", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(json::parse(bad->body).contains("code"));
  CHECK(json::parse(bad->body).contains("message"));

  auto missing = cli.Get("/api/session/ffff");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body).at("code") == "not_found");

  auto unknown_route = cli.Get("/api/nothing-here");
  REQUIRE(unknown_route);
  CHECK(unknown_route->status == 404);
  CHECK(json::parse(unknown_route->body).contains("message"));

  clock.now += 31;
  auto expired = cli.Post("/api/session/" + id + "/frame", R"({"x": 30, "y": 40, "t": 0.5})", "application/json");
  REQUIRE(expired);
  CHECK(expired->status == 404);

  const std::string id2 = json::parse(cli.Post("/api/session", "{}", "application/json")->body).at("id");
  auto del = cli.Delete("/api/session/" + id2);
  REQUIRE(del);
  CHECK(del->status == 200);
  CHECK(cli.Get("/api/session/" + id2)->status == 404);

  auto page = cli.Get("/");
  REQUIRE(page);
  CHECK(page->status == 200);

  server.stop();
  th.join();
}

TEST_CASE("RGB checkpoints serve hand-extracted frames") {
  SessionManager m(small_model(true), {});
  CHECK(m.mode() == RenderMode::RgbHandExtracted);
  const std::string id = m.create({{"seed", 2}}).at("id");
  CHECK(m.frame(id, point(30, 60, 0)).at("probabilities").size() == 2);
}
