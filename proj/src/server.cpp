#include "ien/server.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <thread>

#include "httplib.h"
#include "ien/rng.hpp"

namespace ien {

namespace {

double steady_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

ApiError bad_request(const std::string& message) { return ApiError(400, "bad_request", message); }

double number_field(const json& body, const char* key) {
  const auto it = body.find(key);
  if (it == body.end() || !it->is_number()) throw bad_request(std::string("field '") + key + "' must be a number");
  const double v = it->get<double>();
  if (!std::isfinite(v)) throw bad_request(std::string("field '") + key + "' must be finite");
  return v;
}

json probabilities_json(const std::vector<ObjectProbability>& probs) {
  json out = json::array();
  for (const auto& p : probs) {
    out.push_back({{"object_id", p.object_id}, {"confidence", p.confidence}, {"probability", p.probability}});
  }
  return out;
}

json bboxes_json(const Scene& scene) {
  json out = json::array();
  for (const auto& o : scene.objects) {
    out.push_back({{"object_id", o.id},
                   {"bbox", rect_to_json(o.bbox)},
                   {"grasp", grasp_preshape(o) == Preshape::HandlePre ? "handle" : "wrap"}});
  }
  return out;
}

}  // namespace

HandState pointer_hand_state(const Scene& scene, double x, double y, double t) {
  HandState s;
  s.position = {x, y};
  const double tau = std::clamp(t / kTrialDurationS, 0.0, 1.0);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& o : scene.objects) {
    const auto [cx, cy] = o.bbox.centroid();
    const double d = std::hypot(cx - x, cy - y);
    if (d < best) {
      best = d;
      s.preshape = grasp_preshape(o);
    }
  }
  const ReachParams reach;
  const double r0 = 0.5 * (reach.start_scale_min + reach.start_scale_max);
  const double r1 = 0.5 * (reach.end_scale_min + reach.end_scale_max);
  s.aperture = reach_aperture(s.preshape, minimum_jerk(tau));
  s.scale = r0 + (r1 - r0) * tau;
  return s;
}

struct SessionManager::Session {
  std::mutex mutex;
  std::string id;
  Scene scene;
  TensorF channels;
  double threshold = 0.6;
  Trajectory pointer;  // one entry per accepted frame
  std::size_t frames_received = 0;
  std::vector<std::vector<ObjectProbability>> trace;
  std::vector<bool> degenerate;
  std::optional<Decision> decision;
  double created_at = 0.0;
  double last_active = 0.0;
  bool removed = false;

  json decision_json() const {
    if (!decision) return nullptr;
    return {{"object_id", *decision->chosen}, {"frame", decision->frame_index}};
  }
};

SessionManager::SessionManager(Model model, ServeOptions options, Clock clock)
    : model_(std::move(model)), options_(std::move(options)), clock_(std::move(clock)) {
  if (!clock_) clock_ = steady_seconds;
  model_.config.validate();
  mode_ = model_.config.hand_channels == 1 ? RenderMode::DepthLike : RenderMode::RgbHandExtracted;
  if (!(options_.threshold > 0.0 && options_.threshold <= 1.0)) throw ConfigMismatch("threshold must be in (0, 1]");
  options_.max_frames = std::min(options_.max_frames, model_.config.max_sequence);
  std::random_device rd;
  id_state_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

std::string SessionManager::next_id() {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(mix_seed(id_state_++, 0)));
  return buf;
}

void SessionManager::expire_idle(double now) {
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_active > options_.idle_timeout_s) {
      it->second->removed = true;
      it = sessions_.erase(it);
    } else {
      ++it;
    }
  }
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) {
  std::lock_guard lock(mutex_);
  expire_idle(clock_());
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ApiError(404, "not_found", "no session '" + id + "' (unknown or expired)");
  return it->second;
}

std::size_t SessionManager::size() {
  std::lock_guard lock(mutex_);
  expire_idle(clock_());
  return sessions_.size();
}

json SessionManager::create(const json& body) {
  if (!body.is_object()) throw bad_request("body must be a JSON object");
  int n_objects = 2;
  if (body.contains("n_objects")) {
    if (!body["n_objects"].is_number_integer()) throw bad_request("n_objects must be an integer");
    n_objects = body["n_objects"].get<int>();
    if (n_objects != 2 && n_objects != 3) throw bad_request("n_objects must be 2 or 3");
  }
  std::uint64_t seed = 0;
  if (body.contains("seed")) {
    if (!body["seed"].is_number_integer()) throw bad_request("seed must be an integer");
    seed = body["seed"].get<std::uint64_t>();
  } else {
    seed = std::random_device{}();
  }
  auto session = std::make_shared<Session>();
  session->threshold = options_.threshold;
  if (body.contains("threshold")) {
    session->threshold = number_field(body, "threshold");
    if (!(session->threshold > 0.0 && session->threshold <= 1.0)) throw bad_request("threshold must be in (0, 1]");
  }
  session->scene = generate_scene(n_objects, model_.config.grid, seed);
  session->channels = render_affordance_channels(session->scene);
  session->pointer.start = {};
  session->created_at = session->last_active = clock_();

  json out;
  {
    std::lock_guard lock(mutex_);
    expire_idle(session->created_at);
    session->id = next_id();
    sessions_.emplace(session->id, session);
  }
  const GridSize grid = session->scene.grid;
  return {{"id", session->id},
          {"scene", scene_to_json(session->scene)},
          {"grid", {grid.height, grid.width}},
          {"bboxes", bboxes_json(session->scene)},
          {"threshold", session->threshold},
          {"max_frames", options_.max_frames}};
}

json SessionManager::frame(const std::string& id, const json& body) {
  if (!body.is_object()) throw bad_request("body must be a JSON object");
  const double x = number_field(body, "x");
  const double y = number_field(body, "y");
  const double t = number_field(body, "t");
  if (t < 0.0) throw bad_request("t must be non-negative");

  const std::shared_ptr<Session> s = find(id);
  std::lock_guard lock(s->mutex);
  if (s->removed) throw ApiError(404, "not_found", "session '" + id + "' was closed");
  const GridSize grid = s->scene.grid;
  if (x < 0.0 || y < 0.0 || x > grid.width - 1 || y > grid.height - 1) throw bad_request("pointer is outside the grid");
  s->last_active = clock_();
  ++s->frames_received;

  if (s->frames_received > options_.max_frames) {
    return {{"frame", s->frames_received},
            {"ignored", true},
            {"probabilities", probabilities_json(s->trace.back())},
            {"decision", s->decision_json()}};
  }

  s->pointer.frames.push_back(pointer_hand_state(s->scene, x, y, t));
  // Rendering the whole prefix keeps frames bit-identical to render_sequence.
  const TensorF hand = render_sequence(s->pointer, mode_, grid, s->scene.seed);
  const TensorF heatmap = predict(model_.params, model_.config, s->channels, hand);
  bool degenerate = false;
  const auto probs = object_probabilities(heatmap, detected_objects(s->scene), &degenerate);
  s->trace.push_back(probs);
  s->degenerate.push_back(degenerate);
  if (!s->decision) {
    Decision d = decide(probs, s->threshold, degenerate, s->frames_received);
    if (d.chosen) s->decision = std::move(d);
  }
  std::vector<float> heat(heatmap.data().begin(), heatmap.data().end());
  return {{"frame", s->frames_received},
          {"ignored", false},
          {"probabilities", probabilities_json(probs)},
          {"decision", s->decision_json()},
          {"heatmap", heat}};
}

json SessionManager::get(const std::string& id) {
  const std::shared_ptr<Session> s = find(id);
  std::lock_guard lock(s->mutex);
  json trace = json::array();
  for (std::size_t k = 0; k < s->trace.size(); ++k) {
    trace.push_back({{"frame", k + 1}, {"degenerate", static_cast<bool>(s->degenerate[k])},
                     {"probabilities", probabilities_json(s->trace[k])}});
  }
  const GridSize grid = s->scene.grid;
  return {{"id", s->id},
          {"scene", scene_to_json(s->scene)},
          {"grid", {grid.height, grid.width}},
          {"bboxes", bboxes_json(s->scene)},
          {"threshold", s->threshold},
          {"frames_received", s->frames_received},
          {"trace", trace},
          {"decision", s->decision_json()},
          {"created_at", s->created_at},
          {"last_active", s->last_active}};
}

void SessionManager::remove(const std::string& id) {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lock(mutex_);
    expire_idle(clock_());
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ApiError(404, "not_found", "no session '" + id + "'");
    s = it->second;
    sessions_.erase(it);
  }
  std::lock_guard lock(s->mutex);
  s->removed = true;
}

namespace {

constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><title>ien</title></head><body>"
    "<p>The intention estimation API is running. Build the web UI and pass <code>--static-dir</code> to serve it "
    "here.</p></body></html>";

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw bad_request(std::string("body is not valid JSON: ") + e.what());
  }
}

template <typename Handler>
httplib::Server::Handler guarded(Handler handler) {
  return [handler](const httplib::Request& req, httplib::Response& res) {
    try {
      handler(req, res);
    } catch (const ApiError& e) {
      send_json(res, e.status(), {{"code", e.code()}, {"message", e.what()}});
    } catch (const Error& e) {
      send_json(res, 400, {{"code", "invalid"}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"code", "internal"}, {"message", e.what()}});
    }
  };
}

}  // namespace

struct HttpServer::Impl {
  ServeOptions options;
  SessionManager sessions;
  httplib::Server server;

  Impl(Model model, ServeOptions opts, SessionManager::Clock clock)
      : options(opts), sessions(std::move(model), std::move(opts), std::move(clock)) {
    server.Post("/api/session", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  send_json(res, 201, sessions.create(parse_body(req)));
                }));
    server.Post("/api/session/:id/frame", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  send_json(res, 200, sessions.frame(req.path_params.at("id"), parse_body(req)));
                }));
    server.Get("/api/session/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 send_json(res, 200, sessions.get(req.path_params.at("id")));
               }));
    server.Delete("/api/session/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
                    sessions.remove(req.path_params.at("id"));
                    send_json(res, 200, {{"deleted", req.path_params.at("id")}});
                  }));
    server.Get("/api/health", guarded([this](const httplib::Request&, httplib::Response& res) {
                 send_json(res, 200, {{"status", "ok"},
                                      {"mode", to_string(sessions.mode())},
                                      {"threshold", options.threshold},
                                      {"config", sessions.model().config.to_json()}});
               }));
    if (!options.static_dir.empty()) {
      if (!server.set_mount_point("/", options.static_dir.string())) {
        throw ConfigMismatch("static directory '" + options.static_dir.string() + "' does not exist");
      }
    } else {
      server.Get("/", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(kPlaceholderPage, "text/html");
      });
    }
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        res.set_content(json{{"code", res.status == 404 ? "not_found" : "error"},
                             {"message", httplib::status_message(res.status)}}
                            .dump(),
                        "application/json");
      }
    });
  }
};

HttpServer::HttpServer(Model model, ServeOptions options, SessionManager::Clock clock)
    : impl_(std::make_unique<Impl>(std::move(model), std::move(options), std::move(clock))) {}

HttpServer::~HttpServer() { stop(); }

bool HttpServer::listen() { return impl_->server.listen(impl_->options.host, impl_->options.port); }

int HttpServer::bind_any_port() { return impl_->server.bind_to_any_port(impl_->options.host); }

bool HttpServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

bool HttpServer::wait_until_ready(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (!impl_->server.is_running()) {
    if (std::chrono::steady_clock::now() > deadline) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return true;
}

SessionManager& HttpServer::sessions() { return impl_->sessions; }

}  // namespace ien
