#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include "ien/decision.hpp"

namespace ien {

// Request failure carried to the HTTP layer as {code, message}.
class ApiError : public Error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : Error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path static_dir;  // empty serves a placeholder page
  double threshold = 0.6;
  double idle_timeout_s = 600.0;
  std::size_t max_frames = 15;
};

// Live inference sessions, independent of the transport. Each session owns
// its scene and frame sequence; requests for one session are serialised by a
// per-session mutex, and the model is shared read-only.
class SessionManager {
 public:
  using Clock = std::function<double()>;  // seconds

  SessionManager(Model model, ServeOptions options, Clock clock = {});

  // {"seed"?: int, "n_objects"?: 2|3, "threshold"?: (0,1]}
  json create(const json& body);
  // {"x": px, "y": px, "t": seconds since the reach began}
  json frame(const std::string& id, const json& body);
  json get(const std::string& id);
  void remove(const std::string& id);

  std::size_t size();
  const Model& model() const { return model_; }
  RenderMode mode() const { return mode_; }

 private:
  struct Session;

  std::shared_ptr<Session> find(const std::string& id);
  void expire_idle(double now);
  std::string next_id();

  Model model_;
  ServeOptions options_;
  Clock clock_;
  RenderMode mode_;
  std::mutex mutex_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t id_state_;
};

// Hand pose for a pointer sample: aperture and scale follow the reach
// schedule over t in [0, 2] s, and the preshape is that of the nearest object.
HandState pointer_hand_state(const Scene& scene, double x, double y, double t);

class HttpServer {
 public:
  HttpServer(Model model, ServeOptions options, SessionManager::Clock clock = {});
  ~HttpServer();

  // Binds and serves until stop(). Returns false if the port cannot be bound.
  bool listen();
  // Binds to an ephemeral port (for tests); serve with listen_after_bind().
  int bind_any_port();
  bool listen_after_bind();
  void stop();
  bool wait_until_ready(std::chrono::milliseconds timeout);

  SessionManager& sessions();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ien
