#include "cli.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <ostream>

#include "ien/decision.hpp"
#include "ien/server.hpp"
#include "ien/trainer.hpp"

namespace ien::cli {

namespace {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

class Logger {
 public:
  explicit Logger(std::ostream& err) : err_(err) {}
  void set(Level level) { level_ = level; }
  void operator()(Level level, const std::string& msg) const {
    static const char* names[] = {"error", "warn", "info", "debug"};
    if (level <= level_) err_ << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
  }

 private:
  std::ostream& err_;
  Level level_ = Level::Info;
};

// Usage and configuration errors map to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
  std::string log_level = "info";
};

std::filesystem::path data_root() {
  const char* dir = std::getenv("IEN_DATA_DIR");
  return dir && *dir ? std::filesystem::path(dir) : std::filesystem::path(".");
}

// Relative outputs land under IEN_DATA_DIR when it is set.
std::filesystem::path output_path(const std::string& given, const std::string& fallback) {
  const std::filesystem::path p = given.empty() ? std::filesystem::path(fallback) : std::filesystem::path(given);
  return p.is_absolute() ? p : data_root() / p;
}

// Inputs are taken as given, then looked up under IEN_DATA_DIR.
std::filesystem::path input_path(const std::string& given) {
  const std::filesystem::path p(given);
  if (std::filesystem::exists(p) || p.is_absolute()) return p;
  const std::filesystem::path rooted = data_root() / p;
  return std::filesystem::exists(rooted) ? rooted : p;
}

json read_json_file(const std::string& path) {
  std::ifstream in(input_path(path));
  if (!in) throw UsageError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

struct GenDataArgs {
  std::size_t trials = 156;
  std::string mode = "depth";
  bool noise_free = false;
};

int gen_data(const Globals& g, const GenDataArgs& a, std::ostream& out, const Logger& log) {
  if (a.trials == 0) throw UsageError("--trials must be at least 1");
  DatasetConfig dc;
  dc.n_trials = a.trials;
  dc.mode = render_mode_from_string(a.mode);
  dc.seed = g.seed;
  if (a.noise_free) dc.noise = DetectorNoise::none();
  if (!g.config.empty()) {
    const json j = read_json_file(g.config);
    const json& m = j.contains("model") ? j["model"] : j;
    if (m.contains("grid")) dc.grid = {m["grid"].at(0).get<int>(), m["grid"].at(1).get<int>()};
  }
  const auto path = output_path(g.out, "dataset.ien");
  log(Level::Info, "building " + std::to_string(a.trials) + " trials (" + a.mode + ")");
  const Dataset d = build_dataset(dc);
  ensure_parent(path);
  save_dataset(d, path);
  json summary = dataset_summary(d);
  summary["path"] = path.string();
  out << summary.dump(2) << '\n';
  return 0;
}

struct TrainArgs {
  std::string data;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::size_t max_steps = 0;
  std::size_t eval_every = 0;
  std::size_t overfit = 0;
  bool no_affordance = false;
};

// Samples for the overfit smoke mode: the first window of each of the first n trials.
std::vector<WindowedSample> overfit_samples(const Dataset& d, std::size_t n) {
  if (n > d.trials.size()) throw UsageError("--overfit exceeds the number of trials in the dataset");
  std::vector<WindowedSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(slide_windows(d.trials[i], d.config.window, d.config.sigma).front());
  return out;
}

int train_cmd(const Globals& g, const TrainArgs& a, std::ostream& out, const Logger& log) {
  if (a.data.empty()) throw UsageError("--data is required");
  const Dataset d = load_dataset(input_path(a.data));
  IenConfig mc = IenConfig::reference(channel_count(d.config.mode), !a.no_affordance);
  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.lr;
  tc.max_steps = a.max_steps;
  tc.eval_every = a.eval_every;
  if (!g.config.empty()) {
    const json j = read_json_file(g.config);
    try {
      mc = IenConfig::from_json(j.contains("model") ? j["model"] : j);
      if (j.contains("train")) tc = TrainConfig::from_json(j["train"]);
    } catch (const ConfigMismatch& e) {
      throw UsageError(e.what());
    }
    if (a.no_affordance) mc.use_affordance = false;
  }
  tc.seed = g.seed;
  if (mc.grid != d.config.grid) {
    throw ConfigMismatch("dataset grid " + std::to_string(d.config.grid.height) + "x" +
                         std::to_string(d.config.grid.width) + " does not match config grid " +
                         std::to_string(mc.grid.height) + "x" + std::to_string(mc.grid.width));
  }
  if (mc.hand_channels != channel_count(d.config.mode)) {
    throw ConfigMismatch("dataset mode '" + to_string(d.config.mode) + "' has " +
                         std::to_string(channel_count(d.config.mode)) + " hand channels, config expects " +
                         std::to_string(mc.hand_channels));
  }
  if (d.config.window.length > mc.max_sequence) throw ConfigMismatch("dataset windows exceed max_sequence");

  std::vector<WindowedSample> overfit;
  SampleSet samples;
  if (a.overfit > 0) {
    overfit = overfit_samples(d, a.overfit);
    samples = sample_set(overfit);
    tc.batch_size = a.overfit;
    if (tc.max_steps == 0) tc.max_steps = 500;
    tc.epochs = tc.max_steps;
    tc.learning_rate = a.lr == 1e-3 ? 3e-3 : a.lr;
    if (tc.target_loss == 0.0) tc.target_loss = 0.04;
  } else {
    samples = sample_set(d);
  }
  log(Level::Info, "training on " + std::to_string(samples.count) + " samples, " +
                       std::to_string(parameter_count(mc)) + " parameters");
  const TrainResult r = train(samples, mc, tc, [&](std::size_t step, double loss, const IenParams&) {
    log(Level::Debug, "step " + std::to_string(step) + " loss " + std::to_string(loss));
  });
  const auto path = output_path(g.out, "model.ckpt");
  ensure_parent(path);
  save_checkpoint({mc, r.params}, path);
  std::filesystem::path log_path = path;
  log_path += ".log.jsonl";
  std::ofstream log_file(log_path);
  r.log.write_jsonl(log_file);

  const double final_loss = evaluate_loss(r.params, mc, samples);
  json summary{{"checkpoint", path.string()},
               {"log", log_path.string()},
               {"steps", r.log.step_losses.size()},
               {"final_step_loss", r.log.step_losses.back()},
               {"train_kl", final_loss},
               {"wall_clock", r.log.wall_clock_seconds}};
  if (a.overfit > 0) summary["overfit_pass"] = final_loss < 0.05;
  out << summary.dump(2) << '\n';
  return a.overfit > 0 && final_loss >= 0.05 ? 1 : 0;
}

struct EvalArgs {
  std::vector<std::string> checkpoints;  // case=path
  std::string checkpoint_dir;
  std::vector<std::string> cases;
  std::size_t trials = 20;
  bool traces = false;
};

int eval_cmd(const Globals& g, const EvalArgs& a, std::ostream& out, const Logger& log) {
  std::vector<AblationCase> cases;
  for (const auto& name : a.cases) {
    try {
      cases.push_back(case_from_string(name));
    } catch (const ConfigMismatch& e) {
      throw UsageError(e.what());
    }
  }
  std::map<AblationCase, std::filesystem::path> paths;
  for (const auto& spec : a.checkpoints) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw UsageError("--checkpoint expects case=path, got '" + spec + "'");
    try {
      paths[case_from_string(spec.substr(0, eq))] = input_path(spec.substr(eq + 1));
    } catch (const ConfigMismatch& e) {
      throw UsageError(e.what());
    }
  }
  if (!a.checkpoint_dir.empty()) {
    for (AblationCase c : all_cases()) {
      const auto p = input_path(a.checkpoint_dir) / (case_cli_name(c) + ".ckpt");
      if (!paths.count(c) && std::filesystem::exists(p)) paths[c] = p;
    }
  }
  if (cases.empty()) {
    for (const auto& [c, p] : paths) cases.push_back(c);
  }
  if (cases.empty()) throw UsageError("no checkpoints given (use --checkpoint case=path or --checkpoint-dir)");
  if (a.trials == 0) throw UsageError("--trials must be at least 1");

  std::map<AblationCase, Model> models;
  std::map<AblationCase, std::vector<Trial>> trials;
  for (AblationCase c : cases) {
    if (!paths.count(c)) throw UsageError("no checkpoint for case " + case_cli_name(c));
    models[c] = load_checkpoint(paths[c]);
    DatasetConfig dc;
    dc.n_trials = a.trials;
    dc.mode = case_mode(c);
    dc.seed = g.seed;
    dc.grid = models[c].config.grid;
    log(Level::Info, "rendering " + std::to_string(a.trials) + " test trials for " + case_name(c));
    trials[c] = build_dataset(dc).trials;
  }
  const AblationResult r = run_ablation(models, trials);
  const auto dir = output_path(g.out, "eval");
  std::filesystem::create_directories(dir);
  write_file(dir / "table.csv", table_to_csv(r.table));
  write_file(dir / "table.txt", table_to_text(r.table));
  if (a.traces) {
    std::ofstream tf(dir / "traces.jsonl");
    for (const auto& t : r.traces) tf << t.to_json().dump() << '\n';
  }
  out << table_to_text(r.table);
  return 0;
}

struct ServeArgs {
  std::string checkpoint;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;
  double threshold = 0.6;
  double idle_timeout = 600.0;
};

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int serve_cmd(const ServeArgs& a, std::ostream& out, const Logger& log) {
  if (a.checkpoint.empty()) throw UsageError("--checkpoint is required");
  ServeOptions opts;
  opts.host = a.host;
  opts.port = a.port;
  opts.static_dir = a.static_dir;
  opts.threshold = a.threshold;
  opts.idle_timeout_s = a.idle_timeout;
  HttpServer server(load_checkpoint(input_path(a.checkpoint)), opts);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  out << "serving on http://" << a.host << ":" << a.port << '\n' << std::flush;
  const bool ok = server.listen();
  g_server = nullptr;
  if (!ok) {
    log(Level::Error, "could not listen on " + a.host + ":" + std::to_string(a.port));
    return 1;
  }
  return 0;
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Early intention estimation: data generation, training, evaluation and live serving"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--config", g.config, "JSON config (IEN config, or {model, train})");
  app.add_option("--out", g.out, "Output path (relative paths go under IEN_DATA_DIR)");
  app.add_option("--log-level", g.log_level, "error, warn, info or debug")
      ->check(CLI::IsMember({"error", "warn", "info", "debug"}))
      ->capture_default_str();

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Simulate trials and write a dataset archive");
  gen->add_option("--trials", gd.trials, "Number of trials")->capture_default_str();
  gen->add_option("--mode", gd.mode, "Hand rendering: depth, rgb or rgb-extracted")
      ->check(CLI::IsMember({"depth", "rgb", "rgb-extracted"}))
      ->capture_default_str();
  gen->add_flag("--noise-free", gd.noise_free, "Disable simulated detector noise");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train the network on a dataset archive");
  tr->add_option("--data", ta.data, "Dataset archive")->required();
  tr->add_option("--epochs", ta.epochs)->capture_default_str();
  tr->add_option("--batch-size", ta.batch_size)->capture_default_str();
  tr->add_option("--lr", ta.lr)->capture_default_str();
  tr->add_option("--max-steps", ta.max_steps, "Stop after this many steps (0: no limit)")->capture_default_str();
  tr->add_option("--eval-every", ta.eval_every, "Log training-set KL every N steps")->capture_default_str();
  tr->add_option("--overfit", ta.overfit, "Smoke mode: overfit the first window of N trials");
  tr->add_flag("--no-affordance", ta.no_affordance, "Zero the affordance branch (the *-O ablation)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Run the ablation and write f-value tables");
  ev->add_option("--checkpoint", ea.checkpoints, "case=path, repeatable");
  ev->add_option("--checkpoint-dir", ea.checkpoint_dir, "Directory holding <case>.ckpt files");
  ev->add_option("--cases", ea.cases, "Subset of depth-ao, depth-o, rgb-ao, rgb-o")->delimiter(',');
  ev->add_option("--trials", ea.trials, "Test trials per case")->capture_default_str();
  ev->add_flag("--traces", ea.traces, "Also write per-trial probability traces");

  ServeArgs sa;
  auto* sv = app.add_subcommand("serve", "Serve live inference over HTTP");
  sv->add_option("--checkpoint", sa.checkpoint, "Checkpoint to serve")->required();
  sv->add_option("--host", sa.host)->capture_default_str();
  sv->add_option("--port", sa.port)->capture_default_str();
  sv->add_option("--static-dir", sa.static_dir, "Built web UI assets");
  sv->add_option("--threshold", sa.threshold, "Default th_target for new sessions")->capture_default_str();
  sv->add_option("--idle-timeout", sa.idle_timeout, "Seconds before an idle session expires")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  Logger log(err);
  log.set(g.log_level == "error"  ? Level::Error
          : g.log_level == "warn" ? Level::Warn
          : g.log_level == "debug" ? Level::Debug
                                   : Level::Info);
  try {
    if (*gen) return gen_data(g, gd, out, log);
    if (*tr) return train_cmd(g, ta, out, log);
    if (*ev) return eval_cmd(g, ea, out, log);
    if (*sv) return serve_cmd(sa, out, log);
  } catch (const UsageError& e) {
    log(Level::Error, e.what());
    return 2;
  } catch (const ConfigMismatch& e) {
    log(Level::Error, std::string("config mismatch: ") + e.what());
    return 2;
  } catch (const std::exception& e) {
    log(Level::Error, e.what());
    return 1;
  }
  return 2;
}

}  // namespace ien::cli
