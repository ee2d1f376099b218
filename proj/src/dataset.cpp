#include "ien/dataset.hpp"

#include <cmath>
#include <memory>

#include "ien/rng.hpp"

namespace ien {

namespace {

constexpr std::string_view kDatasetMagic = "IEND";

json noise_to_json(const DetectorNoise& n) {
  return {{"mask_dropout", n.mask_dropout}, {"boundary_jitter", n.boundary_jitter}, {"false_negative", n.false_negative}};
}

DetectorNoise noise_from_json(const json& j) {
  return {j.at("mask_dropout").get<double>(), j.at("boundary_jitter").get<int>(), j.at("false_negative").get<double>()};
}

Shape hand_shape(const DatasetConfig& c, std::size_t frames) {
  return {frames, channel_count(c.mode), static_cast<std::size_t>(c.grid.height), static_cast<std::size_t>(c.grid.width)};
}

}  // namespace

TensorF gaussian_heatmap(Point center, double sigma, GridSize grid) {
  if (!(sigma > 0.0)) throw Error("gaussian_heatmap: sigma must be positive");
  if (!(center.x >= 0.0 && center.x <= grid.width - 1 && center.y >= 0.0 && center.y <= grid.height - 1)) {
    throw CenterOutOfGrid("gaussian_heatmap: centre (" + std::to_string(center.x) + ", " + std::to_string(center.y) +
                          ") lies outside the grid");
  }
  const auto h = static_cast<std::size_t>(grid.height);
  const auto w = static_cast<std::size_t>(grid.width);
  std::vector<double> values(h * w);
  double total = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - center.x;
      const double dy = static_cast<double>(y) - center.y;
      values[y * w + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += values[y * w + x];
    }
  }
  TensorF out({1, h, w});
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i] / total);
  return out;
}

std::size_t window_count(std::size_t frames, const WindowSpec& spec) {
  if (spec.length == 0 || spec.stride == 0) throw Error("window length and stride must be positive");
  if (frames < spec.length) return 0;
  return std::min(spec.cap, (frames - spec.length) / spec.stride + 1);
}

std::vector<WindowedSample> slide_windows(const Trial& trial, const WindowSpec& spec, double sigma) {
  const std::size_t frames = trial.hand_stack.dim(0);
  if (frames < spec.length) {
    throw TooShort("trial has " + std::to_string(frames) + " frames, window needs " + std::to_string(spec.length));
  }
  const GridSize grid{static_cast<int>(trial.scene_channels.dim(1)), static_cast<int>(trial.scene_channels.dim(2))};
  const TensorF heatmap = gaussian_heatmap(trial.target_center, sigma, grid);
  std::vector<WindowedSample> out;
  const std::size_t n = window_count(frames, spec);
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    out.push_back({trial.scene_channels, trial.hand_stack.slice0(k * spec.stride, spec.length), heatmap});
  }
  return out;
}

Trial make_trial(const DatasetConfig& config, std::size_t index) {
  const std::uint64_t seed = mix_seed(config.seed, index);
  Rng count_rng(mix_seed(seed, 0));
  const int n_objects = 2 + count_rng.uniform_int(0, 1);
  Trial t;
  t.seed = seed;
  t.mode = config.mode;
  t.scene = generate_scene(n_objects, config.grid, mix_seed(seed, 1));
  NoisyScene noisy = apply_detector_noise(render_affordance_channels(t.scene), t.scene, config.noise, mix_seed(seed, 2));
  t.scene_channels = std::move(noisy.channels);
  t.detected = std::move(noisy.detected);
  t.trajectory = generate_reach(sample_start(config.grid, mix_seed(seed, 3)), t.scene, mix_seed(seed, 4));
  t.hand_stack = render_sequence(t.trajectory, config.mode, config.grid, mix_seed(seed, 5));
  const auto [cx, cy] = t.detected.target().bbox.centroid();
  t.target_center = {cx, cy};
  return t;
}

std::size_t Dataset::total_windows() const {
  std::size_t n = 0;
  for (const Trial& t : trials) n += window_count(t.hand_stack.dim(0), config.window);
  return n;
}

Dataset build_dataset(const DatasetConfig& config) {
  if (config.n_trials == 0) throw Error("build_dataset: need at least one trial");
  config.noise.validate();
  Dataset ds{config, {}};
  ds.trials.reserve(config.n_trials);
  for (std::size_t i = 0; i < config.n_trials; ++i) ds.trials.push_back(make_trial(config, i));
  return ds;
}

std::string encode_dataset(const Dataset& ds) {
  const DatasetConfig& c = ds.config;
  Archive archive;
  json trials = json::array();
  for (std::size_t i = 0; i < ds.trials.size(); ++i) {
    const Trial& t = ds.trials[i];
    json detected = json::array();
    for (const SceneObject& o : t.detected.objects) detected.push_back({{"id", o.id}, {"bbox", rect_to_json(o.bbox)}});
    const std::size_t channels_offset = archive.payload.size();
    append_blob(archive.payload, t.scene_channels);
    const std::size_t hand_offset = archive.payload.size();
    append_blob(archive.payload, t.hand_stack);
    trials.push_back({{"index", i},
                      {"seed", t.seed},
                      {"scene", scene_to_json(t.scene)},
                      {"detected", detected},
                      {"target_center", {t.target_center.x, t.target_center.y}},
                      {"trajectory", trajectory_to_json(t.trajectory)},
                      {"channels_offset", channels_offset},
                      {"hand_offset", hand_offset}});
  }
  archive.manifest = {{"format", "ien-dataset"},
                      {"version", 1},
                      {"trial_count", ds.trials.size()},
                      {"window", {{"length", c.window.length}, {"stride", c.window.stride}, {"cap", c.window.cap}}},
                      {"mode", to_string(c.mode)},
                      {"grid", {c.grid.height, c.grid.width}},
                      {"noise", noise_to_json(c.noise)},
                      {"sigma", c.sigma},
                      {"global_seed", c.seed},
                      {"window_count", ds.total_windows()},
                      {"payload_bytes", archive.payload.size()},
                      {"trials", trials}};
  return encode_archive(kDatasetMagic, archive);
}

Dataset decode_dataset(std::string_view bytes) {
  const Archive archive = decode_archive(kDatasetMagic, bytes);
  const json& m = archive.manifest;
  try {
    if (m.at("format") != "ien-dataset") throw CorruptArchive("not a dataset archive");
    Dataset ds;
    DatasetConfig& c = ds.config;
    c.n_trials = m.at("trial_count").get<std::size_t>();
    c.window = {m.at("window").at("length").get<std::size_t>(), m.at("window").at("stride").get<std::size_t>(),
                m.at("window").at("cap").get<std::size_t>()};
    c.mode = render_mode_from_string(m.at("mode").get<std::string>());
    c.grid = {m.at("grid").at(0).get<int>(), m.at("grid").at(1).get<int>()};
    c.noise = noise_from_json(m.at("noise"));
    c.sigma = m.at("sigma").get<double>();
    c.seed = m.at("global_seed").get<std::uint64_t>();
    if (m.at("payload_bytes").get<std::size_t>() != archive.payload.size()) {
      throw CorruptArchive("payload is " + std::to_string(archive.payload.size()) + " bytes, manifest says " +
                           std::to_string(m.at("payload_bytes").get<std::size_t>()));
    }
    const json& trials = m.at("trials");
    if (trials.size() != c.n_trials) throw CorruptArchive("manifest trial count does not match its trial list");

    const std::string_view payload = archive.payload;
    std::size_t expected_offset = 0;
    auto read_at = [&](std::size_t offset) {
      if (offset != expected_offset) throw CorruptArchive("blob offset mismatch at " + std::to_string(offset));
      TensorF t = decode_blob<float>(payload, offset);
      expected_offset = offset;
      return t;
    };
    const Shape scene_shape{kSceneChannels, static_cast<std::size_t>(c.grid.height), static_cast<std::size_t>(c.grid.width)};
    for (const json& tj : trials) {
      Trial t;
      t.mode = c.mode;
      t.seed = tj.at("seed").get<std::uint64_t>();
      t.scene = scene_from_json(tj.at("scene"));
      std::vector<std::pair<int, Rect>> boxes;
      for (const json& d : tj.at("detected")) boxes.emplace_back(d.at("id").get<int>(), rect_from_json(d.at("bbox")));
      t.detected = detected_scene(t.scene, boxes);
      t.target_center = {tj.at("target_center").at(0).get<double>(), tj.at("target_center").at(1).get<double>()};
      t.trajectory = trajectory_from_json(tj.at("trajectory"));
      t.scene_channels = read_at(tj.at("channels_offset").get<std::size_t>());
      t.hand_stack = read_at(tj.at("hand_offset").get<std::size_t>());
      if (t.scene_channels.shape() != scene_shape) throw CorruptArchive("scene channel blob has the wrong shape");
      if (t.hand_stack.shape() != hand_shape(c, t.hand_stack.dim(0))) throw CorruptArchive("hand stack blob has the wrong shape");
      ds.trials.push_back(std::move(t));
    }
    if (expected_offset != payload.size()) throw CorruptArchive("unreferenced bytes after the last trial blob");
    return ds;
  } catch (const json::exception& e) {
    throw CorruptArchive(std::string("malformed dataset manifest: ") + e.what());
  } catch (const CorruptArchive&) {
    throw;
  } catch (const Error& e) {
    throw CorruptArchive(std::string("inconsistent dataset archive: ") + e.what());
  }
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) { write_file(path, encode_dataset(dataset)); }

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

json dataset_summary(const Dataset& ds) {
  return {{"trials", ds.trials.size()},
          {"windows", ds.total_windows()},
          {"window_length", ds.config.window.length},
          {"windows_per_trial", ds.trials.empty() ? 0 : window_count(ds.trials.front().hand_stack.dim(0), ds.config.window)},
          {"mode", to_string(ds.config.mode)},
          {"grid", {ds.config.grid.height, ds.config.grid.width}},
          {"seed", ds.config.seed}};
}

SampleSet sample_set(const Dataset& dataset) {
  struct Ref {
    std::size_t trial;
    std::size_t start;
  };
  auto refs = std::make_shared<std::vector<Ref>>();
  auto heatmaps = std::make_shared<std::vector<TensorF>>();
  for (std::size_t i = 0; i < dataset.trials.size(); ++i) {
    const Trial& t = dataset.trials[i];
    heatmaps->push_back(gaussian_heatmap(t.target_center, dataset.config.sigma, dataset.config.grid));
    const std::size_t n = window_count(t.hand_stack.dim(0), dataset.config.window);
    for (std::size_t k = 0; k < n; ++k) refs->push_back({i, k * dataset.config.window.stride});
  }
  const Dataset* ds = &dataset;
  const std::size_t length = dataset.config.window.length;
  return {refs->size(), [ds, refs, heatmaps, length](std::size_t i) {
            const Ref& r = refs->at(i);
            const Trial& t = ds->trials[r.trial];
            return WindowedSample{t.scene_channels, t.hand_stack.slice0(r.start, length), (*heatmaps)[r.trial]};
          }};
}

SampleSet sample_set(std::vector<WindowedSample> samples) {
  auto shared = std::make_shared<std::vector<WindowedSample>>(std::move(samples));
  return {shared->size(), [shared](std::size_t i) { return shared->at(i); }};
}

}  // namespace ien
