#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "ien/motion.hpp"
#include "ien/scene.hpp"

namespace ien {

struct Trial {
  TensorF scene_channels;  // [5,H,W], after detector noise
  Scene scene;             // ground truth the user reached for
  Scene detected;          // the detector's view: jittered boxes, misses removed
  Trajectory trajectory;
  TensorF hand_stack;  // [60,C,H,W]
  RenderMode mode = RenderMode::DepthLike;
  Point target_center;  // centroid of the detected target bbox
  std::uint64_t seed = 0;
};

struct WindowSpec {
  std::size_t length = 10;
  std::size_t stride = 1;
  std::size_t cap = 50;
};

struct WindowedSample {
  TensorF scene_channels;
  TensorF hand_window;  // [L,C,H,W]
  TensorF gt_heatmap;   // [1,H,W]
};

inline constexpr double kHeatmapSigma = 4.0;

// Isotropic Gaussian over pixel centres, normalised to sum to 1.
TensorF gaussian_heatmap(Point center, double sigma, GridSize grid);

// min(cap, (frames - length) / stride + 1)
std::size_t window_count(std::size_t frames, const WindowSpec& spec);

std::vector<WindowedSample> slide_windows(const Trial& trial, const WindowSpec& spec = {},
                                          double sigma = kHeatmapSigma);

struct DatasetConfig {
  std::size_t n_trials = 156;
  RenderMode mode = RenderMode::DepthLike;
  DetectorNoise noise;
  std::uint64_t seed = 0;
  GridSize grid;
  WindowSpec window;
  double sigma = kHeatmapSigma;
};

// Trial `index` of a build; a pure function of (config.seed, index), and of
// config.mode only through rendering.
Trial make_trial(const DatasetConfig& config, std::size_t index);

struct Dataset {
  DatasetConfig config;
  std::vector<Trial> trials;

  std::size_t total_windows() const;
};

Dataset build_dataset(const DatasetConfig& config);

// Archive: "IEND" container whose manifest lists each trial's blob offsets.
std::string encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::string_view bytes);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

json dataset_summary(const Dataset& dataset);

// Lazily materialised training samples.
struct SampleSet {
  std::size_t count = 0;
  std::function<WindowedSample(std::size_t)> fetch;
};

// `dataset` must outlive the returned set.
SampleSet sample_set(const Dataset& dataset);
SampleSet sample_set(std::vector<WindowedSample> samples);

}  // namespace ien
