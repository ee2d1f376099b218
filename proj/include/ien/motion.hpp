#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ien/scene.hpp"

namespace ien {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct HandState {
  Point position;
  double aperture = 0.0;  // 0 closed, 1 fully open
  Preshape preshape = Preshape::WrapPre;
  double scale = 6.0;  // apparent hand radius in px
};

inline constexpr int kTrialFps = 30;
inline constexpr double kTrialDurationS = 2.0;
inline constexpr std::size_t kTrialFrames = 60;

struct Trajectory {
  std::vector<HandState> frames;
  int fps = kTrialFps;
  double duration_s = kTrialDurationS;
  Point start;
  Point target;
};

struct ReachParams {
  double position_sigma = 0.8;
  double curvature_max = 6.0;
  double start_scale_min = 4.0;
  double start_scale_max = 7.0;
  double end_scale_min = 8.0;
  double end_scale_max = 12.0;

  static ReachParams noiseless() {
    ReachParams p;
    p.position_sigma = 0.0;
    p.curvature_max = 0.0;
    return p;
  }
};

// Normalised minimum-jerk progress 10t^3 - 15t^4 + 6t^5.
double minimum_jerk(double tau);

// Grip aperture at minimum-jerk progress s: opens to a preshape-dependent
// peak mid-reach, then closes partially on approach.
double reach_aperture(Preshape preshape, double s);

// Hand entry point near the bottom edge of the grid.
Point sample_start(GridSize grid, std::uint64_t seed);

// 60-frame reach toward the target's grasp point; frame i sits at t = i/30 s.
Trajectory generate_reach(Point start, const Scene& scene, std::uint64_t seed, const ReachParams& params = {});

enum class RenderMode { DepthLike, RgbLike, RgbHandExtracted };

std::size_t channel_count(RenderMode mode);
std::string to_string(RenderMode mode);
RenderMode render_mode_from_string(const std::string& name);

// Fractional hand coverage in [0,1], [H,W] row-major (4x4 supersampling).
std::vector<float> hand_coverage(const HandState& state, GridSize grid);

// [C,H,W], values in [0,1].
TensorF render_hand_frame(const HandState& state, RenderMode mode, GridSize grid, std::uint64_t seed);

// [frames,C,H,W]; RgbLike clutter is fixed for the whole sequence.
TensorF render_sequence(const Trajectory& traj, RenderMode mode, GridSize grid, std::uint64_t seed);

json trajectory_to_json(const Trajectory& traj);
Trajectory trajectory_from_json(const json& j);

}  // namespace ien
