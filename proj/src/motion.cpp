#include "ien/motion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "ien/rng.hpp"

namespace ien {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr int kSupersample = 4;

// Hand silhouette: palm disc plus five finger lobes placed radially, far
// enough apart that lobes never overlap one another.
struct Disc {
  double x, y, r;
  float gain;  // depth-like intensity relative to the palm
};

constexpr double kPalmRadius = 0.55;
constexpr double kLobeRadius = 0.26;
constexpr double kLobeDistance = 0.72;

std::array<Disc, 6> hand_discs(const HandState& s) {
  const double a = std::clamp(s.aperture, 0.0, 1.0);
  std::array<double, 5> angles{};
  float finger_gain = 0.0f;
  if (s.preshape == Preshape::WrapPre) {
    // Fingers fanned upward, thumb opposed below.
    const double spacing = (45.0 + 15.0 * a) * kDeg;
    const double centre = -90.0 * kDeg;
    angles = {centre - 1.5 * spacing, centre - 0.5 * spacing, centre + 0.5 * spacing, centre + 1.5 * spacing,
              90.0 * kDeg};
    finger_gain = 0.7f;
  } else {
    // Fingers together, hooked sideways; thumb swings up and back with aperture.
    const double spacing = 45.0 * kDeg;
    angles = {-1.5 * spacing, -0.5 * spacing, 0.5 * spacing, 1.5 * spacing, -(115.0 + 40.0 * a) * kDeg};
    finger_gain = 1.0f;
  }
  std::array<Disc, 6> discs{};
  discs[0] = {s.position.x, s.position.y, kPalmRadius * s.scale, 0.85f};
  for (std::size_t i = 0; i < 5; ++i) {
    discs[i + 1] = {s.position.x + kLobeDistance * s.scale * std::cos(angles[i]),
                    s.position.y + kLobeDistance * s.scale * std::sin(angles[i]), kLobeRadius * s.scale,
                    i == 4 ? 0.8f : finger_gain};
  }
  return discs;
}

struct Raster {
  std::vector<float> coverage;
  std::vector<float> depth;
};

Raster rasterize(const HandState& s, GridSize grid) {
  const auto n = static_cast<std::size_t>(grid.height) * static_cast<std::size_t>(grid.width);
  Raster r{std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)};
  const auto discs = hand_discs(s);
  const double extent = s.scale + 1.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(s.position.x - extent)));
  const int x1 = std::min(grid.width - 1, static_cast<int>(std::ceil(s.position.x + extent)));
  const int y0 = std::max(0, static_cast<int>(std::floor(s.position.y - extent)));
  const int y1 = std::min(grid.height - 1, static_cast<int>(std::ceil(s.position.y + extent)));
  const float base = static_cast<float>(std::clamp(s.scale / 13.0, 0.0, 1.0));
  constexpr double step = 1.0 / kSupersample;
  constexpr float weight = 1.0f / (kSupersample * kSupersample);
  for (int py = y0; py <= y1; ++py) {
    for (int px = x0; px <= x1; ++px) {
      float cov = 0.0f;
      float depth = 0.0f;
      for (int sy = 0; sy < kSupersample; ++sy) {
        const double qy = py - 0.5 + (sy + 0.5) * step;
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double qx = px - 0.5 + (sx + 0.5) * step;
          for (const Disc& d : discs) {
            const double dx = qx - d.x;
            const double dy = qy - d.y;
            if (dx * dx + dy * dy <= d.r * d.r) {
              cov += weight;
              depth += weight * d.gain * base;
              break;  // palm first, lobes never overlap each other
            }
          }
        }
      }
      const std::size_t p = static_cast<std::size_t>(py) * static_cast<std::size_t>(grid.width) + static_cast<std::size_t>(px);
      r.coverage[p] = cov;
      r.depth[p] = std::min(depth, 1.0f);
    }
  }
  return r;
}

constexpr std::array<float, 3> kSkin{0.86f, 0.66f, 0.54f};

// Seeded background: flat base colour plus rectangles and discs, some skin-toned.
std::vector<float> clutter(GridSize grid, std::uint64_t seed) {
  const auto h = static_cast<std::size_t>(grid.height);
  const auto w = static_cast<std::size_t>(grid.width);
  Rng rng(seed);
  std::vector<float> img(3 * h * w);
  std::array<float, 3> base{};
  for (float& c : base) c = static_cast<float>(rng.uniform(0.2, 0.7));
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(img.begin() + static_cast<std::ptrdiff_t>(c * h * w), h * w, base[c]);
  const int shapes = 14;
  for (int k = 0; k < shapes; ++k) {
    std::array<float, 3> colour{};
    if (rng.bernoulli(0.35)) {
      for (std::size_t c = 0; c < 3; ++c) colour[c] = std::clamp(kSkin[c] + static_cast<float>(rng.uniform(-0.08, 0.08)), 0.0f, 1.0f);
    } else {
      for (float& c : colour) c = static_cast<float>(rng.uniform(0.0, 1.0));
    }
    const double cx = rng.uniform(0.0, grid.width);
    const double cy = rng.uniform(0.0, grid.height);
    const double rx = rng.uniform(2.0, 9.0);
    const double ry = rng.uniform(2.0, 9.0);
    const bool disc = rng.bernoulli(0.5);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = (static_cast<double>(x) - cx) / rx;
        const double dy = (static_cast<double>(y) - cy) / ry;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (std::size_t c = 0; c < 3; ++c) img[(c * h + y) * w + x] = colour[c];
      }
    }
  }
  return img;
}

TensorF render_with_background(const HandState& state, RenderMode mode, GridSize grid,
                               const std::vector<float>* background, std::uint64_t noise_seed) {
  const auto h = static_cast<std::size_t>(grid.height);
  const auto w = static_cast<std::size_t>(grid.width);
  const Raster r = rasterize(state, grid);
  if (mode == RenderMode::DepthLike) return TensorF({1, h, w}, r.depth);

  TensorF out({3, h, w});
  Rng rng(noise_seed);
  for (std::size_t p = 0; p < h * w; ++p) {
    const float cov = r.coverage[p];
    // per-pixel shading on skin; drawn for every pixel so the stream is layout-independent
    const float shade = static_cast<float>(std::clamp(1.0 + 0.12 * rng.normal(), 0.6, 1.3));
    for (std::size_t c = 0; c < 3; ++c) {
      const float skin = std::min(1.0f, kSkin[c] * shade);
      const float bg = (*background)[c * h * w + p];
      float v = cov * skin + (1.0f - cov) * bg;
      if (mode == RenderMode::RgbHandExtracted) v *= cov;
      out[c * h * w + p] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return out;
}

}  // namespace

double minimum_jerk(double tau) {
  const double t = std::clamp(tau, 0.0, 1.0);
  return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
}

Point sample_start(GridSize grid, std::uint64_t seed) {
  Rng rng(seed);
  return {rng.uniform(0.3 * grid.width, 0.7 * grid.width), grid.height - 4.0};
}

double reach_aperture(Preshape preshape, double s) {
  const double peak = preshape == Preshape::WrapPre ? 0.9 : 0.6;
  constexpr double kApertureStart = 0.15;
  constexpr double kApertureEnd = 0.35;
  return std::clamp(kApertureStart + (peak - kApertureStart) * std::sin(std::numbers::pi * s) +
                        (kApertureEnd - kApertureStart) * s,
                    0.0, 1.0);
}

Trajectory generate_reach(Point start, const Scene& scene, std::uint64_t seed, const ReachParams& params) {
  const SceneObject& target = scene.target();
  const auto [gx, gy] = grasp_point(target, scene.grid);
  const Preshape preshape = grasp_preshape(target);

  Rng rng(seed);
  const double curvature = rng.uniform(-params.curvature_max, params.curvature_max);
  const double r0 = rng.uniform(params.start_scale_min, params.start_scale_max);
  const double r1 = rng.uniform(params.end_scale_min, params.end_scale_max);
  Trajectory traj;
  traj.start = start;
  traj.target = {gx, gy};
  const double dx = gx - start.x;
  const double dy = gy - start.y;
  const double len = std::max(std::hypot(dx, dy), 1e-9);
  const double nx = -dy / len;
  const double ny = dx / len;
  for (std::size_t i = 0; i < kTrialFrames; ++i) {
    const double tau = static_cast<double>(i) / static_cast<double>(kTrialFrames);
    const double s = minimum_jerk(tau);
    const double bend = curvature * std::sin(std::numbers::pi * s);
    const double jitter = params.position_sigma * (1.0 - s);
    HandState st;
    st.position.x = start.x + s * dx + bend * nx + jitter * rng.normal();
    st.position.y = start.y + s * dy + bend * ny + jitter * rng.normal();
    st.preshape = preshape;
    st.aperture = reach_aperture(preshape, s);
    st.scale = r0 + (r1 - r0) * tau;
    traj.frames.push_back(st);
  }
  return traj;
}

std::size_t channel_count(RenderMode mode) { return mode == RenderMode::DepthLike ? 1 : 3; }

std::string to_string(RenderMode mode) {
  switch (mode) {
    case RenderMode::DepthLike: return "depth";
    case RenderMode::RgbLike: return "rgb";
    case RenderMode::RgbHandExtracted: return "rgb-extracted";
  }
  return "depth";
}

RenderMode render_mode_from_string(const std::string& name) {
  if (name == "depth") return RenderMode::DepthLike;
  if (name == "rgb") return RenderMode::RgbLike;
  if (name == "rgb-extracted") return RenderMode::RgbHandExtracted;
  throw Error("unknown render mode '" + name + "' (expected depth, rgb or rgb-extracted)");
}

std::vector<float> hand_coverage(const HandState& state, GridSize grid) { return rasterize(state, grid).coverage; }

TensorF render_hand_frame(const HandState& state, RenderMode mode, GridSize grid, std::uint64_t seed) {
  const std::vector<float> background = mode == RenderMode::DepthLike ? std::vector<float>{} : clutter(grid, mix_seed(seed, 0));
  return render_with_background(state, mode, grid, &background, mix_seed(seed, 1));
}

TensorF render_sequence(const Trajectory& traj, RenderMode mode, GridSize grid, std::uint64_t seed) {
  const auto h = static_cast<std::size_t>(grid.height);
  const auto w = static_cast<std::size_t>(grid.width);
  const std::size_t c = channel_count(mode);
  if (traj.frames.empty()) throw TooShort("render_sequence: trajectory has no frames");
  const std::vector<float> background = mode == RenderMode::DepthLike ? std::vector<float>{} : clutter(grid, mix_seed(seed, 0));
  std::vector<float> data;
  data.reserve(traj.frames.size() * c * h * w);
  for (std::size_t i = 0; i < traj.frames.size(); ++i) {
    const TensorF frame = render_with_background(traj.frames[i], mode, grid, &background, mix_seed(seed, i + 1));
    data.insert(data.end(), frame.data().begin(), frame.data().end());
  }
  return TensorF({traj.frames.size(), c, h, w}, std::move(data));
}

json trajectory_to_json(const Trajectory& traj) {
  json frames = json::array();
  for (const HandState& s : traj.frames) {
    frames.push_back({s.position.x, s.position.y, s.aperture, static_cast<int>(s.preshape), s.scale});
  }
  return {{"fps", traj.fps},
          {"duration_s", traj.duration_s},
          {"start", {traj.start.x, traj.start.y}},
          {"target", {traj.target.x, traj.target.y}},
          {"frames", frames}};
}

Trajectory trajectory_from_json(const json& j) {
  try {
    Trajectory traj;
    traj.fps = j.at("fps").get<int>();
    traj.duration_s = j.at("duration_s").get<double>();
    traj.start = {j.at("start").at(0).get<double>(), j.at("start").at(1).get<double>()};
    traj.target = {j.at("target").at(0).get<double>(), j.at("target").at(1).get<double>()};
    for (const json& f : j.at("frames")) {
      HandState s;
      s.position = {f.at(0).get<double>(), f.at(1).get<double>()};
      s.aperture = f.at(2).get<double>();
      s.preshape = f.at(3).get<int>() == 1 ? Preshape::HandlePre : Preshape::WrapPre;
      s.scale = f.at(4).get<double>();
      traj.frames.push_back(s);
    }
    return traj;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed trajectory JSON: ") + e.what());
  }
}

}  // namespace ien
