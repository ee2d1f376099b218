#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "ien/blob.hpp"
#include "ien/tensor.hpp"

namespace ien {

struct GridSize {
  int height = 64;
  int width = 64;
  bool operator==(const GridSize&) const = default;
};

// Integer pixel rectangle covering columns [x, x+w) and rows [y, y+h).
struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  bool overlaps(const Rect& o) const { return x < o.x + o.w && o.x < x + w && y < o.y + o.h && o.y < y + h; }
  bool inside(GridSize grid) const { return w > 0 && h > 0 && x >= 0 && y >= 0 && x + w <= grid.width && y + h <= grid.height; }
  int area() const { return w * h; }
  // Mean pixel coordinate of the covered pixels.
  std::pair<double, double> centroid() const { return {x + (w - 1) / 2.0, y + (h - 1) / 2.0}; }
  bool operator==(const Rect&) const = default;
};

enum class Affordance { Contain = 0, WrapGrasp = 1, HandleGrasp = 2, Background = 3 };
inline constexpr std::size_t kAffordanceClasses = 4;
inline constexpr std::size_t kSceneChannels = 5;  // four affordances + bbox

enum class Preshape { WrapPre = 0, HandlePre = 1 };

// Binary full-grid mask, row-major.
using Mask = std::vector<std::uint8_t>;

struct SceneObject {
  int id = 0;
  Rect bbox;
  double orientation = 0.0;  // handle angle, radians
  std::uint64_t style_seed = 0;
  // Contain, WrapGrasp, HandleGrasp.
  std::array<Mask, 3> masks;

  const Mask& mask(Affordance a) const { return masks.at(static_cast<std::size_t>(a)); }
};

struct Scene {
  GridSize grid;
  std::vector<SceneObject> objects;
  int target_index = 0;
  std::uint64_t seed = 0;

  const SceneObject& target() const { return objects.at(static_cast<std::size_t>(target_index)); }
};

struct DetectorNoise {
  double mask_dropout = 0.05;
  int boundary_jitter = 2;
  double false_negative = 0.02;

  static DetectorNoise none() { return {0.0, 0, 0.0}; }
  void validate() const;
};

// Cup masks drawn procedurally from (bbox, orientation): top ellipse is
// Contain, the rest of the body WrapGrasp, the side handle HandleGrasp.
// The handle is drawn only when it faces sideways, |cos(orientation)| >= cos(pi/4).
std::array<Mask, 3> cup_masks(GridSize grid, const Rect& bbox, double orientation);

bool handle_visible(double orientation);

// The grasp a right hand preshapes for: the handle when one is visible.
Preshape grasp_preshape(const SceneObject& object);

// Centroid of the handle mask (HandlePre) or of the WrapGrasp mask.
std::pair<double, double> grasp_point(const SceneObject& object, GridSize grid);

// Places n_objects (2 or 3) cups by rejection sampling. Deterministic per seed.
Scene generate_scene(int n_objects, GridSize grid, std::uint64_t seed);

// [5,H,W]: Contain, WrapGrasp, HandleGrasp, Background, bbox union.
TensorF render_affordance_channels(const Scene& scene);

struct NoisyScene {
  TensorF channels;
  Scene detected;  // jittered bboxes, masks clipped to them, false negatives removed
};

NoisyScene apply_detector_noise(const TensorF& channels, const Scene& scene, const DetectorNoise& noise,
                                std::uint64_t seed);

// Rebuilds the detected scene from a clean scene plus the detector's boxes.
// Objects absent from `boxes` were dropped by the detector.
Scene detected_scene(const Scene& clean, const std::vector<std::pair<int, Rect>>& boxes);

json scene_to_json(const Scene& scene);
Scene scene_from_json(const json& j);

json rect_to_json(const Rect& r);
Rect rect_from_json(const json& j);

}  // namespace ien
