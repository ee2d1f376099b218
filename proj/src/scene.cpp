#include "ien/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ien/rng.hpp"

namespace ien {

namespace {

constexpr int kPlacementAttempts = 400;
constexpr int kTriesPerObject = 60;
constexpr int kSideMargin = 6;
constexpr int kTopMargin = 4;
constexpr int kObjectGap = 3;  // keeps boxes disjoint under +-1 px jitter per side

std::size_t pixel(GridSize grid, int x, int y) {
  return static_cast<std::size_t>(y) * static_cast<std::size_t>(grid.width) + static_cast<std::size_t>(x);
}

int handle_width(int bbox_width) { return std::clamp(static_cast<int>(std::lround(0.25 * bbox_width)), 3, 5); }

Rect expanded(const Rect& r, int by) { return {r.x - by, r.y - by, r.w + 2 * by, r.h + 2 * by}; }

}  // namespace

void DetectorNoise::validate() const {
  if (!(mask_dropout >= 0.0 && mask_dropout <= 1.0) || !(false_negative >= 0.0 && false_negative <= 1.0) ||
      boundary_jitter < 0) {
    throw Error("detector noise: probabilities must lie in [0,1] and jitter must be >= 0");
  }
}

bool handle_visible(double orientation) {
  return std::abs(std::cos(orientation)) >= std::cos(std::numbers::pi / 4.0) - 1e-12;
}

std::array<Mask, 3> cup_masks(GridSize grid, const Rect& bbox, double orientation) {
  const std::size_t n = static_cast<std::size_t>(grid.height) * static_cast<std::size_t>(grid.width);
  std::array<Mask, 3> masks{Mask(n, 0), Mask(n, 0), Mask(n, 0)};
  const bool visible = handle_visible(orientation);
  const bool right = std::cos(orientation) > 0.0;
  const int hw = visible ? std::min(handle_width(bbox.w), bbox.w - 2) : 0;
  const int bw = bbox.w - hw;
  const int bx = (visible && !right) ? bbox.x + hw : bbox.x;

  const int eh = std::max(3, static_cast<int>(std::lround(0.25 * bbox.h)));
  const double cx = bx + (bw - 1) / 2.0;
  const double cy = bbox.y + (eh - 1) / 2.0;
  const double ax = bw / 2.0;
  const double ay = eh / 2.0;

  auto set = [&](Affordance a, int x, int y) {
    if (x >= 0 && y >= 0 && x < grid.width && y < grid.height) masks[static_cast<std::size_t>(a)][pixel(grid, x, y)] = 1;
  };
  for (int y = bbox.y; y < bbox.y + bbox.h; ++y) {
    for (int x = bx; x < bx + bw; ++x) {
      const double ex = (x - cx) / ax;
      const double ey = (y - cy) / ay;
      const bool in_ellipse = ex * ex + ey * ey <= 1.0;
      if (in_ellipse) {
        set(Affordance::Contain, x, y);
      } else if (y > cy) {
        set(Affordance::WrapGrasp, x, y);
      }
    }
  }
  if (visible) {
    const int hx = right ? bx + bw : bbox.x;
    const int y0 = bbox.y + static_cast<int>(std::lround(0.3 * bbox.h));
    const int y1 = bbox.y + static_cast<int>(std::lround(0.75 * bbox.h));
    for (int y = y0; y < y1; ++y) {
      for (int x = hx; x < hx + hw; ++x) set(Affordance::HandleGrasp, x, y);
    }
  }
  return masks;
}

Preshape grasp_preshape(const SceneObject& object) {
  const Mask& handle = object.mask(Affordance::HandleGrasp);
  const bool any = std::any_of(handle.begin(), handle.end(), [](std::uint8_t v) { return v != 0; });
  return any ? Preshape::HandlePre : Preshape::WrapPre;
}

std::pair<double, double> grasp_point(const SceneObject& object, GridSize grid) {
  const Mask& m = object.mask(grasp_preshape(object) == Preshape::HandlePre ? Affordance::HandleGrasp
                                                                           : Affordance::WrapGrasp);
  double sx = 0.0, sy = 0.0, count = 0.0;
  for (int y = 0; y < grid.height; ++y) {
    for (int x = 0; x < grid.width; ++x) {
      if (m[pixel(grid, x, y)]) {
        sx += x;
        sy += y;
        count += 1.0;
      }
    }
  }
  if (count == 0.0) return object.bbox.centroid();
  return {sx / count, sy / count};
}

Scene generate_scene(int n_objects, GridSize grid, std::uint64_t seed) {
  if (n_objects < 2 || n_objects > 3) throw PlacementFailure("scenes hold two or three cups");
  if (grid.height <= 0 || grid.width <= 0) throw PlacementFailure("grid must be non-empty");
  Rng rng(seed);
  Scene scene;
  scene.grid = grid;
  scene.seed = seed;
  scene.target_index = rng.uniform_int(0, n_objects - 1);
  const int y_limit = static_cast<int>(std::lround(0.7 * grid.height));

  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    scene.objects.clear();
    bool ok = true;
    for (int id = 0; id < n_objects && ok; ++id) {
      SceneObject obj;
      obj.id = id;
      obj.orientation = rng.uniform(0.0, 2.0 * std::numbers::pi);
      obj.style_seed = rng.next();
      const bool visible = handle_visible(obj.orientation);
      obj.bbox.w = visible ? rng.uniform_int(15, 20) : rng.uniform_int(12, 16);
      obj.bbox.h = rng.uniform_int(12, 20);
      const int x_hi = grid.width - kSideMargin - obj.bbox.w;
      const int y_hi = y_limit - obj.bbox.h;
      if (x_hi < kSideMargin || y_hi < kTopMargin) {
        ok = false;
        break;
      }
      bool placed = false;
      for (int t = 0; t < kTriesPerObject && !placed; ++t) {
        obj.bbox.x = rng.uniform_int(kSideMargin, x_hi);
        obj.bbox.y = rng.uniform_int(kTopMargin, y_hi);
        placed = std::none_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& other) {
          return expanded(other.bbox, kObjectGap).overlaps(obj.bbox);
        });
      }
      if (!placed) {
        ok = false;
        break;
      }
      obj.masks = cup_masks(grid, obj.bbox, obj.orientation);
      scene.objects.push_back(std::move(obj));
    }
    if (ok) return scene;
  }
  throw PlacementFailure("could not place " + std::to_string(n_objects) + " cups on a " +
                         std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
}

TensorF render_affordance_channels(const Scene& scene) {
  const auto h = static_cast<std::size_t>(scene.grid.height);
  const auto w = static_cast<std::size_t>(scene.grid.width);
  TensorF out({kSceneChannels, h, w});
  for (const SceneObject& obj : scene.objects) {
    for (std::size_t a = 0; a < 3; ++a) {
      const Mask& m = obj.masks[a];
      for (std::size_t p = 0; p < h * w; ++p) {
        if (m[p]) out[a * h * w + p] = 1.0f;
      }
    }
    for (int y = obj.bbox.y; y < obj.bbox.y + obj.bbox.h; ++y) {
      for (int x = obj.bbox.x; x < obj.bbox.x + obj.bbox.w; ++x) {
        out.at(4, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.0f;
      }
    }
  }
  for (std::size_t p = 0; p < h * w; ++p) {
    const bool object = out[p] != 0.0f || out[h * w + p] != 0.0f || out[2 * h * w + p] != 0.0f;
    out[3 * h * w + p] = object ? 0.0f : 1.0f;
  }
  return out;
}

Scene detected_scene(const Scene& clean, const std::vector<std::pair<int, Rect>>& boxes) {
  Scene out;
  out.grid = clean.grid;
  out.seed = clean.seed;
  out.target_index = -1;
  const int target_id = clean.target().id;
  for (const auto& [id, box] : boxes) {
    auto it = std::find_if(clean.objects.begin(), clean.objects.end(), [id = id](const SceneObject& o) { return o.id == id; });
    if (it == clean.objects.end()) throw Error("detected box refers to unknown object " + std::to_string(id));
    SceneObject obj = *it;
    obj.bbox = box;
    for (Mask& m : obj.masks) {
      for (int y = 0; y < clean.grid.height; ++y) {
        for (int x = 0; x < clean.grid.width; ++x) {
          if (!box.contains(x, y)) m[pixel(clean.grid, x, y)] = 0;
        }
      }
    }
    if (id == target_id) out.target_index = static_cast<int>(out.objects.size());
    out.objects.push_back(std::move(obj));
  }
  if (out.target_index < 0) throw Error("detected scene lost its target object");
  return out;
}

NoisyScene apply_detector_noise(const TensorF& channels, const Scene& scene, const DetectorNoise& noise,
                                std::uint64_t seed) {
  noise.validate();
  const GridSize grid = scene.grid;
  const auto hw = static_cast<std::size_t>(grid.height) * static_cast<std::size_t>(grid.width);
  if (channels.shape() != Shape{kSceneChannels, static_cast<std::size_t>(grid.height), static_cast<std::size_t>(grid.width)}) {
    throw ShapeMismatch("apply_detector_noise: channels do not match the scene grid");
  }

  // Whole-object misses; never the target, and never below two objects.
  Rng miss_rng(mix_seed(seed, 1));
  std::vector<bool> keep(scene.objects.size(), true);
  std::size_t kept = scene.objects.size();
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const bool drop = miss_rng.bernoulli(noise.false_negative);
    if (drop && static_cast<int>(i) != scene.target_index && kept > 2) {
      keep[i] = false;
      --kept;
    }
  }

  // Edge jitter, clamped to the grid; a jittered box that would touch another is left as is.
  Rng jitter_rng(mix_seed(seed, 2));
  std::vector<Rect> boxes;
  for (const SceneObject& o : scene.objects) boxes.push_back(o.bbox);
  const int j = noise.boundary_jitter;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Rect& r = scene.objects[i].bbox;
    const int left = std::clamp(r.x + jitter_rng.uniform_int(-j, j), 0, grid.width - 1);
    const int top = std::clamp(r.y + jitter_rng.uniform_int(-j, j), 0, grid.height - 1);
    const int right = std::clamp(r.x + r.w + jitter_rng.uniform_int(-j, j), left + 1, grid.width);
    const int bottom = std::clamp(r.y + r.h + jitter_rng.uniform_int(-j, j), top + 1, grid.height);
    const Rect candidate{left, top, right - left, bottom - top};
    bool clash = false;
    for (std::size_t k = 0; k < boxes.size(); ++k) {
      if (k != i && keep[k] && candidate.overlaps(boxes[k])) clash = true;
    }
    if (!clash) boxes[i] = candidate;
  }

  std::vector<std::pair<int, Rect>> detected_boxes;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (keep[i]) detected_boxes.emplace_back(scene.objects[i].id, boxes[i]);
  }
  NoisyScene out{channels, detected_scene(scene, detected_boxes)};
  TensorF& ch = out.channels;

  // Affordance pixels the detector no longer reports: outside the reported box or on a missed object.
  bool boxes_changed = false;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    if (keep[i] && boxes[i] == o.bbox) continue;
    boxes_changed = true;
    for (std::size_t a = 0; a < 3; ++a) {
      for (int y = 0; y < grid.height; ++y) {
        for (int x = 0; x < grid.width; ++x) {
          const std::size_t p = pixel(grid, x, y);
          if (o.masks[a][p] && !(keep[i] && boxes[i].contains(x, y))) {
            ch[a * hw + p] = 0.0f;
            ch[3 * hw + p] = 1.0f;
          }
        }
      }
    }
  }
  if (boxes_changed) {
    for (std::size_t p = 0; p < hw; ++p) ch[4 * hw + p] = 0.0f;
    for (const auto& [id, box] : detected_boxes) {
      for (int y = box.y; y < box.y + box.h; ++y) {
        for (int x = box.x; x < box.x + box.w; ++x) ch[4 * hw + pixel(grid, x, y)] = 1.0f;
      }
    }
  }

  if (noise.mask_dropout > 0.0) {
    Rng drop_rng(mix_seed(seed, 3));
    for (std::size_t i = 0; i < kAffordanceClasses * hw; ++i) {
      if (ch[i] != 0.0f && drop_rng.bernoulli(noise.mask_dropout)) ch[i] = 0.0f;
    }
  }
  return out;
}

json rect_to_json(const Rect& r) { return json::array({r.x, r.y, r.w, r.h}); }

Rect rect_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("bbox must be [x, y, w, h]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

json scene_to_json(const Scene& scene) {
  json objects = json::array();
  for (const SceneObject& o : scene.objects) {
    objects.push_back({{"id", o.id}, {"bbox", rect_to_json(o.bbox)}, {"orientation", o.orientation}, {"style_seed", o.style_seed}});
  }
  return {{"grid", {scene.grid.height, scene.grid.width}},
          {"seed", scene.seed},
          {"target_index", scene.target_index},
          {"objects", objects}};
}

Scene scene_from_json(const json& j) {
  try {
    Scene scene;
    scene.grid = {j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>()};
    scene.seed = j.at("seed").get<std::uint64_t>();
    scene.target_index = j.at("target_index").get<int>();
    for (const json& o : j.at("objects")) {
      SceneObject obj;
      obj.id = o.at("id").get<int>();
      obj.bbox = rect_from_json(o.at("bbox"));
      obj.orientation = o.at("orientation").get<double>();
      obj.style_seed = o.at("style_seed").get<std::uint64_t>();
      if (!obj.bbox.inside(scene.grid)) throw BboxOutOfGrid("scene object bbox outside the grid");
      obj.masks = cup_masks(scene.grid, obj.bbox, obj.orientation);
      scene.objects.push_back(std::move(obj));
    }
    if (scene.target_index < 0 || scene.target_index >= static_cast<int>(scene.objects.size())) {
      throw Error("scene target_index out of range");
    }
    return scene;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed scene JSON: ") + e.what());
  }
}

}  // namespace ien
