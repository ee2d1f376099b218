#include "ien/decision.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ien {

std::vector<double> object_confidences(const TensorF& heatmap, const std::vector<Rect>& bboxes) {
  if (heatmap.rank() != 3 || heatmap.dim(0) != 1) {
    throw ShapeMismatch("heatmap must be [1,H,W], got " + shape_string(heatmap.shape()));
  }
  const GridSize grid{static_cast<int>(heatmap.dim(1)), static_cast<int>(heatmap.dim(2))};
  std::vector<double> out;
  out.reserve(bboxes.size());
  for (const Rect& r : bboxes) {
    if (!r.inside(grid)) {
      throw BboxOutOfGrid("bbox [" + std::to_string(r.x) + "," + std::to_string(r.y) + "," + std::to_string(r.w) +
                          "," + std::to_string(r.h) + "] is outside the " + std::to_string(grid.width) + "x" +
                          std::to_string(grid.height) + " grid");
    }
    double sum = 0.0;
    for (int y = r.y; y < r.y + r.h; ++y) {
      const float* row = heatmap.raw() + static_cast<std::size_t>(y) * heatmap.dim(2);
      for (int x = r.x; x < r.x + r.w; ++x) sum += row[x];
    }
    out.push_back(sum);
  }
  return out;
}

NormalizedConfidences normalize_confidences(const std::vector<double>& confidences) {
  NormalizedConfidences out;
  double total = 0.0;
  for (double c : confidences) {
    if (!(c >= 0.0) || !std::isfinite(c)) throw NotNormalized("confidences must be finite and non-negative");
    total += c;
  }
  const std::size_t n = confidences.size();
  if (total <= 0.0) {
    out.degenerate = true;
    out.probabilities.assign(n, n ? 1.0 / static_cast<double>(n) : 0.0);
    return out;
  }
  for (double c : confidences) out.probabilities.push_back(c / total);
  return out;
}

std::vector<ObjectProbability> object_probabilities(const TensorF& heatmap, const std::vector<DetectedObject>& objects,
                                                    bool* degenerate) {
  std::vector<Rect> boxes;
  for (const auto& o : objects) boxes.push_back(o.bbox);
  const std::vector<double> conf = object_confidences(heatmap, boxes);
  const NormalizedConfidences norm = normalize_confidences(conf);
  if (degenerate) *degenerate = norm.degenerate;
  std::vector<ObjectProbability> out;
  for (std::size_t i = 0; i < objects.size(); ++i) out.push_back({objects[i].id, conf[i], norm.probabilities[i]});
  return out;
}

Decision decide(const std::vector<ObjectProbability>& probabilities, double threshold, bool degenerate,
                std::size_t frame_index) {
  Decision d;
  d.frame_index = frame_index;
  d.probabilities = probabilities;
  d.threshold = threshold;
  d.degenerate = degenerate;
  if (degenerate || probabilities.empty()) return d;
  const ObjectProbability* best = &probabilities.front();
  for (const auto& p : probabilities) {
    if (p.probability > best->probability || (p.probability == best->probability && p.object_id < best->object_id)) {
      best = &p;
    }
  }
  if (best->probability > threshold) d.chosen = best->object_id;
  return d;
}

FScore f_value(const std::vector<std::optional<int>>& chosen, const std::vector<int>& truths) {
  if (chosen.size() != truths.size()) {
    throw LengthMismatch("f_value: " + std::to_string(chosen.size()) + " decisions for " +
                         std::to_string(truths.size()) + " trials");
  }
  FScore s;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (!chosen[i]) {
      ++s.fn;
    } else if (*chosen[i] == truths[i]) {
      ++s.tp;
    } else {
      ++s.fp;
    }
  }
  const auto tp = static_cast<double>(s.tp);
  s.precision = s.tp + s.fp ? tp / static_cast<double>(s.tp + s.fp) : 0.0;
  s.recall = chosen.empty() ? 0.0 : tp / static_cast<double>(chosen.size());
  s.f = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

const std::vector<AblationCase>& all_cases() {
  static const std::vector<AblationCase> cases{AblationCase::DepthAO, AblationCase::DepthO, AblationCase::RgbAO,
                                               AblationCase::RgbO};
  return cases;
}

std::string case_name(AblationCase c) {
  switch (c) {
    case AblationCase::DepthAO: return "Depth-AO";
    case AblationCase::DepthO: return "Depth-O";
    case AblationCase::RgbAO: return "RGB-AO";
    case AblationCase::RgbO: return "RGB-O";
  }
  return "?";
}

std::string case_cli_name(AblationCase c) {
  std::string s = case_name(c);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return s;
}

AblationCase case_from_string(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  for (AblationCase c : all_cases()) {
    if (case_cli_name(c) == lower) return c;
  }
  throw ConfigMismatch("unknown ablation case '" + name + "' (expected depth-ao, depth-o, rgb-ao or rgb-o)");
}

RenderMode case_mode(AblationCase c) {
  return c == AblationCase::DepthAO || c == AblationCase::DepthO ? RenderMode::DepthLike
                                                                 : RenderMode::RgbHandExtracted;
}

bool case_uses_affordance(AblationCase c) { return c == AblationCase::DepthAO || c == AblationCase::RgbAO; }

IenConfig case_config(AblationCase c) {
  return IenConfig::reference(channel_count(case_mode(c)), case_uses_affordance(c));
}

const FScoreCell& FScoreTable::at(AblationCase c, double threshold, std::size_t frame) const {
  for (const auto& cell : cells) {
    if (cell.ablation == c && cell.threshold == threshold && cell.frame == frame) return cell;
  }
  throw ShapeMismatch("no table cell for " + case_name(c) + " th=" + std::to_string(threshold) +
                      " frame=" + std::to_string(frame));
}

bool FScoreTable::operator==(const FScoreTable& other) const {
  if (cells.size() != other.cells.size()) return false;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const FScoreCell& a = cells[i];
    const FScoreCell& b = other.cells[i];
    if (a.ablation != b.ablation || a.threshold != b.threshold || a.frame != b.frame || a.score.tp != b.score.tp ||
        a.score.fp != b.score.fp || a.score.fn != b.score.fn || a.score.precision != b.score.precision ||
        a.score.recall != b.score.recall || a.score.f != b.score.f) {
      return false;
    }
  }
  return true;
}

namespace {

// Shortest text that parses back to the same double.
std::string exact(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw CorruptArchive("bad number in CSV: '" + s + "'");
  return v;
}

std::size_t parse_count(const std::string& s) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw CorruptArchive("bad count in CSV: '" + s + "'");
  return v;
}

constexpr const char* kCsvHeader = "case,threshold,frame,precision,recall,f,TP,FP,FN";

}  // namespace

std::string table_to_csv(const FScoreTable& table) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& c : table.cells) {
    out += case_name(c.ablation) + "," + exact(c.threshold) + "," + std::to_string(c.frame) + "," +
           exact(c.score.precision) + "," + exact(c.score.recall) + "," + exact(c.score.f) + "," +
           std::to_string(c.score.tp) + "," + std::to_string(c.score.fp) + "," + std::to_string(c.score.fn) + "\n";
  }
  return out;
}

FScoreTable table_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw CorruptArchive("CSV header mismatch");
  FScoreTable table;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 9) throw CorruptArchive("CSV row has " + std::to_string(f.size()) + " fields: " + line);
    FScoreCell c;
    c.ablation = case_from_string(f[0]);
    c.threshold = parse_double(f[1]);
    c.frame = parse_count(f[2]);
    c.score.precision = parse_double(f[3]);
    c.score.recall = parse_double(f[4]);
    c.score.f = parse_double(f[5]);
    c.score.tp = parse_count(f[6]);
    c.score.fp = parse_count(f[7]);
    c.score.fn = parse_count(f[8]);
    c.n_trials = c.score.tp + c.score.fp + c.score.fn;
    table.cells.push_back(c);
  }
  return table;
}

std::string table_to_text(const FScoreTable& table) {
  std::vector<double> thresholds;
  std::vector<std::size_t> frames;
  std::vector<AblationCase> cases;
  for (const auto& c : table.cells) {
    if (std::find(thresholds.begin(), thresholds.end(), c.threshold) == thresholds.end()) thresholds.push_back(c.threshold);
    if (std::find(frames.begin(), frames.end(), c.frame) == frames.end()) frames.push_back(c.frame);
    if (std::find(cases.begin(), cases.end(), c.ablation) == cases.end()) cases.push_back(c.ablation);
  }
  std::string out;
  char buf[64];
  for (double th : thresholds) {
    std::snprintf(buf, sizeof buf, "th_target = %.2f\n", th);
    out += buf;
    std::snprintf(buf, sizeof buf, "%-12s", "case/frame");
    out += buf;
    for (std::size_t fr : frames) {
      std::snprintf(buf, sizeof buf, "%8zu", fr);
      out += buf;
    }
    out += "\n";
    for (AblationCase c : cases) {
      std::snprintf(buf, sizeof buf, "%-12s", case_name(c).c_str());
      out += buf;
      for (std::size_t fr : frames) {
        std::snprintf(buf, sizeof buf, "%8.3f", table.at(c, th, fr).score.f);
        out += buf;
      }
      out += "\n";
    }
    out += "\n";
  }
  return out;
}

json ProbabilityTrace::to_json() const {
  json frames_json = json::array();
  for (std::size_t k = 0; k < frames.size(); ++k) {
    json probs = json::array();
    for (const auto& p : frames[k]) {
      probs.push_back({{"object_id", p.object_id}, {"confidence", p.confidence}, {"probability", p.probability}});
    }
    frames_json.push_back({{"frame", k + 1}, {"degenerate", static_cast<bool>(degenerate[k])}, {"probabilities", probs}});
  }
  return {{"case", case_name(ablation)}, {"trial", trial}, {"seed", seed}, {"truth", truth}, {"frames", frames_json}};
}

std::vector<DetectedObject> detected_objects(const Scene& detected) {
  std::vector<DetectedObject> out;
  for (const auto& o : detected.objects) out.push_back({o.id, o.bbox});
  return out;
}

ProbabilityTrace probability_trace(const Model& model, const Trial& trial, std::size_t max_frames) {
  const std::size_t frames = std::min({max_frames, model.config.max_sequence, trial.hand_stack.dim(0)});
  if (frames == 0) throw TooShort("trial has no hand frames");
  std::vector<std::size_t> lengths(frames);
  for (std::size_t k = 0; k < frames; ++k) lengths[k] = k + 1;
  const std::vector<TensorF> maps =
      predict_prefixes(model.params, model.config, trial.scene_channels, trial.hand_stack.slice0(0, frames), lengths);
  ProbabilityTrace trace;
  trace.seed = trial.seed;
  trace.truth = trial.detected.target().id;
  const std::vector<DetectedObject> objects = detected_objects(trial.detected);
  for (const TensorF& m : maps) {
    bool degenerate = false;
    trace.frames.push_back(object_probabilities(m, objects, &degenerate));
    trace.degenerate.push_back(degenerate);
  }
  return trace;
}

std::optional<std::size_t> earliest_decision_frame(const ProbabilityTrace& trace, double threshold) {
  for (std::size_t k = 0; k < trace.frames.size() && k < 15; ++k) {
    if (decide(trace.frames[k], threshold, trace.degenerate[k], k + 1).chosen) return k + 1;
  }
  return std::nullopt;
}

std::optional<std::size_t> earliest_decision_frame(const Model& model, const Trial& trial, double threshold) {
  return earliest_decision_frame(probability_trace(model, trial), threshold);
}

AblationResult run_ablation(const std::map<AblationCase, Model>& models,
                            const std::map<AblationCase, std::vector<Trial>>& test_trials,
                            const AblationOptions& options) {
  if (options.frames.empty() || options.thresholds.empty()) throw TooShort("ablation needs frames and thresholds");
  const std::size_t max_frame = *std::max_element(options.frames.begin(), options.frames.end());
  AblationResult result;
  for (AblationCase c : all_cases()) {
    const auto model = models.find(c);
    if (model == models.end()) continue;
    const auto trials = test_trials.find(c);
    if (trials == test_trials.end() || trials->second.empty()) {
      throw TooShort("no test trials for " + case_name(c));
    }
    if (model->second.config.use_affordance != case_uses_affordance(c) ||
        model->second.config.hand_channels != channel_count(case_mode(c))) {
      throw ConfigMismatch("checkpoint config does not match case " + case_name(c));
    }
    std::vector<ProbabilityTrace> traces;
    std::vector<int> truths;
    for (std::size_t i = 0; i < trials->second.size(); ++i) {
      const Trial& trial = trials->second[i];
      if (trial.mode != case_mode(c)) throw ConfigMismatch("test trial rendered in the wrong mode for " + case_name(c));
      ProbabilityTrace t = probability_trace(model->second, trial, max_frame);
      t.ablation = c;
      t.trial = i;
      truths.push_back(t.truth);
      traces.push_back(std::move(t));
    }
    for (double th : options.thresholds) {
      for (std::size_t frame : options.frames) {
        std::vector<std::optional<int>> chosen;
        for (const auto& t : traces) {
          if (frame > t.frames.size()) throw TooShort("trial shorter than frame " + std::to_string(frame));
          chosen.push_back(decide(t.frames[frame - 1], th, t.degenerate[frame - 1], frame).chosen);
        }
        result.table.cells.push_back({c, th, frame, f_value(chosen, truths), traces.size()});
      }
    }
    for (auto& t : traces) result.traces.push_back(std::move(t));
  }
  return result;
}

}  // namespace ien
