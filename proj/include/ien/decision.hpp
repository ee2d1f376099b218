#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ien/dataset.hpp"
#include "ien/model.hpp"

namespace ien {

struct ObjectProbability {
  int object_id = 0;
  double confidence = 0.0;   // heatmap mass inside the bbox
  double probability = 0.0;  // confidence normalised over the scene's objects
};

struct DetectedObject {
  int id = 0;
  Rect bbox;
};

// Heatmap mass inside each bbox. Overlapping boxes each count shared pixels.
std::vector<double> object_confidences(const TensorF& heatmap, const std::vector<Rect>& bboxes);

struct NormalizedConfidences {
  std::vector<double> probabilities;
  bool degenerate = false;  // all confidences were zero; probabilities are uniform
};

NormalizedConfidences normalize_confidences(const std::vector<double>& confidences);

// Confidences and probabilities for every detected object, in input order.
std::vector<ObjectProbability> object_probabilities(const TensorF& heatmap, const std::vector<DetectedObject>& objects,
                                                    bool* degenerate = nullptr);

struct Decision {
  std::size_t frame_index = 0;  // hand frames consumed
  std::optional<int> chosen;
  std::vector<ObjectProbability> probabilities;
  double threshold = 0.0;
  bool degenerate = false;
};

// Commits to the argmax object when its probability is strictly above the
// threshold. Ties go to the lowest id; degenerate inputs never commit.
Decision decide(const std::vector<ObjectProbability>& probabilities, double threshold, bool degenerate = false,
                std::size_t frame_index = 0);

struct FScore {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;  // no decision
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

// Micro counts over trials; recall = TP / n_trials.
FScore f_value(const std::vector<std::optional<int>>& chosen, const std::vector<int>& truths);

enum class AblationCase { DepthAO, DepthO, RgbAO, RgbO };

const std::vector<AblationCase>& all_cases();
std::string case_name(AblationCase c);      // "Depth-AO"
std::string case_cli_name(AblationCase c);  // "depth-ao"
AblationCase case_from_string(const std::string& name);  // either spelling, case-insensitive
RenderMode case_mode(AblationCase c);
bool case_uses_affordance(AblationCase c);
IenConfig case_config(AblationCase c);

struct FScoreCell {
  AblationCase ablation = AblationCase::DepthAO;
  double threshold = 0.0;
  std::size_t frame = 0;
  FScore score;
  std::size_t n_trials = 0;
};

struct FScoreTable {
  std::vector<FScoreCell> cells;

  const FScoreCell& at(AblationCase c, double threshold, std::size_t frame) const;
  bool operator==(const FScoreTable& other) const;
};

std::string table_to_csv(const FScoreTable& table);
FScoreTable table_from_csv(const std::string& text);
// One block per threshold, rows = cases, columns = frames; cells are f-values.
std::string table_to_text(const FScoreTable& table);

// Per-object probabilities after each prefix length 1..frames.
struct ProbabilityTrace {
  AblationCase ablation = AblationCase::DepthAO;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  int truth = 0;
  std::vector<std::vector<ObjectProbability>> frames;
  std::vector<bool> degenerate;

  json to_json() const;
};

std::vector<DetectedObject> detected_objects(const Scene& detected);

ProbabilityTrace probability_trace(const Model& model, const Trial& trial, std::size_t max_frames = 15);

// Smallest k whose decision commits; none if no prefix up to 15 frames does.
std::optional<std::size_t> earliest_decision_frame(const ProbabilityTrace& trace, double threshold);
std::optional<std::size_t> earliest_decision_frame(const Model& model, const Trial& trial, double threshold);

struct AblationOptions {
  std::vector<std::size_t> frames{2, 4, 6, 8, 10, 12};
  std::vector<double> thresholds{0.6, 0.8};
};

struct AblationResult {
  FScoreTable table;
  std::vector<ProbabilityTrace> traces;
};

// `test_trials` must be rendered in each case's mode.
AblationResult run_ablation(const std::map<AblationCase, Model>& models,
                            const std::map<AblationCase, std::vector<Trial>>& test_trials,
                            const AblationOptions& options = {});

}  // namespace ien
