#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "ien/dataset.hpp"
#include "ien/model.hpp"
#include "ien/optim.hpp"

namespace ien {

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::size_t eval_every = 0;  // steps; 0 disables periodic evaluation
  double loss_eps = 1e-8;
  std::size_t max_steps = 0;  // 0 means epochs * ceil(n / batch)
  double target_loss = 0.0;   // stop after an epoch whose mean loss is below this; 0 disables

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
};

struct TrainLog {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;  // mean per-sample loss over the samples seen that epoch
  std::vector<std::pair<std::size_t, double>> evals;  // (step, mean KL over the training set)
  double wall_clock_seconds = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  // One JSON object per line: a header, each step, each epoch, each eval.
  void write_jsonl(std::ostream& out) const;
};

struct TrainResult {
  IenParams params;
  TrainLog log;
};

// FNV-1a over the canonical JSON of both configs.
std::uint64_t config_hash(const IenConfig& model, const TrainConfig& train);

// Called after every update with the new parameters.
using StepCallback = std::function<void(std::size_t step, double loss, const IenParams& params)>;

// Minimises mean KL(gt || pred) with Adam. Gradients of a batch are summed in
// sample order, so runs are bit-identical for identical seeds.
TrainResult train(const SampleSet& samples, const IenConfig& model_config, const TrainConfig& train_config,
                  const StepCallback& on_step = {});

// Same, resuming from the given parameters.
TrainResult train(const SampleSet& samples, const IenConfig& model_config, const TrainConfig& train_config,
                  IenParams initial, const StepCallback& on_step = {});

using Predictor = std::function<TensorF(const WindowedSample&)>;

double evaluate_loss(const IenParams& params, const IenConfig& config, const SampleSet& samples, double eps = 1e-8);
// Hook for tests: any predictor in place of the network.
double evaluate_loss(const Predictor& predictor, const SampleSet& samples, double eps = 1e-8);

// Tunes the allocator to keep freed blocks around; the tape allocates and
// frees the same large buffers every step, and returning them to the kernel
// makes page faults dominate. No-op off glibc.
void tune_allocator();

}  // namespace ien
