#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ien/graph.hpp"
#include "ien/optim.hpp"
#include "ien/scene.hpp"

namespace ien {

// Intention estimation network: a ConvLSTM over the hand frames and a conv
// stack over the affordance channels, concatenated and decoded by a U-Net
// into a spatially normalised heatmap.
struct IenConfig {
  GridSize grid;
  std::size_t affordance_channels = kSceneChannels;
  std::size_t hand_channels = 1;
  std::size_t convlstm_hidden = 16;
  std::size_t convlstm_kernel = 3;
  std::size_t affordance_features = 16;
  std::vector<std::size_t> encoder_widths{32, 64, 128, 256};
  std::size_t depth = 3;  // pooling levels
  bool use_affordance = true;
  std::size_t max_sequence = 15;

  static IenConfig reference(std::size_t hand_channels = 1, bool use_affordance = true);

  void validate() const;  // throws ConfigMismatch
  json to_json() const;
  static IenConfig from_json(const json& j);
  bool operator==(const IenConfig&) const = default;
};

using IenParams = ParamMap<float>;

// Name -> shape of every parameter tensor.
std::map<std::string, Shape> parameter_shapes(const IenConfig& config);
std::size_t parameter_count(const IenConfig& config);

// Fan-in scaled uniform init; forget-gate bias +1; output head scaled by 0.1.
IenParams init_params(const IenConfig& config, std::uint64_t seed);

using VarMap = std::map<std::string, Var>;

template <typename T>
VarMap bind_params(Graph<T>& g, const ParamMap<T>& params);

// Heatmap [1,H,W] for affordance [5,H,W] and hand_seq [L,C,H,W] (all L frames used).
template <typename T>
Var forward(Graph<T>& g, const VarMap& vars, const IenConfig& config, Var affordance, const Tensor<T>& hand_seq);

// Inference without a tape.
TensorF predict(const IenParams& params, const IenConfig& config, const TensorF& affordance, const TensorF& hand_seq);

// Heatmaps for the first k frames, for each k in `lengths`; the recurrent
// state is rolled once and shared across prefixes.
std::vector<TensorF> predict_prefixes(const IenParams& params, const IenConfig& config, const TensorF& affordance,
                                      const TensorF& hand_seq, const std::vector<std::size_t>& lengths);

struct Model {
  IenConfig config;
  IenParams params;
};

std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace ien
