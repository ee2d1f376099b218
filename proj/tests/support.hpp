#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ien/gradcheck.hpp"
#include "ien/model.hpp"
#include "ien/ops.hpp"
#include "ien/rng.hpp"

namespace ien::test {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T = double>
Tensor<T> random_distribution(const Shape& shape, Rng& rng) {
  Tensor<T> t = random_tensor<T>(shape, rng, 0.05, 1.0);
  const T total = t.sum();
  for (T& v : t.data()) v /= total;
  return t;
}

// A differentiable op under test, wrapped as a scalar loss over its inputs.
struct GradCase {
  std::string name;
  ParamMap<double> params;
  LossBuilder loss;
};

// Gradient-check cases for every primitive the network uses, drawn from `seed`.
inline std::vector<GradCase> op_grad_cases(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCase> cases;
  auto weights = [&rng](const Shape& s) { return random_tensor(s, rng); };

  {
    const Tensor<double> w = weights({3, 6, 6});
    cases.push_back({"conv2d",
                     {{"x", random_tensor({2, 6, 6}, rng)}, {"k", random_tensor({3, 2, 3, 3}, rng)}, {"b", random_tensor({3}, rng)}},
                     [w](Graph<double>& g, const std::map<std::string, Var>& v) {
                       return weighted_sum(g, conv2d(g, v.at("x"), v.at("k"), v.at("b"), 1, 1), w);
                     }});
  }
  {
    const Tensor<double> w = weights({2, 3, 3});
    cases.push_back({"conv2d_strided",
                     {{"x", random_tensor({3, 7, 7}, rng)}, {"k", random_tensor({2, 3, 3, 3}, rng)}, {"b", random_tensor({2}, rng)}},
                     [w](Graph<double>& g, const std::map<std::string, Var>& v) {
                       return weighted_sum(g, conv2d(g, v.at("x"), v.at("k"), v.at("b"), 2, 0), w);
                     }});
  }
  {
    const Tensor<double> wh = weights({2, 5, 5});
    const Tensor<double> wc = weights({2, 5, 5});
    cases.push_back({"convlstm_cell",
                     {{"x", random_tensor({1, 5, 5}, rng)},
                      {"h", random_tensor({2, 5, 5}, rng)},
                      {"c", random_tensor({2, 5, 5}, rng)},
                      {"k", random_tensor({8, 3, 3, 3}, rng, -0.5, 0.5)},
                      {"b", random_tensor({8}, rng)}},
                     [wh, wc](Graph<double>& g, const std::map<std::string, Var>& v) {
                       const auto [h, c] = convlstm_cell(g, v.at("x"), v.at("h"), v.at("c"), {v.at("k"), v.at("b")});
                       return add(g, weighted_sum(g, h, wh), weighted_sum(g, c, wc));
                     }});
  }
  {
    const Tensor<double> w = weights({2, 3, 3});
    cases.push_back({"maxpool2d", {{"x", random_tensor({2, 6, 6}, rng)}},
                     [w](Graph<double>& g, const std::map<std::string, Var>& v) {
                       return weighted_sum(g, maxpool2d(g, v.at("x")), w);
                     }});
  }
  {
    const Tensor<double> w = weights({2, 8, 8});
    cases.push_back({"upsample2d", {{"x", random_tensor({2, 4, 4}, rng)}},
                     [w](Graph<double>& g, const std::map<std::string, Var>& v) {
                       return weighted_sum(g, upsample2d(g, v.at("x")), w);
                     }});
  }
  {
    const Tensor<double> w = weights({5, 4, 4});
    cases.push_back({"concat_channels", {{"a", random_tensor({2, 4, 4}, rng)}, {"b", random_tensor({3, 4, 4}, rng)}},
                     [w](Graph<double>& g, const std::map<std::string, Var>& v) {
                       return weighted_sum(g, concat_channels(g, v.at("a"), v.at("b")), w);
                     }});
  }
  {
    const Tensor<double> w = weights({1, 6, 6});
    cases.push_back({"softmax_spatial", {{"x", random_tensor({1, 6, 6}, rng, -2.0, 2.0)}},
                     [w](Graph<double>& g, const std::map<std::string, Var>& v) {
                       return weighted_sum(g, softmax_spatial(g, v.at("x")), w);
                     }});
  }
  {
    const Tensor<double> target = random_distribution({1, 6, 6}, rng);
    cases.push_back({"kl_divergence", {{"x", random_tensor({1, 6, 6}, rng, -2.0, 2.0)}},
                     [target](Graph<double>& g, const std::map<std::string, Var>& v) {
                       return kl_divergence(g, target, softmax_spatial(g, v.at("x")));
                     }});
  }
  return cases;
}

// Small configuration for double-precision checks of the composed network.
inline IenConfig desk_config(bool use_affordance = true) {
  IenConfig c;
  c.grid = {16, 16};
  c.convlstm_hidden = 3;
  c.affordance_features = 3;
  c.encoder_widths = {4, 6, 8};
  c.depth = 2;
  c.use_affordance = use_affordance;
  return c;
}

inline ParamMap<double> to_double(const IenParams& p) {
  ParamMap<double> out;
  for (const auto& [name, t] : p) out.emplace(name, t.cast<double>());
  return out;
}

// KL(target || IEN(affordance, hand)) as a function of the network parameters.
inline GradCase ien_grad_case(std::uint64_t seed, const IenConfig& config, std::size_t frames = 3) {
  Rng rng(seed);
  const auto h = static_cast<std::size_t>(config.grid.height);
  const auto w = static_cast<std::size_t>(config.grid.width);
  const Tensor<double> affordance = random_tensor({config.affordance_channels, h, w}, rng, 0.0, 1.0);
  const Tensor<double> hand = random_tensor({frames, config.hand_channels, h, w}, rng, 0.0, 1.0);
  const Tensor<double> target = random_distribution({1, h, w}, rng);
  ParamMap<double> params = to_double(init_params(config, mix_seed(seed, 99)));
  // Larger head weights make the output depend on every layer measurably.
  for (double& v : params.at("head.kernel").data()) v *= 10.0;
  // Zero-initialised biases put dead-input pixels exactly on a ReLU kink;
  // jitter them so the check runs at a differentiable point.
  for (auto& [name, t] : params) {
    if (name.ends_with(".bias")) {
      for (double& v : t.data()) v += rng.uniform(-0.1, 0.1);
    }
  }
  return {"ien", std::move(params),
          [config, affordance, hand, target](Graph<double>& g, const std::map<std::string, Var>& v) {
            return kl_divergence(g, target, forward(g, v, config, g.constant(affordance), hand));
          }};
}

inline std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "ien-tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace ien::test
