#pragma once

#include <utility>

#include "ien/graph.hpp"

namespace ien {

// Cross-correlation of x [Cin,H,W] with kernel [Cout,Cin,kH,kW] plus bias [Cout].
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var kernel, Var bias, int stride = 1, int padding = 0);

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var mul(Graph<T>& g, Var a, Var b);

template <typename T>
Var sigmoid(Graph<T>& g, Var x);

template <typename T>
Var tanh(Graph<T>& g, Var x);

template <typename T>
Var relu(Graph<T>& g, Var x);

// Channels [begin, begin+count) of a [C,H,W] tensor.
template <typename T>
Var slice_channels(Graph<T>& g, Var x, std::size_t begin, std::size_t count);

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b);

// 2x2 window, stride 2. Ties route the gradient to the first element in scan order.
template <typename T>
Var maxpool2d(Graph<T>& g, Var x);

// Nearest-neighbour, factor 2.
template <typename T>
Var upsample2d(Graph<T>& g, Var x);

// Softmax over all pixels of a [1,H,W] map.
template <typename T>
Var softmax_spatial(Graph<T>& g, Var x);

// KL(target || pred) = sum target * ln((target+eps)/(pred+eps)). Scalar output.
template <typename T>
Var kl_divergence(Graph<T>& g, const Tensor<T>& target, Var pred, double eps = 1e-8);

// sum(x * weights); scalar. Used to build test losses with dense gradients.
template <typename T>
Var weighted_sum(Graph<T>& g, Var x, const Tensor<T>& weights);

struct ConvLstmWeights {
  Var kernel;  // [4*C_h, C_x+C_h, k, k], gate blocks ordered i, f, o, g
  Var bias;    // [4*C_h]
};

// One ConvLSTM step. Returns (h, c).
template <typename T>
std::pair<Var, Var> convlstm_cell(Graph<T>& g, Var x, Var h_prev, Var c_prev, const ConvLstmWeights& w);

// Plain KL value without a graph; zero-probability target pixels contribute 0.
double kl_value(std::span<const float> target, std::span<const float> pred, double eps = 1e-8);

}  // namespace ien
