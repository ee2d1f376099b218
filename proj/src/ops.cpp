#include "ien/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ien {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, oh, ow;
  int stride, pad;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

// Output columns [ox_lo, ox_hi) read in-bounds input for kernel column j.
inline void valid_columns(const ConvGeometry& geo, std::size_t j, std::size_t& lo, std::size_t& hi) {
  const long stride = geo.stride;
  const long offset = static_cast<long>(j) - geo.pad;
  long first = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  long last = (static_cast<long>(geo.w) - 1 - offset);
  last = last < 0 ? -1 : last / stride;
  first = std::min<long>(first, static_cast<long>(geo.ow));
  last = std::min<long>(last, static_cast<long>(geo.ow) - 1);
  lo = static_cast<std::size_t>(first);
  hi = last < first ? lo : static_cast<std::size_t>(last + 1);
}

template <typename T>
void im2col(const T* x, const ConvGeometry& geo, T* cols) {
  const auto h = static_cast<long>(geo.h);
  for (std::size_t c = 0; c < geo.cin; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        std::size_t lo = 0, hi = 0;
        valid_columns(geo, j, lo, hi);
        const long offset = static_cast<long>(j) - geo.pad;
        T* row = cols + ((c * geo.kh + i) * geo.kw + j) * geo.pixels();
        for (std::size_t oy = 0; oy < geo.oh; ++oy) {
          const long iy = static_cast<long>(oy) * geo.stride + static_cast<long>(i) - geo.pad;
          T* dst = row + oy * geo.ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + geo.ow, T{0});
            continue;
          }
          const T* src = x + (c * geo.h + static_cast<std::size_t>(iy)) * geo.w;
          std::fill(dst, dst + lo, T{0});
          if (geo.stride == 1) {
            std::copy(src + static_cast<long>(lo) + offset, src + static_cast<long>(hi) + offset, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[static_cast<long>(ox) * geo.stride + offset];
          }
          std::fill(dst + hi, dst + geo.ow, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& geo, T* dx) {
  const auto h = static_cast<long>(geo.h);
  for (std::size_t c = 0; c < geo.cin; ++c) {
    for (std::size_t i = 0; i < geo.kh; ++i) {
      for (std::size_t j = 0; j < geo.kw; ++j) {
        std::size_t lo = 0, hi = 0;
        valid_columns(geo, j, lo, hi);
        const long offset = static_cast<long>(j) - geo.pad;
        const T* row = cols + ((c * geo.kh + i) * geo.kw + j) * geo.pixels();
        for (std::size_t oy = 0; oy < geo.oh; ++oy) {
          const long iy = static_cast<long>(oy) * geo.stride + static_cast<long>(i) - geo.pad;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * geo.ow;
          T* dst = dx + (c * geo.h + static_cast<std::size_t>(iy)) * geo.w;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox) * geo.stride + offset] += src[ox];
        }
      }
    }
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Elementwise unary op. `f` maps a whole input array (so Eigen can
// vectorise it); `df` is f'(x) expressed through the output y.
template <typename T, typename Forward, typename DerivFromOutput>
Var unary(Graph<T>& g, Var xv, Forward f, DerivFromOutput df) {
  const Tensor<T>& x = g.value(xv);
  Tensor<T> y(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  ArrayMap<T>(y.raw(), n) = f(ConstArrayMap<T>(x.raw(), n));
  return g.emit(std::move(y), {xv}, [xv, df](Graph<T>& gr, Var self) {
    const Tensor<T>& out = gr.value(self);
    const Tensor<T>& dy = gr.upstream(self);
    Tensor<T>& dx = gr.grad_buffer(xv);
    const auto n = static_cast<Eigen::Index>(dx.size());
    ConstArrayMap<T> y(out.raw(), n);
    ArrayMap<T>(dx.raw(), n) += ConstArrayMap<T>(dy.raw(), n) * df(y);
  });
}

}  // namespace

template <typename T>
Var conv2d(Graph<T>& g, Var xv, Var kv, Var bv, int stride, int padding) {
  const Tensor<T>& x = g.value(xv);
  const Tensor<T>& k = g.value(kv);
  const Tensor<T>& b = g.value(bv);
  require_rank(x, 3, "conv2d input");
  require_rank(k, 4, "conv2d kernel");
  require_rank(b, 1, "conv2d bias");
  if (stride < 1 || padding < 0) throw ShapeMismatch("conv2d: stride must be >= 1 and padding >= 0");
  if (k.dim(1) != x.dim(0)) {
    throw ShapeMismatch("conv2d: kernel expects " + std::to_string(k.dim(1)) + " input channels, got " +
                        std::to_string(x.dim(0)));
  }
  if (b.dim(0) != k.dim(0)) throw ShapeMismatch("conv2d: bias length does not match output channels");
  const std::size_t ph = x.dim(1) + 2 * static_cast<std::size_t>(padding);
  const std::size_t pw = x.dim(2) + 2 * static_cast<std::size_t>(padding);
  if (k.dim(2) > ph || k.dim(3) > pw) throw ShapeMismatch("conv2d: kernel larger than padded input");
  if ((ph - k.dim(2)) % static_cast<std::size_t>(stride) != 0 ||
      (pw - k.dim(3)) % static_cast<std::size_t>(stride) != 0) {
    throw ShapeMismatch("conv2d: output size is not integral for this stride");
  }
  ConvGeometry geo{x.dim(0),
                   x.dim(1),
                   x.dim(2),
                   k.dim(0),
                   k.dim(2),
                   k.dim(3),
                   (ph - k.dim(2)) / static_cast<std::size_t>(stride) + 1,
                   (pw - k.dim(3)) / static_cast<std::size_t>(stride) + 1,
                   stride,
                   padding};

  AlignedVector<T> cols(geo.patch() * geo.pixels());
  im2col(x.raw(), geo, cols.data());

  Tensor<T> out({geo.cout, geo.oh, geo.ow});
  {
    Eigen::Map<const MatR<T>> kmat(k.raw(), static_cast<Eigen::Index>(geo.cout),
                                   static_cast<Eigen::Index>(geo.patch()));
    Eigen::Map<const MatR<T>> cmat(cols.data(), static_cast<Eigen::Index>(geo.patch()),
                                   static_cast<Eigen::Index>(geo.pixels()));
    Eigen::Map<MatR<T>> omat(out.raw(), static_cast<Eigen::Index>(geo.cout),
                             static_cast<Eigen::Index>(geo.pixels()));
    omat.noalias() = kmat * cmat;
    for (std::size_t o = 0; o < geo.cout; ++o) omat.row(static_cast<Eigen::Index>(o)).array() += b[o];
  }

  if (!g.recording()) return g.emit(std::move(out), {xv, kv, bv}, nullptr);
  return g.emit(std::move(out), {xv, kv, bv},
                [xv, kv, bv, geo, cols = std::move(cols)](Graph<T>& gr, Var self) {
                  const Tensor<T>& dout = gr.upstream(self);
                  const auto cout = static_cast<Eigen::Index>(geo.cout);
                  const auto patch = static_cast<Eigen::Index>(geo.patch());
                  const auto pixels = static_cast<Eigen::Index>(geo.pixels());
                  Eigen::Map<const MatR<T>> dmat(dout.raw(), cout, pixels);
                  if (gr.requires_grad(kv)) {
                    Eigen::Map<const MatR<T>> cmat(cols.data(), patch, pixels);
                    Eigen::Map<MatR<T>> dk(gr.grad_buffer(kv).raw(), cout, patch);
                    dk.noalias() += dmat * cmat.transpose();
                  }
                  if (gr.requires_grad(bv)) {
                    Tensor<T>& db = gr.grad_buffer(bv);
                    for (Eigen::Index o = 0; o < cout; ++o) db[static_cast<std::size_t>(o)] += dmat.row(o).sum();
                  }
                  if (gr.requires_grad(xv)) {
                    Eigen::Map<const MatR<T>> kmat(gr.value(kv).raw(), cout, patch);
                    MatR<T> dcols = kmat.transpose() * dmat;
                    col2im_add(dcols.data(), geo, gr.grad_buffer(xv).raw());
                  }
                });
}

template <typename T>
Var add(Graph<T>& g, Var av, Var bv) {
  const Tensor<T>& a = g.value(av);
  const Tensor<T>& b = g.value(bv);
  require_same_shape(a, b, "add");
  Tensor<T> out = a;
  accumulate(out, b);
  return g.emit(std::move(out), {av, bv}, [av, bv](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.upstream(self);
    if (gr.requires_grad(av)) accumulate(gr.grad_buffer(av), dy);
    if (gr.requires_grad(bv)) accumulate(gr.grad_buffer(bv), dy);
  });
}

template <typename T>
Var mul(Graph<T>& g, Var av, Var bv) {
  const Tensor<T>& a = g.value(av);
  const Tensor<T>& b = g.value(bv);
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return g.emit(std::move(out), {av, bv}, [av, bv](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.upstream(self);
    if (gr.requires_grad(av)) {
      const Tensor<T>& b = gr.value(bv);
      Tensor<T>& da = gr.grad_buffer(av);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * b[i];
    }
    if (gr.requires_grad(bv)) {
      const Tensor<T>& a = gr.value(av);
      Tensor<T>& db = gr.grad_buffer(bv);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * a[i];
    }
  });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  return unary(
      g, x, [](const auto& v) { return v.logistic(); }, [](const auto& y) { return y * (T{1} - y); });
}

template <typename T>
Var tanh(Graph<T>& g, Var x) {
  return unary(
      g, x, [](const auto& v) { return v.tanh(); }, [](const auto& y) { return T{1} - y.square(); });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  return unary(
      g, x, [](const auto& v) { return v.max(T{0}); }, [](const auto& y) { return (y > T{0}).template cast<T>(); });
}

template <typename T>
Var slice_channels(Graph<T>& g, Var xv, std::size_t begin, std::size_t count) {
  const Tensor<T>& x = g.value(xv);
  require_rank(x, 3, "slice_channels");
  if (count == 0 || begin + count > x.dim(0)) throw ShapeMismatch("slice_channels: range out of bounds");
  Tensor<T> out = x.slice0(begin, count);
  const std::size_t offset = begin * x.dim(1) * x.dim(2);
  return g.emit(std::move(out), {xv}, [xv, offset](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.upstream(self);
    Tensor<T>& dx = gr.grad_buffer(xv);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[offset + i] += dy[i];
  });
}

template <typename T>
Var concat_channels(Graph<T>& g, Var av, Var bv) {
  const Tensor<T>& a = g.value(av);
  const Tensor<T>& b = g.value(bv);
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeMismatch("concat_channels: spatial sizes differ, " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
  std::vector<T> data(a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  Tensor<T> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(data));
  const std::size_t split = a.size();
  return g.emit(std::move(out), {av, bv}, [av, bv, split](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.upstream(self);
    if (gr.requires_grad(av)) {
      Tensor<T>& da = gr.grad_buffer(av);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
    }
    if (gr.requires_grad(bv)) {
      Tensor<T>& db = gr.grad_buffer(bv);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[split + i];
    }
  });
}

template <typename T>
Var maxpool2d(Graph<T>& g, Var xv) {
  const Tensor<T>& x = g.value(xv);
  require_rank(x, 3, "maxpool2d");
  if (x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw ShapeMismatch("maxpool2d: spatial extent must be even, got " + shape_string(x.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  Tensor<T> out({c, h, w});
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        std::size_t best = (ch * x.dim(1) + 2 * y) * x.dim(2) + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * x.dim(1) + 2 * y + dy) * x.dim(2) + 2 * xx + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (ch * h + y) * w + xx;
        out[o] = x[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return g.emit(std::move(out), {xv}, [xv, argmax = std::move(argmax)](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.upstream(self);
    Tensor<T>& dx = gr.grad_buffer(xv);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  });
}

template <typename T>
Var upsample2d(Graph<T>& g, Var xv) {
  const Tensor<T>& x = g.value(xv);
  require_rank(x, 3, "upsample2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = x.at(ch, y / 2, xx / 2);
    }
  }
  return g.emit(std::move(out), {xv}, [xv, c, h, w](Graph<T>& gr, Var self) {
    const Tensor<T>& dy = gr.upstream(self);
    Tensor<T>& dx = gr.grad_buffer(xv);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < 2 * h; ++y) {
        for (std::size_t xx = 0; xx < 2 * w; ++xx) dx.at(ch, y / 2, xx / 2) += dy.at(ch, y, xx);
      }
    }
  });
}

template <typename T>
Var softmax_spatial(Graph<T>& g, Var xv) {
  const Tensor<T>& x = g.value(xv);
  require_rank(x, 3, "softmax_spatial");
  if (x.dim(0) != 1) throw ShapeMismatch("softmax_spatial: expected a single channel");
  if (!x.all_finite()) throw NonFinite("softmax_spatial: non-finite input");
  const T peak = *std::max_element(x.data().begin(), x.data().end());
  Tensor<T> out(x.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - peak);
    total += static_cast<double>(out[i]);
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(static_cast<double>(out[i]) / total);
  return g.emit(std::move(out), {xv}, [xv](Graph<T>& gr, Var self) {
    const Tensor<T>& y = gr.value(self);
    const Tensor<T>& dy = gr.upstream(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += static_cast<double>(y[i]) * static_cast<double>(dy[i]);
    Tensor<T>& dx = gr.grad_buffer(xv);
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += y[i] * (dy[i] - static_cast<T>(dot));
  });
}

template <typename T>
Var kl_divergence(Graph<T>& g, const Tensor<T>& target, Var pv, double eps) {
  const Tensor<T>& pred = g.value(pv);
  require_same_shape(target, pred, "kl_divergence");
  const double tsum = static_cast<double>(target.sum());
  const double psum = static_cast<double>(pred.sum());
  if (std::abs(tsum - 1.0) > 1e-4 || std::abs(psum - 1.0) > 1e-4) {
    throw NotNormalized("kl_divergence: target sums to " + std::to_string(tsum) + ", prediction to " +
                        std::to_string(psum));
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double t = target[i];
    if (t < 0.0 || pred[i] < T{0}) throw NotNormalized("kl_divergence: negative probability");
    if (t == 0.0) continue;
    loss += t * (std::log(t + eps) - std::log(static_cast<double>(pred[i]) + eps));
  }
  Tensor<T> out({1}, std::vector<T>{static_cast<T>(loss)});
  return g.emit(std::move(out), {pv}, [pv, target, eps](Graph<T>& gr, Var self) {
    const T seed = gr.upstream(self)[0];
    const Tensor<T>& p = gr.value(pv);
    Tensor<T>& dp = gr.grad_buffer(pv);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (target[i] == T{0}) continue;
      dp[i] -= seed * static_cast<T>(static_cast<double>(target[i]) / (static_cast<double>(p[i]) + eps));
    }
  });
}

template <typename T>
Var weighted_sum(Graph<T>& g, Var xv, const Tensor<T>& weights) {
  const Tensor<T>& x = g.value(xv);
  require_same_shape(x, weights, "weighted_sum");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * static_cast<double>(weights[i]);
  Tensor<T> out({1}, std::vector<T>{static_cast<T>(acc)});
  return g.emit(std::move(out), {xv}, [xv, weights](Graph<T>& gr, Var self) {
    const T seed = gr.upstream(self)[0];
    Tensor<T>& dx = gr.grad_buffer(xv);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += seed * weights[i];
  });
}

template <typename T>
std::pair<Var, Var> convlstm_cell(Graph<T>& g, Var x, Var h_prev, Var c_prev, const ConvLstmWeights& w) {
  const Tensor<T>& h = g.value(h_prev);
  const Tensor<T>& c = g.value(c_prev);
  if (h.shape() != c.shape()) throw ShapeMismatch("convlstm_cell: h_prev and c_prev shapes differ");
  const Tensor<T>& k = g.value(w.kernel);
  require_rank(k, 4, "convlstm_cell kernel");
  const std::size_t hidden = h.dim(0);
  if (k.dim(0) != 4 * hidden) throw ShapeMismatch("convlstm_cell: kernel must produce 4 gate blocks");
  if (k.dim(2) != k.dim(3) || k.dim(2) % 2 == 0) throw ShapeMismatch("convlstm_cell: kernel must be odd and square");
  const int pad = static_cast<int>(k.dim(2) / 2);

  // conv(x; W_x) + conv(h; W_h) evaluated as one convolution over [x; h].
  const Var stacked = concat_channels(g, x, h_prev);
  const Var gates = conv2d(g, stacked, w.kernel, w.bias, 1, pad);
  const Var i = sigmoid(g, slice_channels(g, gates, 0, hidden));
  const Var f = sigmoid(g, slice_channels(g, gates, hidden, hidden));
  const Var o = sigmoid(g, slice_channels(g, gates, 2 * hidden, hidden));
  const Var cand = tanh(g, slice_channels(g, gates, 3 * hidden, hidden));
  const Var c_next = add(g, mul(g, f, c_prev), mul(g, i, cand));
  const Var h_next = mul(g, o, tanh(g, c_next));
  return {h_next, c_next};
}

double kl_value(std::span<const float> target, std::span<const float> pred, double eps) {
  if (target.size() != pred.size()) throw ShapeMismatch("kl_value: length mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double t = target[i];
    if (t == 0.0) continue;
    loss += t * (std::log(t + eps) - std::log(static_cast<double>(pred[i]) + eps));
  }
  return loss;
}

#define IEN_INSTANTIATE_OPS(T)                                                                   \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var, int, int);                                    \
  template Var add<T>(Graph<T>&, Var, Var);                                                      \
  template Var mul<T>(Graph<T>&, Var, Var);                                                      \
  template Var sigmoid<T>(Graph<T>&, Var);                                                       \
  template Var tanh<T>(Graph<T>&, Var);                                                          \
  template Var relu<T>(Graph<T>&, Var);                                                          \
  template Var slice_channels<T>(Graph<T>&, Var, std::size_t, std::size_t);                      \
  template Var concat_channels<T>(Graph<T>&, Var, Var);                                          \
  template Var maxpool2d<T>(Graph<T>&, Var);                                                     \
  template Var upsample2d<T>(Graph<T>&, Var);                                                    \
  template Var softmax_spatial<T>(Graph<T>&, Var);                                               \
  template Var kl_divergence<T>(Graph<T>&, const Tensor<T>&, Var, double);                       \
  template Var weighted_sum<T>(Graph<T>&, Var, const Tensor<T>&);                                \
  template std::pair<Var, Var> convlstm_cell<T>(Graph<T>&, Var, Var, Var, const ConvLstmWeights&);

IEN_INSTANTIATE_OPS(float)
IEN_INSTANTIATE_OPS(double)

}  // namespace ien
