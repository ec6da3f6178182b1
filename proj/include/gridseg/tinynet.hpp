#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gridseg/archspec.hpp"
#include "gridseg/rng.hpp"
#include "gridseg/shapecodec.hpp"

namespace gridseg {

using json = nlohmann::ordered_json;

/** @brief Dense row-major activation grid with channels last. */
struct Tensor {
  int h = 0, w = 0, c = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, 0.0) {}
  explicit Tensor(const TensorShape& s) : Tensor(s.h, s.w, s.c) {}

  TensorShape shape() const { return {h, w, c}; }
  std::size_t size() const { return data.size(); }
  double& at(int y, int x, int k) {
    return data[(static_cast<std::size_t>(y) * w + x) * c + k];
  }
  const double& at(int y, int x, int k) const {
    return data[(static_cast<std::size_t>(y) * w + x) * c + k];
  }
};

/** @brief Parameter arrays for one layer; unused arrays stay empty.
 *
 * Convolution weights are laid out [ky][kx][c_in][c_out], dense weights
 * [input][output], so the output channel always has stride one.
 */
struct LayerParams {
  std::vector<double> w;
  std::vector<double> b;
  std::vector<double> bn_gamma, bn_beta, bn_mean, bn_var;
};

struct Net {
  TensorShape input;
  std::vector<LayerSpec> layers;
  std::vector<LayerParams> params;
  std::vector<TensorShape> shapes;  // output of each layer

  TensorShape output_shape() const { return shapes.empty() ? input : shapes.back(); }
};

inline constexpr double kBnEps = 1e-5;

/** @brief Build a net with fan-in-scaled uniform weight init and zero biases. */
inline Net make_net(const TensorShape& input, const std::vector<LayerSpec>& layers,
                    std::uint64_t seed) {
  if (input.h < 1 || input.w < 1 || input.c < 1)
    throw std::invalid_argument("make_net: bad input shape");
  Net net;
  net.input = input;
  net.layers = layers;
  Rng rng(seed);
  TensorShape cur = input;
  for (const auto& spec : layers) {
    const TensorShape out = layer_output_shape(spec, cur);
    LayerParams p;
    switch (spec.kind) {
      case LayerKind::Conv:
      case LayerKind::TConv: {
        const long long fan_in = static_cast<long long>(spec.kh) * spec.kw * cur.c;
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        p.w.resize(static_cast<std::size_t>(fan_in) * spec.filters);
        for (auto& v : p.w) v = rng.uniform(-limit, limit);
        p.b.assign(static_cast<std::size_t>(spec.filters), 0.0);
        break;
      }
      case LayerKind::Dense: {
        const long long fan_in = cur.size();
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        p.w.resize(static_cast<std::size_t>(fan_in) * spec.filters);
        for (auto& v : p.w) v = rng.uniform(-limit, limit);
        p.b.assign(static_cast<std::size_t>(spec.filters), 0.0);
        break;
      }
      case LayerKind::BatchNorm: {
        p.bn_gamma.assign(static_cast<std::size_t>(cur.c), 1.0);
        p.bn_beta.assign(static_cast<std::size_t>(cur.c), 0.0);
        p.bn_mean.assign(static_cast<std::size_t>(cur.c), 0.0);
        p.bn_var.assign(static_cast<std::size_t>(cur.c), 1.0);
        break;
      }
      case LayerKind::DtFixed: {
        if (cur.c != spec.filters)
          throw std::invalid_argument("make_net: dt layer wants one input channel per level");
        if (spec.kh != 2 * spec.filters - 1 || spec.kw != spec.kh)
          throw std::invalid_argument("make_net: dt kernel must be 2*levels-1 square");
        break;
      }
      default:
        break;
    }
    net.params.push_back(std::move(p));
    net.shapes.push_back(out);
    cur = out;
  }
  return net;
}

inline Net make_net(const ArchTable& table, std::uint64_t seed) {
  return make_net(table.input, table.layers, seed);
}

namespace detail {

struct SamePad {
  int top = 0, left = 0;
};

inline SamePad same_pad(const LayerSpec& s, const TensorShape& in, const TensorShape& out) {
  SamePad p;
  p.top = std::max((out.h - 1) * s.stride + s.kh - in.h, 0) / 2;
  p.left = std::max((out.w - 1) * s.stride + s.kw - in.w, 0) / 2;
  return p;
}

inline void conv_forward(const LayerSpec& s, const LayerParams& p, const Tensor& in, Tensor& out) {
  const SamePad pad = same_pad(s, in.shape(), out.shape());
  for (int oy = 0; oy < out.h; ++oy)
    for (int ox = 0; ox < out.w; ++ox) {
      double* op = &out.at(oy, ox, 0);
      for (int k = 0; k < out.c; ++k) op[k] = p.b[static_cast<std::size_t>(k)];
      for (int ky = 0; ky < s.kh; ++ky) {
        const int iy = oy * s.stride + ky - pad.top;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < s.kw; ++kx) {
          const int ix = ox * s.stride + kx - pad.left;
          if (ix < 0 || ix >= in.w) continue;
          const double* ip = &in.at(iy, ix, 0);
          const double* wp = &p.w[static_cast<std::size_t>(ky * s.kw + kx) * in.c * out.c];
          for (int ci = 0; ci < in.c; ++ci) {
            const double a = ip[ci];
            const double* wr = wp + static_cast<std::size_t>(ci) * out.c;
            for (int k = 0; k < out.c; ++k) op[k] += a * wr[k];
          }
        }
      }
    }
}

inline void conv_backward(const LayerSpec& s, const LayerParams& p, const Tensor& in,
                          const Tensor& gout, Tensor& gin, LayerParams& gp) {
  const SamePad pad = same_pad(s, in.shape(), gout.shape());
  for (int oy = 0; oy < gout.h; ++oy)
    for (int ox = 0; ox < gout.w; ++ox) {
      const double* gop = &gout.at(oy, ox, 0);
      for (int k = 0; k < gout.c; ++k) gp.b[static_cast<std::size_t>(k)] += gop[k];
      for (int ky = 0; ky < s.kh; ++ky) {
        const int iy = oy * s.stride + ky - pad.top;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < s.kw; ++kx) {
          const int ix = ox * s.stride + kx - pad.left;
          if (ix < 0 || ix >= in.w) continue;
          const double* ip = &in.at(iy, ix, 0);
          double* gip = &gin.at(iy, ix, 0);
          const std::size_t base = static_cast<std::size_t>(ky * s.kw + kx) * in.c * gout.c;
          for (int ci = 0; ci < in.c; ++ci) {
            const double a = ip[ci];
            const double* wr = &p.w[base + static_cast<std::size_t>(ci) * gout.c];
            double* gwr = &gp.w[base + static_cast<std::size_t>(ci) * gout.c];
            double acc = 0.0;
            for (int k = 0; k < gout.c; ++k) {
              gwr[k] += a * gop[k];
              acc += wr[k] * gop[k];
            }
            gip[ci] += acc;
          }
        }
      }
    }
}

inline void tconv_forward(const LayerSpec& s, const LayerParams& p, const Tensor& in, Tensor& out) {
  for (int oy = 0; oy < out.h; ++oy)
    for (int ox = 0; ox < out.w; ++ox) {
      double* op = &out.at(oy, ox, 0);
      for (int k = 0; k < out.c; ++k) op[k] = p.b[static_cast<std::size_t>(k)];
    }
  for (int iy = 0; iy < in.h; ++iy)
    for (int ix = 0; ix < in.w; ++ix) {
      const double* ip = &in.at(iy, ix, 0);
      for (int ky = 0; ky < s.kh; ++ky)
        for (int kx = 0; kx < s.kw; ++kx) {
          double* op = &out.at(iy * s.stride + ky, ix * s.stride + kx, 0);
          const double* wp = &p.w[static_cast<std::size_t>(ky * s.kw + kx) * in.c * out.c];
          for (int ci = 0; ci < in.c; ++ci) {
            const double a = ip[ci];
            const double* wr = wp + static_cast<std::size_t>(ci) * out.c;
            for (int k = 0; k < out.c; ++k) op[k] += a * wr[k];
          }
        }
    }
}

inline void tconv_backward(const LayerSpec& s, const LayerParams& p, const Tensor& in,
                           const Tensor& gout, Tensor& gin, LayerParams& gp) {
  for (int oy = 0; oy < gout.h; ++oy)
    for (int ox = 0; ox < gout.w; ++ox) {
      const double* gop = &gout.at(oy, ox, 0);
      for (int k = 0; k < gout.c; ++k) gp.b[static_cast<std::size_t>(k)] += gop[k];
    }
  for (int iy = 0; iy < in.h; ++iy)
    for (int ix = 0; ix < in.w; ++ix) {
      const double* ip = &in.at(iy, ix, 0);
      double* gip = &gin.at(iy, ix, 0);
      for (int ky = 0; ky < s.kh; ++ky)
        for (int kx = 0; kx < s.kw; ++kx) {
          const double* gop = &gout.at(iy * s.stride + ky, ix * s.stride + kx, 0);
          const std::size_t base = static_cast<std::size_t>(ky * s.kw + kx) * in.c * gout.c;
          for (int ci = 0; ci < in.c; ++ci) {
            const double a = ip[ci];
            const double* wr = &p.w[base + static_cast<std::size_t>(ci) * gout.c];
            double* gwr = &gp.w[base + static_cast<std::size_t>(ci) * gout.c];
            double acc = 0.0;
            for (int k = 0; k < gout.c; ++k) {
              gwr[k] += a * gop[k];
              acc += wr[k] * gop[k];
            }
            gip[ci] += acc;
          }
        }
    }
}

inline void maxpool_forward(const LayerSpec& s, const Tensor& in, Tensor& out,
                            std::vector<int>& argmax) {
  argmax.assign(out.size(), -1);
  for (int oy = 0; oy < out.h; ++oy)
    for (int ox = 0; ox < out.w; ++ox)
      for (int k = 0; k < out.c; ++k) {
        double best = -std::numeric_limits<double>::infinity();
        int best_idx = -1;
        for (int ky = 0; ky < s.kh; ++ky) {
          const int iy = oy * s.stride + ky;
          if (iy >= in.h) continue;
          for (int kx = 0; kx < s.kw; ++kx) {
            const int ix = ox * s.stride + kx;
            if (ix >= in.w) continue;
            const double v = in.at(iy, ix, k);
            if (v > best) {
              best = v;
              best_idx = (iy * in.w + ix) * in.c + k;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(oy) * out.w + ox) * out.c + k;
        out.data[o] = best;
        argmax[o] = best_idx;
      }
}

inline void maxpool_backward(const Tensor& gout, const std::vector<int>& argmax, Tensor& gin) {
  for (std::size_t o = 0; o < gout.data.size(); ++o)
    if (argmax[o] >= 0) gin.data[static_cast<std::size_t>(argmax[o])] += gout.data[o];
}

inline void upsample_forward(const LayerSpec& s, const Tensor& in, Tensor& out) {
  for (int oy = 0; oy < out.h; ++oy)
    for (int ox = 0; ox < out.w; ++ox) {
      const double* ip = &in.at(oy / s.kh, ox / s.kw, 0);
      double* op = &out.at(oy, ox, 0);
      for (int k = 0; k < out.c; ++k) op[k] = ip[k];
    }
}

inline void upsample_backward(const LayerSpec& s, const Tensor& gout, Tensor& gin) {
  for (int oy = 0; oy < gout.h; ++oy)
    for (int ox = 0; ox < gout.w; ++ox) {
      const double* gop = &gout.at(oy, ox, 0);
      double* gip = &gin.at(oy / s.kh, ox / s.kw, 0);
      for (int k = 0; k < gout.c; ++k) gip[k] += gop[k];
    }
}

inline void dense_forward(const LayerParams& p, const Tensor& in, Tensor& out) {
  const std::size_t n_in = in.size();
  const int n_out = out.c;
  for (int o = 0; o < n_out; ++o) out.data[static_cast<std::size_t>(o)] = p.b[static_cast<std::size_t>(o)];
  for (std::size_t i = 0; i < n_in; ++i) {
    const double a = in.data[i];
    const double* wr = &p.w[i * n_out];
    for (int o = 0; o < n_out; ++o) out.data[static_cast<std::size_t>(o)] += a * wr[o];
  }
}

inline void dense_backward(const LayerParams& p, const Tensor& in, const Tensor& gout, Tensor& gin,
                           LayerParams& gp) {
  const std::size_t n_in = in.size();
  const int n_out = gout.c;
  for (int o = 0; o < n_out; ++o) gp.b[static_cast<std::size_t>(o)] += gout.data[static_cast<std::size_t>(o)];
  for (std::size_t i = 0; i < n_in; ++i) {
    const double a = in.data[i];
    const double* wr = &p.w[i * n_out];
    double* gwr = &gp.w[i * n_out];
    double acc = 0.0;
    for (int o = 0; o < n_out; ++o) {
      gwr[o] += a * gout.data[static_cast<std::size_t>(o)];
      acc += wr[o] * gout.data[static_cast<std::size_t>(o)];
    }
    gin.data[i] += acc;
  }
}

inline void dt_fixed_forward(const LayerSpec& s, const Tensor& in, Tensor& out) {
  std::fill(out.data.begin(), out.data.end(), 0.0);
  for (int r = 0; r < s.filters; ++r) {
    const auto& offs = disc_offsets(r + 1);
    for (int y = 0; y < in.h; ++y)
      for (int x = 0; x < in.w; ++x) {
        double acc = 0.0;
        for (const auto& [dx, dy] : offs) {
          const int iy = y + dy, ix = x + dx;
          if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
          acc += in.at(iy, ix, r);
        }
        out.at(y, x, r) = acc;
      }
  }
}

inline void dt_fixed_backward(const LayerSpec& s, const Tensor& gout, Tensor& gin) {
  for (int r = 0; r < s.filters; ++r) {
    const auto& offs = disc_offsets(r + 1);
    for (int y = 0; y < gout.h; ++y)
      for (int x = 0; x < gout.w; ++x) {
        const double g = gout.at(y, x, r);
        if (g == 0.0) continue;
        for (const auto& [dx, dy] : offs) {
          const int iy = y + dy, ix = x + dx;
          if (iy < 0 || iy >= gout.h || ix < 0 || ix >= gout.w) continue;
          gin.at(iy, ix, r) += g;
        }
      }
  }
}

}  // namespace detail

/** @brief Activations and statistics recorded during a forward pass for backprop. */
struct NetCache {
  bool training = false;
  std::vector<std::vector<Tensor>> acts;             // acts[i] feeds layer i; acts.back() is the output
  std::vector<std::vector<int>> pool_argmax;         // per layer, concatenated over the batch
  std::vector<std::vector<double>> bn_mean, bn_var;  // statistics actually used in the pass
};

/** @brief Run a batch through the net; records a cache for backward when given one.
 *
 * With training=true batch-norm uses batch statistics; otherwise the stored
 * running statistics. The net itself is never mutated (running statistics are
 * updated separately by update_bn_running).
 */
inline std::vector<Tensor> net_forward(const Net& net, const std::vector<Tensor>& input,
                                       NetCache* cache = nullptr, bool training = false) {
  if (input.empty()) throw std::invalid_argument("net_forward: empty batch");
  for (const auto& t : input)
    if (!(t.shape() == net.input)) throw std::invalid_argument("net_forward: input shape mismatch");
  const std::size_t batch = input.size();
  if (cache) {
    cache->training = training;
    cache->acts.assign(net.layers.size() + 1, {});
    cache->pool_argmax.assign(net.layers.size(), {});
    cache->bn_mean.assign(net.layers.size(), {});
    cache->bn_var.assign(net.layers.size(), {});
    cache->acts[0] = input;
  }
  std::vector<Tensor> cur = input;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& spec = net.layers[li];
    const LayerParams& p = net.params[li];
    const TensorShape out_shape = net.shapes[li];
    std::vector<Tensor> next(batch, Tensor(out_shape));
    switch (spec.kind) {
      case LayerKind::Conv:
        for (std::size_t n = 0; n < batch; ++n) detail::conv_forward(spec, p, cur[n], next[n]);
        break;
      case LayerKind::TConv:
        for (std::size_t n = 0; n < batch; ++n) detail::tconv_forward(spec, p, cur[n], next[n]);
        break;
      case LayerKind::MaxPool: {
        std::vector<int> all_argmax;
        for (std::size_t n = 0; n < batch; ++n) {
          std::vector<int> am;
          detail::maxpool_forward(spec, cur[n], next[n], am);
          all_argmax.insert(all_argmax.end(), am.begin(), am.end());
        }
        if (cache) cache->pool_argmax[li] = std::move(all_argmax);
        break;
      }
      case LayerKind::Upsample:
        for (std::size_t n = 0; n < batch; ++n) detail::upsample_forward(spec, cur[n], next[n]);
        break;
      case LayerKind::Dense:
        for (std::size_t n = 0; n < batch; ++n) detail::dense_forward(p, cur[n], next[n]);
        break;
      case LayerKind::DtFixed:
        for (std::size_t n = 0; n < batch; ++n) detail::dt_fixed_forward(spec, cur[n], next[n]);
        break;
      case LayerKind::LeakyRelu:
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < cur[n].data.size(); ++i) {
            const double v = cur[n].data[i];
            next[n].data[i] = v > 0.0 ? v : spec.alpha * v;
          }
        break;
      case LayerKind::Sigmoid:
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < cur[n].data.size(); ++i)
            next[n].data[i] = 1.0 / (1.0 + std::exp(-cur[n].data[i]));
        break;
      case LayerKind::BatchNorm: {
        const int channels = out_shape.c;
        std::vector<double> mean, var;
        if (training) {
          mean.assign(static_cast<std::size_t>(channels), 0.0);
          var.assign(static_cast<std::size_t>(channels), 0.0);
          const double count = static_cast<double>(batch) * out_shape.h * out_shape.w;
          for (const auto& t : cur)
            for (std::size_t i = 0; i < t.data.size(); ++i)
              mean[i % channels] += t.data[i];
          for (auto& m : mean) m /= count;
          for (const auto& t : cur)
            for (std::size_t i = 0; i < t.data.size(); ++i) {
              const double d = t.data[i] - mean[i % channels];
              var[i % channels] += d * d;
            }
          for (auto& v : var) v /= count;
        } else {
          mean = p.bn_mean;
          var = p.bn_var;
        }
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < cur[n].data.size(); ++i) {
            const std::size_t k = i % channels;
            next[n].data[i] = p.bn_gamma[k] * (cur[n].data[i] - mean[k]) /
                                  std::sqrt(var[k] + kBnEps) +
                              p.bn_beta[k];
          }
        if (cache) {
          cache->bn_mean[li] = std::move(mean);
          cache->bn_var[li] = std::move(var);
        }
        break;
      }
    }
    cur = std::move(next);
    if (cache) cache->acts[li + 1] = cur;
  }
  return cur;
}

inline Tensor net_forward1(const Net& net, const Tensor& input) {
  return net_forward(net, std::vector<Tensor>{input})[0];
}

/** @brief Gradient accumulators shaped exactly like the net's parameters. */
struct NetGrads {
  std::vector<LayerParams> layers;
};

inline NetGrads make_grads(const Net& net) {
  NetGrads g;
  g.layers.resize(net.params.size());
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    const LayerParams& p = net.params[i];
    g.layers[i].w.assign(p.w.size(), 0.0);
    g.layers[i].b.assign(p.b.size(), 0.0);
    g.layers[i].bn_gamma.assign(p.bn_gamma.size(), 0.0);
    g.layers[i].bn_beta.assign(p.bn_beta.size(), 0.0);
  }
  return g;
}

inline void zero_grads(NetGrads& g) {
  for (auto& l : g.layers) {
    std::fill(l.w.begin(), l.w.end(), 0.0);
    std::fill(l.b.begin(), l.b.end(), 0.0);
    std::fill(l.bn_gamma.begin(), l.bn_gamma.end(), 0.0);
    std::fill(l.bn_beta.begin(), l.bn_beta.end(), 0.0);
  }
}

inline void scale_grads(NetGrads& g, double factor) {
  for (auto& l : g.layers) {
    for (auto& v : l.w) v *= factor;
    for (auto& v : l.b) v *= factor;
    for (auto& v : l.bn_gamma) v *= factor;
    for (auto& v : l.bn_beta) v *= factor;
  }
}

/** @brief Backpropagate output gradients; accumulates into grads, returns input gradients. */
inline std::vector<Tensor> net_backward(const Net& net, const NetCache& cache,
                                        const std::vector<Tensor>& grad_out, NetGrads& grads) {
  if (cache.acts.size() != net.layers.size() + 1)
    throw std::invalid_argument("net_backward: cache missing or from another net");
  const std::size_t batch = cache.acts[0].size();
  if (grad_out.size() != batch) throw std::invalid_argument("net_backward: batch size mismatch");
  if (grads.layers.size() != net.params.size())
    throw std::invalid_argument("net_backward: grads not built for this net");

  std::vector<Tensor> gcur = grad_out;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const LayerSpec& spec = net.layers[li];
    const LayerParams& p = net.params[li];
    LayerParams& gp = grads.layers[li];
    const std::vector<Tensor>& in = cache.acts[li];
    const std::vector<Tensor>& out = cache.acts[li + 1];
    std::vector<Tensor> gprev(batch, Tensor(in[0].shape()));
    switch (spec.kind) {
      case LayerKind::Conv:
        for (std::size_t n = 0; n < batch; ++n)
          detail::conv_backward(spec, p, in[n], gcur[n], gprev[n], gp);
        break;
      case LayerKind::TConv:
        for (std::size_t n = 0; n < batch; ++n)
          detail::tconv_backward(spec, p, in[n], gcur[n], gprev[n], gp);
        break;
      case LayerKind::MaxPool: {
        const std::vector<int>& am = cache.pool_argmax[li];
        const std::size_t per = gcur[0].size();
        for (std::size_t n = 0; n < batch; ++n) {
          std::vector<int> slice(am.begin() + static_cast<std::ptrdiff_t>(n * per),
                                 am.begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
          detail::maxpool_backward(gcur[n], slice, gprev[n]);
        }
        break;
      }
      case LayerKind::Upsample:
        for (std::size_t n = 0; n < batch; ++n) detail::upsample_backward(spec, gcur[n], gprev[n]);
        break;
      case LayerKind::Dense:
        for (std::size_t n = 0; n < batch; ++n)
          detail::dense_backward(p, in[n], gcur[n], gprev[n], gp);
        break;
      case LayerKind::DtFixed:
        for (std::size_t n = 0; n < batch; ++n) detail::dt_fixed_backward(spec, gcur[n], gprev[n]);
        break;
      case LayerKind::LeakyRelu:
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < gcur[n].data.size(); ++i)
            gprev[n].data[i] = (in[n].data[i] > 0.0 ? 1.0 : spec.alpha) * gcur[n].data[i];
        break;
      case LayerKind::Sigmoid:
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < gcur[n].data.size(); ++i) {
            const double y = out[n].data[i];
            gprev[n].data[i] = gcur[n].data[i] * y * (1.0 - y);
          }
        break;
      case LayerKind::BatchNorm: {
        const int channels = in[0].c;
        const std::vector<double>& mean = cache.bn_mean[li];
        const std::vector<double>& var = cache.bn_var[li];
        std::vector<double> inv_std(static_cast<std::size_t>(channels));
        for (int k = 0; k < channels; ++k)
          inv_std[static_cast<std::size_t>(k)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(k)] + kBnEps);
        std::vector<double> sum_dy(static_cast<std::size_t>(channels), 0.0);
        std::vector<double> sum_dy_xhat(static_cast<std::size_t>(channels), 0.0);
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < gcur[n].data.size(); ++i) {
            const std::size_t k = i % channels;
            const double xhat = (in[n].data[i] - mean[k]) * inv_std[k];
            sum_dy[k] += gcur[n].data[i];
            sum_dy_xhat[k] += gcur[n].data[i] * xhat;
          }
        for (int k = 0; k < channels; ++k) {
          gp.bn_beta[static_cast<std::size_t>(k)] += sum_dy[static_cast<std::size_t>(k)];
          gp.bn_gamma[static_cast<std::size_t>(k)] += sum_dy_xhat[static_cast<std::size_t>(k)];
        }
        const double count = static_cast<double>(batch) * in[0].h * in[0].w;
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < gcur[n].data.size(); ++i) {
            const std::size_t k = i % channels;
            const double xhat = (in[n].data[i] - mean[k]) * inv_std[k];
            if (cache.training) {
              gprev[n].data[i] = p.bn_gamma[k] * inv_std[k] *
                                 (gcur[n].data[i] - sum_dy[k] / count - xhat * sum_dy_xhat[k] / count);
            } else {
              gprev[n].data[i] = p.bn_gamma[k] * inv_std[k] * gcur[n].data[i];
            }
          }
        break;
      }
    }
    gcur = std::move(gprev);
  }
  return gcur;
}

/** @brief Blend the batch statistics of a training pass into the running estimates. */
inline void update_bn_running(Net& net, const NetCache& cache, double update = 0.1) {
  if (!cache.training) throw std::invalid_argument("update_bn_running: cache is not a training pass");
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    if (net.layers[li].kind != LayerKind::BatchNorm) continue;
    LayerParams& p = net.params[li];
    for (std::size_t k = 0; k < p.bn_mean.size(); ++k) {
      p.bn_mean[k] = (1.0 - update) * p.bn_mean[k] + update * cache.bn_mean[li][k];
      p.bn_var[k] = (1.0 - update) * p.bn_var[k] + update * cache.bn_var[li][k];
    }
  }
}

/** @brief Contiguous (last batch index, learning rate) bands; the last rate persists. */
struct LrSchedule {
  struct Band {
    long long last = 0;
    double rate = 0.0;
  };
  std::vector<Band> bands;

  double rate_at(long long batch_index) const {
    if (bands.empty()) throw std::logic_error("LrSchedule: empty");
    for (const auto& b : bands)
      if (batch_index <= b.last) return b.rate;
    return bands.back().rate;
  }
};

inline LrSchedule constant_schedule(double rate) {
  if (rate <= 0.0) throw std::invalid_argument("constant_schedule: rate must be positive");
  return LrSchedule{{{std::numeric_limits<long long>::max(), rate}}};
}

/** @brief The detection-training schedule, with band edges scaled for desk-size runs.
 *
 * Batch indices count accumulated updates (64 examples each) starting at 1.
 */
inline LrSchedule detection_schedule(double scale = 1.0) {
  if (scale <= 0.0) throw std::invalid_argument("detection_schedule: scale must be positive");
  static constexpr long long kEdges[] = {200, 400, 20000, 30000, 40000, 50000, 60000, 65000};
  static constexpr double kRates[] = {1e-3,    2.5e-3,  5e-3,    2.5e-3,
                                      1.25e-3, 6.25e-4, 3.16e-4, 1.56e-4};
  LrSchedule s;
  long long prev = 0;
  for (int i = 0; i < 8; ++i) {
    const long long edge =
        std::max(prev + 1, static_cast<long long>(std::llround(kEdges[i] * scale)));
    s.bands.push_back({edge, kRates[i]});
    prev = edge;
  }
  return s;
}

/** @brief Momentum buffers plus the hyperparameters of the update rule. */
struct OptimState {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule schedule;
  std::vector<LayerParams> velocity;
};

inline OptimState make_optim(const Net& net, LrSchedule schedule, double momentum = 0.9,
                             double weight_decay = 5e-4) {
  OptimState o;
  o.momentum = momentum;
  o.weight_decay = weight_decay;
  o.schedule = std::move(schedule);
  o.velocity = make_grads(net).layers;
  return o;
}

/** @brief v <- m v - lr (g + wd w); w <- w + v, applied to every trainable array. */
inline void sgd_step(Net& net, const NetGrads& grads, OptimState& opt, long long batch_index) {
  const double lr = opt.schedule.rate_at(batch_index);
  const auto update = [&](std::vector<double>& w, const std::vector<double>& g,
                          std::vector<double>& v) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = opt.momentum * v[i] - lr * (g[i] + opt.weight_decay * w[i]);
      w[i] += v[i];
    }
  };
  for (std::size_t li = 0; li < net.params.size(); ++li) {
    update(net.params[li].w, grads.layers[li].w, opt.velocity[li].w);
    update(net.params[li].b, grads.layers[li].b, opt.velocity[li].b);
    update(net.params[li].bn_gamma, grads.layers[li].bn_gamma, opt.velocity[li].bn_gamma);
    update(net.params[li].bn_beta, grads.layers[li].bn_beta, opt.velocity[li].bn_beta);
  }
}

/** @brief Merge every batch-norm layer into the affine layer directly before it.
 *
 * Uses the running statistics, so the folded net reproduces inference-mode
 * outputs. The result carries no batch-norm layers at all.
 */
inline Net fold_batchnorm(const Net& net) {
  Net out;
  out.input = net.input;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& spec = net.layers[i];
    if (spec.kind != LayerKind::BatchNorm) {
      out.layers.push_back(spec);
      out.params.push_back(net.params[i]);
      out.shapes.push_back(net.shapes[i]);
      continue;
    }
    const bool has_affine_before =
        i > 0 && (net.layers[i - 1].kind == LayerKind::Conv ||
                  net.layers[i - 1].kind == LayerKind::TConv ||
                  net.layers[i - 1].kind == LayerKind::Dense);
    if (!has_affine_before)
      throw std::invalid_argument("fold_batchnorm: batch-norm without a preceding affine layer");
    LayerParams& prev = out.params.back();
    const LayerParams& bn = net.params[i];
    const std::size_t channels = bn.bn_gamma.size();
    for (std::size_t k = 0; k < channels; ++k) {
      const double scale = bn.bn_gamma[k] / std::sqrt(bn.bn_var[k] + kBnEps);
      for (std::size_t j = k; j < prev.w.size(); j += channels) prev.w[j] *= scale;
      prev.b[k] = (prev.b[k] - bn.bn_mean[k]) * scale + bn.bn_beta[k];
    }
  }
  return out;
}

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint: unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& out, const std::vector<double>& values) {
  for (double d : values) {
    const float f = static_cast<float>(d);
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, 4);
    write_u32(out, bits);
  }
}

inline void read_f32(std::istream& in, std::vector<double>& values) {
  for (double& d : values) {
    const std::uint32_t bits = read_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    d = static_cast<double>(f);
  }
}

}  // namespace detail

/** @brief Checkpoint format: u32 header length, JSON header, raw f32 parameter blob. */
inline void save_net(const Net& net, const std::string& path) {
  json header;
  header["format"] = "gridseg-net-v1";
  header["input"] = {{"h", net.input.h}, {"w", net.input.w}, {"c", net.input.c}};
  header["layers"] = json::array();
  for (const auto& spec : net.layers)
    header["layers"].push_back({{"kind", layer_kind_name(spec.kind)},
                                {"filters", spec.filters},
                                {"kh", spec.kh},
                                {"kw", spec.kw},
                                {"stride", spec.stride},
                                {"alpha", spec.alpha}});
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_net: cannot open " + path);
  detail::write_u32(out, static_cast<std::uint32_t>(head.size()));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& p : net.params) {
    detail::write_f32(out, p.w);
    detail::write_f32(out, p.b);
    detail::write_f32(out, p.bn_gamma);
    detail::write_f32(out, p.bn_beta);
    detail::write_f32(out, p.bn_mean);
    detail::write_f32(out, p.bn_var);
  }
  if (!out) throw std::runtime_error("save_net: write failed for " + path);
}

inline Net load_net(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_net: cannot open " + path);
  const std::uint32_t head_len = detail::read_u32(in);
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw std::runtime_error("load_net: truncated header");
  json header;
  try {
    header = json::parse(head);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("load_net: bad header: ") + e.what());
  }
  if (header.value("format", "") != "gridseg-net-v1")
    throw std::runtime_error("load_net: unknown checkpoint format");
  TensorShape input{header["input"]["h"].get<int>(), header["input"]["w"].get<int>(),
                    header["input"]["c"].get<int>()};
  std::vector<LayerSpec> layers;
  for (const auto& row : header["layers"]) {
    LayerSpec spec;
    spec.kind = layer_kind_from_name(row["kind"].get<std::string>());
    spec.filters = row["filters"].get<int>();
    spec.kh = row["kh"].get<int>();
    spec.kw = row["kw"].get<int>();
    spec.stride = row["stride"].get<int>();
    spec.alpha = row["alpha"].get<double>();
    layers.push_back(spec);
  }
  Net net = make_net(input, layers, 0);
  for (auto& p : net.params) {
    detail::read_f32(in, p.w);
    detail::read_f32(in, p.b);
    detail::read_f32(in, p.bn_gamma);
    detail::read_f32(in, p.bn_beta);
    detail::read_f32(in, p.bn_mean);
    detail::read_f32(in, p.bn_var);
  }
  if (!in) throw std::runtime_error("load_net: truncated parameter blob");
  return net;
}

}  // namespace gridseg
