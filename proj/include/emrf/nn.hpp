#pragma once

// Network primitives over NCHW tensors: convolution, layer norm, softmax,
// activations, directional pooling and the space/depth resamplers.

#include <cmath>

#include "emrf/tensor.hpp"

namespace emrf {

struct ConvKernel {
  Tensor weights;  // [out_c, in_c/groups, kh, kw]
  Tensor bias;     // [out_c] or empty
  int64_t stride = 1;
  int64_t padding = 0;  // zero padding on all sides
  int64_t groups = 1;
  bool has_bias = false;
};

inline ConvKernel make_conv(Tensor weights, Tensor bias, int64_t stride, int64_t padding,
                            int64_t groups) {
  ConvKernel k;
  EMRF_CHECK(weights.rank() == 4, "conv kernel must be rank 4, got ",
             shape_str(weights.shape()));
  k.weights = std::move(weights);
  k.bias = std::move(bias);
  k.has_bias = k.bias.numel() > 0 && k.bias.rank() == 1;
  k.stride = stride;
  k.padding = padding;
  k.groups = groups;
  return k;
}

// Cross-correlation, zero padding.
inline Tensor conv2d(const Tensor& x, const ConvKernel& k) {
  EMRF_CHECK(x.rank() == 4, "conv2d: input must be NCHW, got ", shape_str(x.shape()));
  int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  int64_t OC = k.weights.extent(0), ICG = k.weights.extent(1);
  int64_t KH = k.weights.extent(2), KW = k.weights.extent(3);
  int64_t G = k.groups, S = k.stride, P = k.padding;
  EMRF_CHECK(G >= 1 && C % G == 0 && OC % G == 0,
             "conv2d: groups ", G, " must divide channels ", C, " and ", OC);
  EMRF_CHECK(ICG == C / G, "conv2d: kernel expects ", ICG * G, " input channels, got ", C);
  EMRF_CHECK(H + 2 * P >= KH && W + 2 * P >= KW,
             "conv2d: spatial extent ", H, "x", W, " too small for kernel ", KH, "x", KW,
             " with padding ", P);
  if (k.has_bias) EMRF_CHECK(k.bias.extent(0) == OC, "conv2d: bias extent mismatch");

  int64_t OH = (H + 2 * P - KH) / S + 1;
  int64_t OW = (W + 2 * P - KW) / S + 1;
  int64_t ocg = OC / G;
  flop_counter() += 2 * N * OC * OH * OW * ICG * KH * KW;

  std::vector<double> out(size_t(N * OC * OH * OW), 0.0);
  const double* px = x.data().data();
  const double* pw = k.weights.data().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t g = 0; g < G; ++g)
      for (int64_t oc = g * ocg; oc < (g + 1) * ocg; ++oc) {
        double b = k.has_bias ? k.bias.at(oc) : 0.0;
        for (int64_t oh = 0; oh < OH; ++oh)
          for (int64_t ow = 0; ow < OW; ++ow) {
            double acc = b;
            for (int64_t ic = 0; ic < ICG; ++ic) {
              int64_t c = g * ICG + ic;
              const double* xplane = px + ((n * C + c) * H) * W;
              const double* wplane = pw + ((oc * ICG + ic) * KH) * KW;
              for (int64_t kh = 0; kh < KH; ++kh) {
                int64_t ih = oh * S - P + kh;
                if (ih < 0 || ih >= H) continue;
                for (int64_t kw = 0; kw < KW; ++kw) {
                  int64_t iw = ow * S - P + kw;
                  if (iw < 0 || iw >= W) continue;
                  acc += xplane[ih * W + iw] * wplane[kh * KW + kw];
                }
              }
            }
            out[size_t(((n * OC + oc) * OH + oh) * OW + ow)] = acc;
          }
      }

  std::initializer_list<const Tensor*> inputs_with_bias = {&x, &k.weights, &k.bias};
  std::initializer_list<const Tensor*> inputs_no_bias = {&x, &k.weights};
  bool hb = k.has_bias;
  auto pull = [N, C, H, W, OC, ICG, KH, KW, G, S, P, OH, OW, ocg, hb](Node& nd) {
    Node& nx = *nd.parents[0];
    Node& nw = *nd.parents[1];
    nx.ensure_grad();
    nw.ensure_grad();
    Node* nb = hb ? nd.parents[2].get() : nullptr;
    if (nb) nb->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t g = 0; g < G; ++g)
        for (int64_t oc = g * ocg; oc < (g + 1) * ocg; ++oc)
          for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
              double go = nd.grad[size_t(((n * OC + oc) * OH + oh) * OW + ow)];
              if (go == 0.0) continue;
              if (nb) nb->grad[size_t(oc)] += go;
              for (int64_t ic = 0; ic < ICG; ++ic) {
                int64_t c = g * ICG + ic;
                double* gx = nx.grad.data() + ((n * C + c) * H) * W;
                const double* vx = nx.values.data() + ((n * C + c) * H) * W;
                double* gw = nw.grad.data() + ((oc * ICG + ic) * KH) * KW;
                const double* vw = nw.values.data() + ((oc * ICG + ic) * KH) * KW;
                for (int64_t kh = 0; kh < KH; ++kh) {
                  int64_t ih = oh * S - P + kh;
                  if (ih < 0 || ih >= H) continue;
                  for (int64_t kw = 0; kw < KW; ++kw) {
                    int64_t iw = ow * S - P + kw;
                    if (iw < 0 || iw >= W) continue;
                    gx[ih * W + iw] += go * vw[kh * KW + kw];
                    gw[kh * KW + kw] += go * vx[ih * W + iw];
                  }
                }
              }
            }
  };
  return hb ? detail::make_result({N, OC, OH, OW}, std::move(out), inputs_with_bias, pull)
            : detail::make_result({N, OC, OH, OW}, std::move(out), inputs_no_bias, pull);
}

// Per spatial position, standardize across channels, then scale and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset,
                         double eps = 1e-6) {
  EMRF_CHECK(x.rank() == 4, "layer_norm: input must be NCHW");
  EMRF_CHECK(eps > 0, "layer_norm: eps must be positive");
  int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  EMRF_CHECK(gain.numel() == C && offset.numel() == C,
             "layer_norm: gain/offset must have ", C, " elements");

  int64_t HW = H * W;
  std::vector<double> out(size_t(x.numel()));
  std::vector<double> mu(size_t(N * HW)), inv_sigma(size_t(N * HW));
  const double* px = x.data().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < HW; ++p) {
      double m = 0.0;
      for (int64_t c = 0; c < C; ++c) m += px[(n * C + c) * HW + p];
      m /= double(C);
      double v = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        double d = px[(n * C + c) * HW + p] - m;
        v += d * d;
      }
      v /= double(C);
      double is = 1.0 / std::sqrt(v + eps);
      mu[size_t(n * HW + p)] = m;
      inv_sigma[size_t(n * HW + p)] = is;
      for (int64_t c = 0; c < C; ++c)
        out[size_t((n * C + c) * HW + p)] =
            (px[(n * C + c) * HW + p] - m) * is * gain.at(c) + offset.at(c);
    }

  auto mu_s = std::make_shared<std::vector<double>>(std::move(mu));
  auto is_s = std::make_shared<std::vector<double>>(std::move(inv_sigma));
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gain, &offset},
      [N, C, HW, mu_s, is_s](Node& nd) {
        Node& nx = *nd.parents[0];
        Node& ng = *nd.parents[1];
        Node& no = *nd.parents[2];
        nx.ensure_grad();
        ng.ensure_grad();
        no.ensure_grad();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t p = 0; p < HW; ++p) {
            double m = (*mu_s)[size_t(n * HW + p)];
            double is = (*is_s)[size_t(n * HW + p)];
            // accumulate the two coupling sums over channels
            double sum_gy = 0.0, sum_gyx = 0.0;
            for (int64_t c = 0; c < C; ++c) {
              double xc = nx.values[size_t((n * C + c) * HW + p)];
              double xhat = (xc - m) * is;
              double gy = nd.grad[size_t((n * C + c) * HW + p)];
              double g_xhat = gy * ng.values[size_t(c)];
              ng.grad[size_t(c)] += gy * xhat;
              no.grad[size_t(c)] += gy;
              sum_gy += g_xhat;
              sum_gyx += g_xhat * xhat;
            }
            for (int64_t c = 0; c < C; ++c) {
              double xc = nx.values[size_t((n * C + c) * HW + p)];
              double xhat = (xc - m) * is;
              double gy = nd.grad[size_t((n * C + c) * HW + p)];
              double g_xhat = gy * ng.values[size_t(c)];
              nx.grad[size_t((n * C + c) * HW + p)] +=
                  is * (g_xhat - sum_gy / double(C) - xhat * sum_gyx / double(C));
            }
          }
      });
}

// Max-subtracted softmax along one axis.
inline Tensor softmax(const Tensor& x, size_t axis) {
  EMRF_CHECK(axis < x.rank(), "softmax: axis ", axis, " invalid for ",
             shape_str(x.shape()));
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1, ax = s[axis];
  for (size_t d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];

  std::vector<double> out(size_t(x.numel()));
  const double* px = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t a = 0; a < ax; ++a)
        mx = std::max(mx, px[(o * ax + a) * inner + in]);
      double z = 0.0;
      for (int64_t a = 0; a < ax; ++a) {
        double e = std::exp(px[(o * ax + a) * inner + in] - mx);
        out[size_t((o * ax + a) * inner + in)] = e;
        z += e;
      }
      for (int64_t a = 0; a < ax; ++a) out[size_t((o * ax + a) * inner + in)] /= z;
    }

  return detail::make_result(x.shape(), std::move(out), {&x},
                             [outer, inner, ax](Node& nd) {
                               Node& nx = *nd.parents[0];
                               nx.ensure_grad();
                               for (int64_t o = 0; o < outer; ++o)
                                 for (int64_t in = 0; in < inner; ++in) {
                                   double dot = 0.0;
                                   for (int64_t a = 0; a < ax; ++a) {
                                     size_t i = size_t((o * ax + a) * inner + in);
                                     dot += nd.grad[i] * nd.values[i];
                                   }
                                   for (int64_t a = 0; a < ax; ++a) {
                                     size_t i = size_t((o * ax + a) * inner + in);
                                     nx.grad[i] += nd.values[i] * (nd.grad[i] - dot);
                                   }
                                 }
                             });
}

enum class Activation { Relu, Gelu, Sigmoid };

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_result(x.shape(), std::move(out), {&x}, [](Node& nd) {
    Node& nx = *nd.parents[0];
    nx.ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i)
      if (nx.values[i] > 0.0) nx.grad[i] += nd.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.data());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return detail::make_result(x.shape(), std::move(out), {&x}, [](Node& nd) {
    Node& nx = *nd.parents[0];
    nx.ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i)
      nx.grad[i] += nd.grad[i] * nd.values[i] * (1.0 - nd.values[i]);
  });
}

// tanh approximation with the stated constants
inline constexpr double kGeluA = 0.7978845608;  // sqrt(2/pi)
inline constexpr double kGeluB = 0.044715;

inline Tensor gelu(const Tensor& x) {
  constexpr double kA = kGeluA;
  constexpr double kB = kGeluB;
  std::vector<double> out(x.data());
  for (double& v : out) {
    double u = kA * (v + kB * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, [](Node& nd) {
    constexpr double kA = kGeluA;
    constexpr double kB = kGeluB;
    Node& nx = *nd.parents[0];
    nx.ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) {
      double v = nx.values[i];
      double u = kA * (v + kB * v * v * v);
      double t = std::tanh(u);
      double du = kA * (1.0 + 3.0 * kB * v * v);
      double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      nx.grad[i] += nd.grad[i] * d;
    }
  });
}

inline Tensor activate(Activation kind, const Tensor& x) {
  switch (kind) {
    case Activation::Relu: return relu(x);
    case Activation::Gelu: return gelu(x);
    case Activation::Sigmoid: return sigmoid(x);
  }
  fail("activate: unknown kind");
}

enum class PoolDirection { Horizontal, Vertical };

// vertical: average over W -> N x C x H x 1; horizontal: average over H -> N x C x 1 x W
inline Tensor directional_avg_pool(const Tensor& x, PoolDirection dir) {
  EMRF_CHECK(x.rank() == 4, "directional_avg_pool: input must be NCHW");
  return dir == PoolDirection::Vertical ? mean(x, {3}, true) : mean(x, {2}, true);
}

// space-to-depth with block 2: N x C x H x W -> N x 4C x H/2 x W/2
inline Tensor space_to_depth(const Tensor& x) {
  EMRF_CHECK(x.rank() == 4, "space_to_depth: input must be NCHW");
  int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  EMRF_CHECK(H % 2 == 0 && W % 2 == 0, "space_to_depth: spatial extents ", H, "x", W,
             " must be even");
  int64_t OH = H / 2, OW = W / 2;
  std::vector<double> out(size_t(x.numel()));
  // output channel layout: c*4 + (dy*2 + dx)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx = 0; dx < 2; ++dx) {
          int64_t oc = c * 4 + dy * 2 + dx;
          for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow)
              out[size_t(((n * 4 * C + oc) * OH + oh) * OW + ow)] =
                  x.at(((n * C + c) * H + 2 * oh + dy) * W + 2 * ow + dx);
        }
  return detail::make_result({N, 4 * C, OH, OW}, std::move(out), {&x},
                             [N, C, H, W, OH, OW](Node& nd) {
                               Node& nx = *nd.parents[0];
                               nx.ensure_grad();
                               for (int64_t n = 0; n < N; ++n)
                                 for (int64_t c = 0; c < C; ++c)
                                   for (int64_t dy = 0; dy < 2; ++dy)
                                     for (int64_t dx = 0; dx < 2; ++dx) {
                                       int64_t oc = c * 4 + dy * 2 + dx;
                                       for (int64_t oh = 0; oh < OH; ++oh)
                                         for (int64_t ow = 0; ow < OW; ++ow)
                                           nx.grad[size_t(((n * C + c) * H + 2 * oh + dy) * W +
                                                          2 * ow + dx)] +=
                                               nd.grad[size_t(((n * 4 * C + oc) * OH + oh) * OW +
                                                              ow)];
                                     }
                             });
}

// inverse of space_to_depth: N x 4C x H x W -> N x C x 2H x 2W
inline Tensor depth_to_space(const Tensor& x) {
  EMRF_CHECK(x.rank() == 4, "depth_to_space: input must be NCHW");
  int64_t N = x.extent(0), C4 = x.extent(1), H = x.extent(2), W = x.extent(3);
  EMRF_CHECK(C4 % 4 == 0, "depth_to_space: channels ", C4, " must be divisible by 4");
  int64_t C = C4 / 4, OH = 2 * H, OW = 2 * W;
  std::vector<double> out(size_t(x.numel()));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx = 0; dx < 2; ++dx) {
          int64_t ic = c * 4 + dy * 2 + dx;
          for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w)
              out[size_t(((n * C + c) * OH + 2 * h + dy) * OW + 2 * w + dx)] =
                  x.at(((n * C4 + ic) * H + h) * W + w);
        }
  return detail::make_result({N, C, OH, OW}, std::move(out), {&x},
                             [N, C, C4, H, W, OH, OW](Node& nd) {
                               Node& nx = *nd.parents[0];
                               nx.ensure_grad();
                               for (int64_t n = 0; n < N; ++n)
                                 for (int64_t c = 0; c < C; ++c)
                                   for (int64_t dy = 0; dy < 2; ++dy)
                                     for (int64_t dx = 0; dx < 2; ++dx) {
                                       int64_t ic = c * 4 + dy * 2 + dx;
                                       for (int64_t h = 0; h < H; ++h)
                                         for (int64_t w = 0; w < W; ++w)
                                           nx.grad[size_t(((n * C4 + ic) * H + h) * W + w)] +=
                                               nd.grad[size_t(((n * C + c) * OH + 2 * h + dy) * OW +
                                                              2 * w + dx)];
                                     }
                             });
}

enum class ResampleMode { Down, Up };

// down: space-to-depth then learned 1x1 mix 4C -> 2C; up: learned 1x1 mix C -> 2C
// then depth-to-space (2C/4 = C/2 channels out, doubled spatial extent).
inline Tensor resample(const Tensor& x, ResampleMode mode, const ConvKernel& mix) {
  if (mode == ResampleMode::Down) {
    EMRF_CHECK(x.extent(2) % 2 == 0 && x.extent(3) % 2 == 0,
               "resample down: spatial extents must be even, got ",
               shape_str(x.shape()));
    return conv2d(space_to_depth(x), mix);
  }
  return depth_to_space(conv2d(x, mix));
}

}  // namespace emrf
