#pragma once

// PSNR, SSIM (11x11 Gaussian window, sigma 1.5), MAE, BT.601 luma conversion
// and the differentiable 1-SSIM training loss.

#include <cmath>
#include <limits>

#include "emrf/image.hpp"
#include "emrf/nn.hpp"

namespace emrf {

struct SsimParams {
  int64_t window = 11;
  double sigma = 1.5;
  double range = 1.0;  // dynamic range L
  double k1 = 0.01, k2 = 0.03;

  double c1() const { return (k1 * range) * (k1 * range); }
  double c2() const { return (k2 * range) * (k2 * range); }
};

// ITU-R BT.601 luma
inline Tensor rgb_to_y(const Tensor& img) {
  EMRF_CHECK(img.rank() == 3, "rgb_to_y: expected C x H x W");
  EMRF_CHECK(img.extent(0) == 3, "rgb_to_y: expected 3 channels, got ", img.extent(0));
  int64_t H = img.extent(1), W = img.extent(2), HW = H * W;
  std::vector<double> out(static_cast<size_t>(HW));
  const double* p = img.data().data();
  for (int64_t i = 0; i < HW; ++i)
    out[size_t(i)] = 0.299 * p[i] + 0.587 * p[HW + i] + 0.114 * p[2 * HW + i];
  return Tensor::from({1, H, W}, std::move(out));
}

inline double mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.at(i) - b.at(i);
    acc += d * d;
  }
  return acc / double(a.numel());
}

// 10 log10(L^2 / MSE); identical images give +infinity.
inline double psnr(const Tensor& out, const Tensor& gt, double range = 1.0) {
  double m = mse(out, gt);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / m);
}

inline double mae(const Tensor& out, const Tensor& gt) {
  check_same_shape(out, gt, "mae");
  double acc = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) acc += std::abs(out.at(i) - gt.at(i));
  return acc / double(out.numel());
}

namespace detail {

inline std::vector<double> gaussian_window_1d(int64_t n, double sigma) {
  std::vector<double> w(static_cast<size_t>(n));
  double c = double(n - 1) / 2.0;
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = double(i) - c;
    w[size_t(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += w[size_t(i)];
  }
  for (double& v : w) v /= total;
  return w;
}

// depthwise 2D Gaussian kernel, constant (off-tape)
inline ConvKernel gaussian_conv(int64_t channels, const SsimParams& p) {
  auto w1 = gaussian_window_1d(p.window, p.sigma);
  Tensor w({channels, 1, p.window, p.window});
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t i = 0; i < p.window; ++i)
      for (int64_t j = 0; j < p.window; ++j)
        w.data()[size_t(((c * 1) * p.window + i) * p.window + j)] =
            w1[size_t(i)] * w1[size_t(j)];
  return make_conv(std::move(w), Tensor(), 1, 0, channels);  // valid windows
}

// Mean SSIM over valid windows; differentiable when inputs are on a tape.
inline Tensor ssim_map_mean(const Tensor& a, const Tensor& b, const SsimParams& p) {
  EMRF_CHECK(a.rank() == 4, "ssim: expected NCHW");
  check_same_shape(a, b, "ssim");
  EMRF_CHECK(a.extent(2) >= p.window && a.extent(3) >= p.window,
             "ssim: image ", a.extent(2), "x", a.extent(3),
             " smaller than window ", p.window);
  ConvKernel g = gaussian_conv(a.extent(1), p);
  Tensor mu_a = conv2d(a, g);
  Tensor mu_b = conv2d(b, g);
  Tensor mu_aa = mul(mu_a, mu_a);
  Tensor mu_bb = mul(mu_b, mu_b);
  Tensor mu_ab = mul(mu_a, mu_b);
  Tensor var_a = sub(conv2d(mul(a, a), g), mu_aa);
  Tensor var_b = sub(conv2d(mul(b, b), g), mu_bb);
  Tensor cov = sub(conv2d(mul(a, b), g), mu_ab);
  double c1 = p.c1(), c2 = p.c2();
  Tensor numer = mul(add_scalar(scale(mu_ab, 2.0), c1), add_scalar(scale(cov, 2.0), c2));
  Tensor denom = mul(add_scalar(add(mu_aa, mu_bb), c1), add_scalar(add(var_a, var_b), c2));
  return mean_all(div(numer, denom));
}

}  // namespace detail

inline double ssim(const Tensor& out, const Tensor& gt, const SsimParams& p = {}) {
  NoGradGuard ng;
  Tensor a = out, b = gt;
  if (a.rank() == 3) {
    a = reshape(a, {1, a.extent(0), a.extent(1), a.extent(2)});
    b = reshape(b, {1, b.extent(0), b.extent(1), b.extent(2)});
  }
  return detail::ssim_map_mean(a, b, p).at(0);
}

// L = 1 - SSIM averaged over the batch; stays on the tape.
inline Tensor ssim_loss(const Tensor& out, const Tensor& gt, const SsimParams& p = {}) {
  check_same_shape(out, gt, "ssim_loss");
  Tensor one_minus = add_scalar(scale(detail::ssim_map_mean(out, gt, p), -1.0), 1.0);
  return one_minus;
}

// Metric row for reports.
struct MetricRow {
  std::string name;
  double psnr_y = 0, ssim_y = 0, mae_v = 0, psnr_rgb = 0, ssim_rgb = 0;
};

inline MetricRow evaluate_pair(const std::string& name, const Tensor& out, const Tensor& gt,
                               const SsimParams& p = {}) {
  MetricRow row;
  row.name = name;
  Tensor ya = rgb_to_y(out), yb = rgb_to_y(gt);
  row.psnr_y = psnr(ya, yb);
  row.ssim_y = ssim(ya, yb, p);
  row.mae_v = mae(out, gt);
  row.psnr_rgb = psnr(out, gt);
  row.ssim_rgb = ssim(out, gt, p);
  return row;
}

}  // namespace emrf
