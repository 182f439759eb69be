#pragma once

// Expectation-Maximization over a point matrix X [n x d] against K bases.
// E-step: Z = softmax(beta * X * bases^T); M-step: bases = Z^T X / colsum(Z),
// optionally row-normalized. reconstruct() returns the low-rank product Z * bases.

#include "emrf/nn.hpp"
#include "emrf/tensor.hpp"

namespace emrf {

struct EmConfig {
  int64_t num_bases = 4;
  int64_t iterations = 3;
  // E-step inverse temperature. The default of 1 keeps the soft assignments
  // sharp enough that extra EM iterations specialize the bases instead of
  // pulling them all toward the global mean; <= 0 opts into a 1/sqrt(d)
  // attention-style scale, resolved at call time.
  double beta = 1.0;
  bool normalize_bases = true;
  double momentum = 0.9;  // cross-batch moving average of batch-final bases

  void validate() const {
    EMRF_CHECK(num_bases >= 1, "EmConfig: num_bases must be >= 1, got ", num_bases);
    EMRF_CHECK(iterations >= 1, "EmConfig: iterations must be >= 1, got ", iterations);
    EMRF_CHECK(momentum >= 0.0 && momentum < 1.0, "EmConfig: momentum must be in [0,1)");
  }

  double resolved_beta(int64_t d) const {
    return beta > 0.0 ? beta : 1.0 / std::sqrt(double(d));
  }
};

struct EmState {
  Tensor bases;             // [K x d]
  Tensor responsibilities;  // [n x K]
  int64_t dead_basis_count = 0;  // diagnostics: bases left stale by the M-step
};

inline void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data())
    EMRF_CHECK(std::isfinite(v), what, ": non-finite input value ", v);
}

inline Tensor e_step(const Tensor& x, const Tensor& bases, double beta) {
  EMRF_CHECK(x.rank() == 2 && bases.rank() == 2, "e_step: expected rank-2 inputs");
  EMRF_CHECK(x.extent(1) == bases.extent(1), "e_step: dimension mismatch, points ",
             shape_str(x.shape()), " vs bases ", shape_str(bases.shape()));
  EMRF_CHECK(beta > 0.0, "e_step: beta must be positive, got ", beta);
  check_finite(x, "e_step");
  check_finite(bases, "e_step");
  Tensor logits = scale(matmul(x, transpose2d(bases)), beta);  // [n x K]
  return softmax(logits, 1);
}

// Weighted mean per Eq-style update; a basis whose responsibility column sum is
// below 1e-12 is left unchanged and counted (dead_count).
inline Tensor m_step(const Tensor& x, const Tensor& z, const Tensor& prev_bases,
                     bool normalize, int64_t* dead_count = nullptr) {
  EMRF_CHECK(x.rank() == 2 && z.rank() == 2, "m_step: expected rank-2 inputs");
  EMRF_CHECK(x.extent(0) == z.extent(0), "m_step: point counts differ, ",
             shape_str(x.shape()), " vs ", shape_str(z.shape()));
  int64_t K = z.extent(1), d = x.extent(1);
  EMRF_CHECK(prev_bases.extent(0) == K && prev_bases.extent(1) == d,
             "m_step: prev_bases shape mismatch");

  Tensor colsum = sum(z, {0}, true);  // [1 x K]
  // Alive/dead masks are decided on values; no gradient flows through the decision.
  std::vector<double> alive(size_t(K), 1.0), dead(size_t(K), 0.0), safe(size_t(K), 0.0);
  int64_t dead_n = 0;
  for (int64_t q = 0; q < K; ++q) {
    double s = colsum.at(q);
    if (s < 1e-12) {
      alive[size_t(q)] = 0.0;
      dead[size_t(q)] = 1.0;
      safe[size_t(q)] = 1.0;  // keeps the division defined; masked out below
      ++dead_n;
    }
  }
  if (dead_count) *dead_count += dead_n;

  Tensor numer = matmul(transpose2d(z), x);  // [K x d]
  Tensor denom_col = reshape(add(colsum, Tensor::from({1, K}, safe)), {K, 1});
  // broadcast denom over d by outer product with ones
  Tensor denom = matmul(denom_col, Tensor::ones({1, d}));
  Tensor fresh = div(numer, denom);

  Tensor alive_m = matmul(Tensor::from({K, 1}, alive), Tensor::ones({1, d}));
  Tensor dead_m = matmul(Tensor::from({K, 1}, dead), Tensor::ones({1, d}));
  Tensor bases = add(mul(fresh, alive_m), mul(prev_bases, dead_m));

  if (normalize) {
    Tensor norms = sqrt(add_scalar(sum(square(bases), {1}, true), 1e-24));  // [K x 1]
    bases = div(bases, matmul(norms, Tensor::ones({1, d})));
  }
  return bases;
}

// t alternations of E then M, gradients flowing through the unrolled chain.
inline EmState em_iterate(const Tensor& x, const Tensor& init_bases, const EmConfig& cfg) {
  cfg.validate();
  double beta = cfg.resolved_beta(x.extent(1));
  EmState state;
  state.bases = init_bases;
  for (int64_t it = 0; it < cfg.iterations; ++it) {
    state.responsibilities = e_step(x, state.bases, beta);
    state.bases = m_step(x, state.responsibilities, state.bases, cfg.normalize_bases,
                         &state.dead_basis_count);
  }
  return state;
}

// Low-rank reconstruction Z * bases, rank <= K.
inline Tensor reconstruct(const EmState& state) {
  EMRF_CHECK(state.responsibilities.rank() == 2 && state.bases.rank() == 2 &&
                 state.responsibilities.extent(1) == state.bases.extent(0),
             "reconstruct: inconsistent state shapes");
  return matmul(state.responsibilities, state.bases);
}

// Surrogate likelihood (1/beta) * sum_n log sum_q exp(beta x_n . mu_q);
// non-decreasing across EM iterations when normalization is off.
inline double em_surrogate_likelihood(const Tensor& x, const Tensor& bases, double beta) {
  NoGradGuard ng;
  int64_t n = x.extent(0), K = bases.extent(0), d = x.extent(1);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> dots(static_cast<size_t>(K));
    for (int64_t q = 0; q < K; ++q) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += x.at(i * d + j) * bases.at(q * d + j);
      dots[size_t(q)] = beta * dot;
      mx = std::max(mx, dots[size_t(q)]);
    }
    double z = 0.0;
    for (double v : dots) z += std::exp(v - mx);
    total += (mx + std::log(z)) / beta;
  }
  return total;
}

}  // namespace emrf
