#pragma once

// Composite blocks: IOAB (EM-reconstructed channel attention), IOFN
// (EM-reconstructed gated feedforward), EMB (their residual composition),
// LMB (directional pooled attention) and LMRB (cascaded conv+LMB residuals).

#include <memory>
#include <string>
#include <vector>

#include "emrf/em.hpp"
#include "emrf/nn.hpp"
#include "emrf/params.hpp"

namespace emrf {

// Elementwise multiply with broadcast of `a` over H or W (extent-1 axis).
inline Tensor mul_bcast(const Tensor& x, const Tensor& a) {
  EMRF_CHECK(x.rank() == 4 && a.rank() == 4, "mul_bcast: expected NCHW inputs");
  int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  EMRF_CHECK(a.extent(0) == N && a.extent(1) == C, "mul_bcast: N/C mismatch, ",
             shape_str(x.shape()), " vs ", shape_str(a.shape()));
  int64_t AH = a.extent(2), AW = a.extent(3);
  EMRF_CHECK((AH == H || AH == 1) && (AW == W || AW == 1),
             "mul_bcast: incompatible gate shape ", shape_str(a.shape()));
  std::vector<double> out(size_t(x.numel()));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          int64_t ai = ((n * C + c) * AH + (AH == 1 ? 0 : h)) * AW + (AW == 1 ? 0 : w);
          out[size_t(((n * C + c) * H + h) * W + w)] =
              x.at(((n * C + c) * H + h) * W + w) * a.at(ai);
        }
  return detail::make_result(x.shape(), std::move(out), {&x, &a},
                             [N, C, H, W, AH, AW](Node& nd) {
                               Node& nx = *nd.parents[0];
                               Node& na = *nd.parents[1];
                               nx.ensure_grad();
                               na.ensure_grad();
                               for (int64_t n = 0; n < N; ++n)
                                 for (int64_t c = 0; c < C; ++c)
                                   for (int64_t h = 0; h < H; ++h)
                                     for (int64_t w = 0; w < W; ++w) {
                                       size_t xi = size_t(((n * C + c) * H + h) * W + w);
                                       size_t ai = size_t(((n * C + c) * AH + (AH == 1 ? 0 : h)) * AW +
                                                          (AW == 1 ? 0 : w));
                                       nx.grad[xi] += nd.grad[xi] * na.values[ai];
                                       na.grad[ai] += nd.grad[xi] * nx.values[xi];
                                     }
                             });
}

// Tracks the EM basis parameter of one block plus the batch-final bases seen
// in the last taped forward (feeds the training-loop momentum average).
struct EmSlot {
  Tensor param;
  std::shared_ptr<Tensor> last_batch_bases;
};

struct IoabParams {
  Tensor ln_gain, ln_offset;
  ConvKernel qkv_point;  // 1x1, C -> 3C
  ConvKernel qkv_depth;  // 3x3 depthwise on 3C
  ConvKernel out_proj;   // 1x1, C -> C
  Tensor bases;          // K x d, d = C / heads
  int64_t heads = 1;
  std::shared_ptr<Tensor> last_bases;
};

struct IofnParams {
  Tensor ln_gain, ln_offset;
  ConvKernel gate_point;   // W_p1: 1x1, C -> E
  ConvKernel gate_depth;   // W_d1: 3x3 depthwise on E
  ConvKernel value_point;  // W_p2: 1x1, C -> E
  ConvKernel value_depth;  // W_d2: 3x3 depthwise on E
  ConvKernel out_proj;     // 1x1, E -> C
  Tensor bases;            // K x E
  std::shared_ptr<Tensor> last_bases;
};

struct EmbParams {
  IoabParams ioab;
  IofnParams iofn;
};

struct LmbParams {
  Tensor ln_gain, ln_offset;  // over reduced channels
  ConvKernel reduce;          // 1x1, C -> C/r
  ConvKernel expand;          // 1x1, C/r -> C
  bool two_stream = true;
};

struct LmrbConfig {
  int64_t cascades = 2;
  int64_t reduction = 4;
  bool two_stream = true;

  void validate() const {
    EMRF_CHECK(cascades >= 1, "LmrbConfig: cascades must be >= 1, got ", cascades);
    EMRF_CHECK(reduction >= 1, "LmrbConfig: reduction must be >= 1");
  }
};

struct LmrbParams {
  std::vector<ConvKernel> convs;  // 1x1 per cascade
  std::vector<LmbParams> lmbs;
};

// ---------------------------------------------------------------------------
// builders

inline ConvKernel build_conv(ParamStore& store, const std::string& prefix, int64_t out_c,
                             int64_t in_c, int64_t kh, int64_t kw, int64_t groups,
                             bool bias, Rng& rng, int64_t padding = -1) {
  Tensor w = store.create(prefix + ".w", conv_weight_init({out_c, in_c / groups, kh, kw}, rng));
  Tensor b;
  if (bias) b = store.create(prefix + ".b", Tensor::zeros({out_c}));
  if (padding < 0) padding = (kh - 1) / 2;  // same-padding for stride 1
  return make_conv(w, b, 1, padding, groups);
}

inline IoabParams build_ioab(ParamStore& store, const std::string& prefix, int64_t channels,
                             int64_t heads, const EmConfig& em, Rng& rng,
                             std::vector<EmSlot>* slots) {
  EMRF_CHECK(heads >= 1 && channels % heads == 0, "ioab: channels ", channels,
             " not divisible by heads ", heads);
  IoabParams p;
  p.heads = heads;
  p.ln_gain = store.create(prefix + ".ln.g", Tensor::ones({channels}));
  p.ln_offset = store.create(prefix + ".ln.b", Tensor::zeros({channels}));
  p.qkv_point = build_conv(store, prefix + ".qkv_pw", 3 * channels, channels, 1, 1, 1, false, rng);
  p.qkv_depth = build_conv(store, prefix + ".qkv_dw", 3 * channels, 3 * channels, 3, 3,
                           3 * channels, false, rng);
  p.out_proj = build_conv(store, prefix + ".out", channels, channels, 1, 1, 1, true, rng);
  p.bases = store.create(prefix + ".mu", basis_init(em.num_bases, channels / heads, rng));
  p.last_bases = std::make_shared<Tensor>(p.bases.detach());
  if (slots) slots->push_back({p.bases, p.last_bases});
  return p;
}

inline int64_t iofn_hidden(int64_t channels, double expansion) {
  return std::max<int64_t>(1, int64_t(std::lround(expansion * double(channels))));
}

inline IofnParams build_iofn(ParamStore& store, const std::string& prefix, int64_t channels,
                             double expansion, const EmConfig& em, Rng& rng,
                             std::vector<EmSlot>* slots) {
  int64_t hidden = iofn_hidden(channels, expansion);
  IofnParams p;
  p.ln_gain = store.create(prefix + ".ln.g", Tensor::ones({channels}));
  p.ln_offset = store.create(prefix + ".ln.b", Tensor::zeros({channels}));
  p.gate_point = build_conv(store, prefix + ".gate_pw", hidden, channels, 1, 1, 1, false, rng);
  p.gate_depth = build_conv(store, prefix + ".gate_dw", hidden, hidden, 3, 3, hidden, false, rng);
  p.value_point = build_conv(store, prefix + ".val_pw", hidden, channels, 1, 1, 1, false, rng);
  p.value_depth = build_conv(store, prefix + ".val_dw", hidden, hidden, 3, 3, hidden, false, rng);
  p.out_proj = build_conv(store, prefix + ".out", channels, hidden, 1, 1, 1, true, rng);
  p.bases = store.create(prefix + ".gamma", basis_init(em.num_bases, hidden, rng));
  p.last_bases = std::make_shared<Tensor>(p.bases.detach());
  if (slots) slots->push_back({p.bases, p.last_bases});
  return p;
}

inline EmbParams build_emb(ParamStore& store, const std::string& prefix, int64_t channels,
                           int64_t heads, double expansion, const EmConfig& em, Rng& rng,
                           std::vector<EmSlot>* slots) {
  EmbParams p;
  p.ioab = build_ioab(store, prefix + ".ioab", channels, heads, em, rng, slots);
  p.iofn = build_iofn(store, prefix + ".iofn", channels, expansion, em, rng, slots);
  return p;
}

inline LmbParams build_lmb(ParamStore& store, const std::string& prefix, int64_t channels,
                           const LmrbConfig& cfg, Rng& rng) {
  int64_t reduced = std::max<int64_t>(1, channels / cfg.reduction);
  LmbParams p;
  p.reduce = build_conv(store, prefix + ".reduce", reduced, channels, 1, 1, 1, true, rng);
  p.ln_gain = store.create(prefix + ".ln.g", Tensor::ones({reduced}));
  p.ln_offset = store.create(prefix + ".ln.b", Tensor::zeros({reduced}));
  p.expand = build_conv(store, prefix + ".expand", channels, reduced, 1, 1, 1, true, rng);
  p.two_stream = cfg.two_stream;
  return p;
}

inline LmrbParams build_lmrb(ParamStore& store, const std::string& prefix, int64_t channels,
                             const LmrbConfig& cfg, Rng& rng) {
  cfg.validate();
  LmrbParams p;
  for (int64_t i = 0; i < cfg.cascades; ++i) {
    std::string base = prefix + ".c" + std::to_string(i);
    p.convs.push_back(build_conv(store, base + ".conv", channels, channels, 1, 1, 1, true, rng));
    p.lmbs.push_back(build_lmb(store, base + ".lmb", channels, cfg, rng));
  }
  return p;
}

// ---------------------------------------------------------------------------
// forwards

namespace detail {

// one image, channel range [c0, c0+len) flattened to a [len x H*W] matrix
inline Tensor channel_matrix(const Tensor& x, int64_t n, int64_t c0, int64_t len) {
  int64_t HW = x.extent(2) * x.extent(3);
  Tensor one = slice(x, 0, n, 1);
  Tensor chans = slice(one, 1, c0, len);
  return reshape(chans, {len, HW});
}

inline void record_last_bases(const std::shared_ptr<Tensor>& slot,
                              const std::vector<Tensor>& finals) {
  if (!grad_mode_flag() || finals.empty() || !slot) return;
  Tensor acc = finals[0].detach();
  for (size_t i = 1; i < finals.size(); ++i) {
    const auto& d = finals[i].data();
    for (size_t j = 0; j < acc.data().size(); ++j) acc.data()[j] += d[j];
  }
  for (double& v : acc.data()) v /= double(finals.size());
  *slot = acc;
}

}  // namespace detail

// Channel attention with the score matrix replaced by its EM reconstruction.
inline Tensor ioab_forward(const Tensor& x, const IoabParams& p, const EmConfig& em) {
  EMRF_CHECK(x.rank() == 4, "ioab: input must be NCHW");
  int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  EMRF_CHECK(C % p.heads == 0, "ioab: channels ", C, " not divisible by heads ", p.heads);
  int64_t d = C / p.heads;
  double lambda = std::sqrt(double(d));

  Tensor fz = layer_norm(x, p.ln_gain, p.ln_offset);
  Tensor qkv = conv2d(conv2d(fz, p.qkv_point), p.qkv_depth);
  Tensor q = slice(qkv, 1, 0, C);
  Tensor k = slice(qkv, 1, C, C);
  Tensor v = slice(qkv, 1, 2 * C, C);

  std::vector<Tensor> batch_out;
  std::vector<Tensor> final_bases;
  for (int64_t n = 0; n < N; ++n) {
    std::vector<Tensor> head_out;
    for (int64_t h = 0; h < p.heads; ++h) {
      Tensor qm = detail::channel_matrix(q, n, h * d, d);  // [d x HW]
      Tensor km = detail::channel_matrix(k, n, h * d, d);
      Tensor vm = detail::channel_matrix(v, n, h * d, d);
      Tensor score = matmul(qm, transpose2d(km));  // [d x d]
      EmState st = em_iterate(score, p.bases, em);
      Tensor rec = reconstruct(st);  // low-rank [d x d]
      head_out.push_back(scale(matmul(rec, vm), 1.0 / lambda));
      final_bases.push_back(st.bases);
    }
    batch_out.push_back(reshape(concat(head_out, 0), {1, C, H, W}));
  }
  detail::record_last_bases(p.last_bases, final_bases);

  Tensor attn = concat(batch_out, 0);
  return add(x, conv2d(attn, p.out_proj));
}

// Gated feedforward whose gate map is EM-reconstructed over spatial positions.
inline Tensor iofn_forward(const Tensor& x, const IofnParams& p, const EmConfig& em) {
  EMRF_CHECK(x.rank() == 4, "iofn: input must be NCHW");
  int64_t N = x.extent(0), H = x.extent(2), W = x.extent(3);
  int64_t E = p.gate_point.weights.extent(0);
  int64_t HW = H * W;

  Tensor fk = layer_norm(x, p.ln_gain, p.ln_offset);
  Tensor gate = conv2d(conv2d(fk, p.gate_point), p.gate_depth);    // [N x E x H x W]
  Tensor value = conv2d(conv2d(fk, p.value_point), p.value_depth);  // [N x E x H x W]

  std::vector<Tensor> batch_gate;
  std::vector<Tensor> final_bases;
  for (int64_t n = 0; n < N; ++n) {
    Tensor g = transpose2d(detail::channel_matrix(gate, n, 0, E));  // [HW x E]
    EmState st = em_iterate(g, p.bases, em);
    Tensor rec = transpose2d(reconstruct(st));  // [E x HW]
    batch_gate.push_back(reshape(rec, {1, E, H, W}));
    final_bases.push_back(st.bases);
  }
  (void)HW;
  detail::record_last_bases(p.last_bases, final_bases);

  Tensor gated = mul(concat(batch_gate, 0), value);
  return add(fk, conv2d(gated, p.out_proj));
}

// Two-residual composition: attention refinement then feedforward refinement.
inline Tensor emb_forward(const Tensor& x, const EmbParams& p, const EmConfig& em) {
  Tensor mid = ioab_forward(x, p.ioab, em);
  return add(mid, iofn_forward(mid, p.iofn, em));
}

// Directional pooled attention; gates the input multiplicatively, residual kept.
inline Tensor lmb_forward(const Tensor& x, const LmbParams& p) {
  EMRF_CHECK(x.rank() == 4, "lmb: input must be NCHW");
  auto bottleneck = [&](const Tensor& pooled) {
    Tensor r = relu(layer_norm(conv2d(pooled, p.reduce), p.ln_gain, p.ln_offset));
    return sigmoid(conv2d(r, p.expand));
  };
  if (!p.two_stream) {
    Tensor pooled = mean(x, {2, 3}, true);  // global 1x1 pool
    return add(x, mul_bcast(x, bottleneck(pooled)));
  }
  Tensor gate_v = bottleneck(directional_avg_pool(x, PoolDirection::Vertical));    // N,C,H,1
  Tensor gate_h = bottleneck(directional_avg_pool(x, PoolDirection::Horizontal));  // N,C,1,W
  return add(x, mul_bcast(mul_bcast(x, gate_v), gate_h));
}

// k cascades of conv -> relu -> LMB, each in its own residual.
inline Tensor lmrb_forward(const Tensor& x, const LmrbParams& p, const LmrbConfig& cfg) {
  cfg.validate();
  EMRF_CHECK(size_t(cfg.cascades) == p.convs.size(),
             "lmrb: params built for ", p.convs.size(), " cascades, config asks ", cfg.cascades);
  Tensor cur = x;
  for (size_t i = 0; i < p.convs.size(); ++i)
    cur = add(cur, lmb_forward(relu(conv2d(cur, p.convs[i])), p.lmbs[i]));
  return cur;
}

}  // namespace emrf
