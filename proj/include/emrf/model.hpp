#pragma once

// Full network: shallow 3x3 conv, four-level encoder-decoder of EMBs with
// concat-fused skip connections, optional LMRBs, refinement EMBs and a
// zero-initialized 3x3 reconstruction conv. The output is input + residual.

#include <optional>
#include <string>
#include <vector>

#include "emrf/blocks.hpp"

namespace emrf {

enum class LmrbPlacement { SkipPaths, Bottleneck, Both };

struct ModelConfig {
  int64_t base_channels = 8;
  std::vector<int64_t> depths = {2, 2, 2, 0};   // EMBs per level
  int64_t refinement_blocks = 1;
  std::vector<int64_t> heads = {2, 2, 2, 2};    // per level
  double ffn_expansion = 2.66;
  bool shallow_conv_bias = true;
  EmConfig em;
  LmrbConfig lmrb;
  LmrbPlacement lmrb_placement = LmrbPlacement::Both;

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig paper_scale() {
    ModelConfig cfg;
    cfg.base_channels = 48;
    cfg.depths = {9, 6, 3, 0};
    cfg.refinement_blocks = 4;
    return cfg;
  }

  int64_t level_channels(size_t level) const {  // level in [0, 3]
    return base_channels << level;
  }

  void validate() const {
    EMRF_CHECK(base_channels >= 1, "model: base_channels must be positive");
    EMRF_CHECK(depths.size() == 4, "model: depths must list 4 levels, got ", depths.size());
    EMRF_CHECK(heads.size() == 4, "model: heads must list 4 levels, got ", heads.size());
    for (int64_t d : depths) EMRF_CHECK(d >= 0, "model: depth must be >= 0");
    EMRF_CHECK(refinement_blocks >= 0, "model: refinement_blocks must be >= 0");
    for (size_t l = 0; l < 4; ++l) {
      EMRF_CHECK(heads[l] >= 1, "model: heads must be >= 1");
      EMRF_CHECK(level_channels(l) % heads[l] == 0, "model: level ", l + 1, " width ",
                 level_channels(l), " not divisible by heads ", heads[l]);
    }
    em.validate();
    lmrb.validate();
  }
};

struct Model {
  ModelConfig cfg;
  ParamStore store;
  std::vector<EmSlot> em_slots;

  ConvKernel shallow;                          // 3x3, 3 -> C
  std::vector<std::vector<EmbParams>> encoder;  // levels 1..3
  std::vector<ConvKernel> down;                 // 1x1 mixers after space-to-depth
  std::vector<EmbParams> latent;                // level 4
  std::optional<LmrbParams> latent_lmrb;
  std::vector<ConvKernel> up;                   // 1x1 mixers before depth-to-space
  std::vector<ConvKernel> fuse;                 // 1x1 after skip concat
  std::vector<std::vector<EmbParams>> decoder;  // levels 3..1
  std::vector<LmrbParams> skip_lmrbs;           // per skip path (levels 1..3)
  std::vector<EmbParams> refinement;
  ConvKernel final_conv;                        // 3x3, C -> 3, zero-initialized

  int64_t param_count() const { return store.scalar_count(); }
};

inline Model build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(derive_seed(seed, 0x11));
  ParamStore& ps = m.store;

  m.shallow = build_conv(ps, "shallow", cfg.base_channels, 3, 3, 3, 1,
                         cfg.shallow_conv_bias, rng);

  bool want_skip_lmrb = cfg.lmrb_placement == LmrbPlacement::SkipPaths ||
                        cfg.lmrb_placement == LmrbPlacement::Both;
  bool want_latent_lmrb = cfg.lmrb_placement == LmrbPlacement::Bottleneck ||
                          cfg.lmrb_placement == LmrbPlacement::Both;

  for (size_t l = 0; l < 3; ++l) {
    int64_t w = cfg.level_channels(l);
    std::vector<EmbParams> blocks;
    for (int64_t i = 0; i < cfg.depths[l]; ++i)
      blocks.push_back(build_emb(ps, "enc" + std::to_string(l + 1) + ".emb" + std::to_string(i),
                                 w, cfg.heads[l], cfg.ffn_expansion, cfg.em, rng, &m.em_slots));
    m.encoder.push_back(std::move(blocks));
    if (want_skip_lmrb)
      m.skip_lmrbs.push_back(build_lmrb(ps, "skip" + std::to_string(l + 1) + ".lmrb", w,
                                        cfg.lmrb, rng));
    m.down.push_back(build_conv(ps, "down" + std::to_string(l + 1), 2 * w, 4 * w, 1, 1, 1,
                                false, rng));
  }

  int64_t latent_w = cfg.level_channels(3);
  for (int64_t i = 0; i < cfg.depths[3]; ++i)
    m.latent.push_back(build_emb(ps, "latent.emb" + std::to_string(i), latent_w, cfg.heads[3],
                                 cfg.ffn_expansion, cfg.em, rng, &m.em_slots));
  if (want_latent_lmrb)
    m.latent_lmrb = build_lmrb(ps, "latent.lmrb", latent_w, cfg.lmrb, rng);

  for (size_t l = 3; l-- > 0;) {  // decoder levels 3, 2, 1
    int64_t w = cfg.level_channels(l);
    m.up.push_back(build_conv(ps, "up" + std::to_string(l + 1), 4 * w, 2 * w, 1, 1, 1,
                              false, rng));
    m.fuse.push_back(build_conv(ps, "fuse" + std::to_string(l + 1), w, 2 * w, 1, 1, 1,
                                false, rng));
    std::vector<EmbParams> blocks;
    for (int64_t i = 0; i < cfg.depths[l]; ++i)
      blocks.push_back(build_emb(ps, "dec" + std::to_string(l + 1) + ".emb" + std::to_string(i),
                                 w, cfg.heads[l], cfg.ffn_expansion, cfg.em, rng, &m.em_slots));
    m.decoder.push_back(std::move(blocks));
  }

  for (int64_t i = 0; i < cfg.refinement_blocks; ++i)
    m.refinement.push_back(build_emb(ps, "refine.emb" + std::to_string(i), cfg.base_channels,
                                     cfg.heads[0], cfg.ffn_expansion, cfg.em, rng, &m.em_slots));

  // zero-initialized: the untrained network is the identity map
  Tensor fw = ps.create("final.w", Tensor::zeros({3, cfg.base_channels, 3, 3}));
  Tensor fb = ps.create("final.b", Tensor::zeros({3}));
  m.final_conv = make_conv(fw, fb, 1, 1, 1);
  return m;
}

// rain: [N x 3 x H x W], H and W divisible by 8. Returns input + residual,
// clamped to [0,1] unless `training`.
inline Tensor model_forward(const Model& m, const Tensor& rain, bool training = false) {
  EMRF_CHECK(rain.rank() == 4 && rain.extent(1) == 3,
             "forward: input must be N x 3 x H x W, got ", shape_str(rain.shape()));
  EMRF_CHECK(rain.extent(2) % 8 == 0 && rain.extent(3) % 8 == 0,
             "forward: spatial extents ", rain.extent(2), "x", rain.extent(3),
             " must be divisible by 8 (three downsampling steps)");
  const ModelConfig& cfg = m.cfg;

  Tensor x = conv2d(rain, m.shallow);
  std::vector<Tensor> skips;
  for (size_t l = 0; l < 3; ++l) {
    for (const EmbParams& b : m.encoder[l]) x = emb_forward(x, b, cfg.em);
    Tensor skip = x;
    if (!m.skip_lmrbs.empty()) skip = lmrb_forward(skip, m.skip_lmrbs[l], cfg.lmrb);
    skips.push_back(skip);
    x = resample(x, ResampleMode::Down, m.down[l]);
  }

  for (const EmbParams& b : m.latent) x = emb_forward(x, b, cfg.em);
  if (m.latent_lmrb) x = lmrb_forward(x, *m.latent_lmrb, cfg.lmrb);

  for (size_t i = 0; i < 3; ++i) {
    size_t l = 2 - i;  // level index of this decoder stage
    x = resample(x, ResampleMode::Up, m.up[i]);
    x = conv2d(concat({x, skips[l]}, 1), m.fuse[i]);
    for (const EmbParams& b : m.decoder[i]) x = emb_forward(x, b, cfg.em);
  }

  for (const EmbParams& b : m.refinement) x = emb_forward(x, b, cfg.em);

  Tensor out = add(rain, conv2d(x, m.final_conv));
  return training ? out : clamp(out, 0.0, 1.0);
}

// Training-loop hook: fold the batch-final bases of the last taped forward
// into each basis parameter by exponential moving average. Single writer.
inline void apply_em_momentum(Model& m) {
  double mom = m.cfg.em.momentum;
  if (mom <= 0.0) return;
  for (EmSlot& slot : m.em_slots) {
    auto& p = slot.param.data();
    const auto& last = slot.last_batch_bases->data();
    if (last.size() != p.size()) continue;
    for (size_t i = 0; i < p.size(); ++i) p[i] = mom * p[i] + (1.0 - mom) * last[i];
    if (m.cfg.em.normalize_bases) {
      int64_t K = slot.param.extent(0), d = slot.param.extent(1);
      for (int64_t q = 0; q < K; ++q) {
        double norm = 0.0;
        for (int64_t j = 0; j < d; ++j) norm += p[size_t(q * d + j)] * p[size_t(q * d + j)];
        norm = std::sqrt(std::max(norm, 1e-24));
        for (int64_t j = 0; j < d; ++j) p[size_t(q * d + j)] /= norm;
      }
    }
  }
}

}  // namespace emrf
