#pragma once

// Central finite-difference checks for every differentiable operation, the
// composite blocks and the full model. Used by the `gradcheck` subcommand and
// by the acceptance suite.

#include <string>
#include <vector>

#include "emrf/blocks.hpp"
#include "emrf/metrics.hpp"
#include "emrf/model.hpp"

namespace emrf {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  bool pass = false;
};

namespace detail {

// scalar projection with fixed weights so every output element matters
inline Tensor project(const Tensor& y, Rng& rng) {
  Tensor w = Tensor::uniform(y.shape(), rng, 0.25, 1.0);
  return sum_all(mul(y, w));
}

inline void run_case(std::vector<GradCheckEntry>& out, const std::string& name,
                     const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                     double tol = 1e-4) {
  GradCheckEntry e;
  e.name = name;
  GradCheckReport r = grad_check(f, x, 1e-5, tol);
  e.max_rel_error = r.max_rel_error;
  e.pass = r.pass;
  out.push_back(e);
}

}  // namespace detail

inline std::vector<GradCheckEntry> run_gradcheck_suite(uint64_t seed = 7) {
  std::vector<GradCheckEntry> out;
  Rng rng(seed);

  Tensor a = Tensor::uniform({2, 3}, rng, 0.5, 1.5);
  Tensor b = Tensor::uniform({2, 3}, rng, 0.5, 1.5);
  Rng prj(derive_seed(seed, 1));

  auto P = [&prj](const Tensor& y) {
    Rng r = prj;  // same weights for every evaluation of one case
    return detail::project(y, r);
  };

  detail::run_case(out, "elementwise.add", [&](const Tensor& x) { return P(add(x, b)); }, a);
  detail::run_case(out, "elementwise.sub", [&](const Tensor& x) { return P(sub(b, x)); }, a);
  detail::run_case(out, "elementwise.mul", [&](const Tensor& x) { return P(mul(x, b)); }, a);
  detail::run_case(out, "elementwise.div.num", [&](const Tensor& x) { return P(div(x, b)); }, a);
  detail::run_case(out, "elementwise.div.den", [&](const Tensor& x) { return P(div(b, x)); }, a);
  detail::run_case(out, "elementwise.scale", [&](const Tensor& x) { return P(scale(x, -2.5)); }, a);
  // inputs kept away from the clamp kinks
  detail::run_case(out, "elementwise.clamp",
                   [&](const Tensor& x) { return P(clamp(x, 0.6, 1.4)); },
                   Tensor::from({4}, {0.1, 0.8, 1.2, 1.9}));
  detail::run_case(out, "unary.exp", [&](const Tensor& x) { return P(exp(x)); }, a);
  detail::run_case(out, "unary.log", [&](const Tensor& x) { return P(log(x)); }, a);
  detail::run_case(out, "unary.sqrt", [&](const Tensor& x) { return P(sqrt(x)); }, a);

  Tensor m1 = Tensor::uniform({3, 4}, rng, -1, 1);
  Tensor m2 = Tensor::uniform({4, 2}, rng, -1, 1);
  detail::run_case(out, "matmul.lhs", [&](const Tensor& x) { return P(matmul(x, m2)); }, m1);
  detail::run_case(out, "matmul.rhs", [&](const Tensor& x) { return P(matmul(m1, x)); }, m2);
  detail::run_case(out, "transpose2d", [&](const Tensor& x) { return P(transpose2d(x)); }, m1);
  detail::run_case(out, "reshape", [&](const Tensor& x) { return P(reshape(x, {4, 3})); }, m1);
  detail::run_case(out, "slice", [&](const Tensor& x) { return P(slice(x, 1, 1, 2)); }, m1);
  detail::run_case(out, "concat",
                   [&](const Tensor& x) { return P(concat({x, m1}, 0)); }, m1);

  detail::run_case(out, "reduce.sum", [&](const Tensor& x) { return P(sum(x, {0})); }, m1);
  detail::run_case(out, "reduce.mean", [&](const Tensor& x) { return P(mean(x, {1}, true)); }, m1);
  // distinct values keep the argmax stable under the probe step
  detail::run_case(out, "reduce.max", [&](const Tensor& x) { return P(reduce_max(x, {0})); },
                   Tensor::from({3, 2}, {0.1, 0.9, 0.5, 0.2, 0.8, 0.4}));

  detail::run_case(out, "softmax", [&](const Tensor& x) { return P(softmax(x, 1)); }, m1);
  detail::run_case(out, "activate.relu", [&](const Tensor& x) { return P(relu(x)); },
                   Tensor::from({4}, {-0.7, -0.2, 0.3, 0.9}));
  detail::run_case(out, "activate.gelu", [&](const Tensor& x) { return P(gelu(x)); }, m1);
  detail::run_case(out, "activate.sigmoid", [&](const Tensor& x) { return P(sigmoid(x)); }, m1);

  // conv2d: regular, grouped/depthwise, and w.r.t. weights
  Tensor img = Tensor::uniform({1, 2, 5, 5}, rng, -1, 1);
  Tensor cw = conv_weight_init({3, 2, 3, 3}, rng);
  Tensor cb = Tensor::uniform({3}, rng, -0.1, 0.1);
  detail::run_case(out, "conv2d.input", [&](const Tensor& x) {
    return P(conv2d(x, make_conv(cw, cb, 1, 1, 1)));
  }, img);
  detail::run_case(out, "conv2d.weights", [&](const Tensor& x) {
    return P(conv2d(img, make_conv(x, cb, 1, 1, 1)));
  }, cw);
  detail::run_case(out, "conv2d.bias", [&](const Tensor& x) {
    return P(conv2d(img, make_conv(cw, x, 1, 1, 1)));
  }, cb);
  Tensor dw = conv_weight_init({2, 1, 3, 3}, rng);
  detail::run_case(out, "conv2d.depthwise", [&](const Tensor& x) {
    return P(conv2d(x, make_conv(dw, Tensor(), 1, 1, 2)));
  }, img);

  Tensor gain = Tensor::uniform({2}, rng, 0.5, 1.5);
  Tensor offset = Tensor::uniform({2}, rng, -0.5, 0.5);
  detail::run_case(out, "layer_norm.input", [&](const Tensor& x) {
    return P(layer_norm(x, gain, offset));
  }, img);
  detail::run_case(out, "layer_norm.gain", [&](const Tensor& x) {
    return P(layer_norm(img, x, offset));
  }, gain);

  detail::run_case(out, "pool.vertical", [&](const Tensor& x) {
    return P(directional_avg_pool(x, PoolDirection::Vertical));
  }, img);
  detail::run_case(out, "pool.horizontal", [&](const Tensor& x) {
    return P(directional_avg_pool(x, PoolDirection::Horizontal));
  }, img);

  Tensor img44 = Tensor::uniform({1, 2, 4, 4}, rng, -1, 1);
  detail::run_case(out, "space_to_depth", [&](const Tensor& x) { return P(space_to_depth(x)); },
                   img44);
  detail::run_case(out, "depth_to_space", [&](const Tensor& x) {
    return P(depth_to_space(space_to_depth(x)));
  }, img44);
  Tensor down_mix = conv_weight_init({4, 8, 1, 1}, rng);
  detail::run_case(out, "resample.down", [&](const Tensor& x) {
    return P(resample(x, ResampleMode::Down, make_conv(down_mix, Tensor(), 1, 0, 1)));
  }, img44);

  Tensor gate = Tensor::uniform({1, 2, 3, 1}, rng, 0.2, 0.8);
  Tensor img23 = Tensor::uniform({1, 2, 3, 3}, rng, -1, 1);
  detail::run_case(out, "mul_bcast", [&](const Tensor& x) { return P(mul_bcast(x, gate)); },
                   img23);

  // EM machinery
  Tensor pts = Tensor::uniform({5, 3}, rng, -1, 1);
  Tensor bases = basis_init(2, 3, rng);
  detail::run_case(out, "em.e_step.points", [&](const Tensor& x) {
    return P(e_step(x, bases, 1.0));
  }, pts);
  detail::run_case(out, "em.e_step.bases", [&](const Tensor& x) {
    return P(e_step(pts, x, 1.0));
  }, bases);
  Tensor z = e_step(pts, bases, 1.0).detach();
  detail::run_case(out, "em.m_step", [&](const Tensor& x) {
    return P(m_step(x, z, bases, false));
  }, pts);
  EmConfig em3;
  em3.num_bases = 2;
  em3.iterations = 3;
  em3.beta = 1.0;
  em3.normalize_bases = false;
  detail::run_case(out, "em.iterate.points", [&](const Tensor& x) {
    return P(reconstruct(em_iterate(x, bases, em3)));
  }, pts);
  detail::run_case(out, "em.iterate.bases", [&](const Tensor& x) {
    return P(reconstruct(em_iterate(pts, x, em3)));
  }, bases);

  // blocks at 1x4x4x4, t=2
  EmConfig em2;
  em2.num_bases = 2;
  em2.iterations = 2;
  {
    ParamStore ps;
    Rng brng(derive_seed(seed, 2));
    IoabParams ioab = build_ioab(ps, "ioab", 4, 2, em2, brng, nullptr);
    Tensor x0 = Tensor::uniform({1, 4, 4, 4}, rng, -1, 1);
    detail::run_case(out, "block.ioab", [&](const Tensor& x) {
      return P(ioab_forward(x, ioab, em2));
    }, x0);
  }
  {
    ParamStore ps;
    Rng brng(derive_seed(seed, 3));
    IofnParams iofn = build_iofn(ps, "iofn", 4, 2.0, em2, brng, nullptr);
    Tensor x0 = Tensor::uniform({1, 4, 4, 4}, rng, -1, 1);
    detail::run_case(out, "block.iofn", [&](const Tensor& x) {
      return P(iofn_forward(x, iofn, em2));
    }, x0);
  }
  {
    ParamStore ps;
    Rng brng(derive_seed(seed, 4));
    EmbParams emb = build_emb(ps, "emb", 4, 2, 2.0, em2, brng, nullptr);
    Tensor x0 = Tensor::uniform({1, 4, 4, 4}, rng, -1, 1);
    detail::run_case(out, "block.emb", [&](const Tensor& x) {
      return P(emb_forward(x, emb, em2));
    }, x0);
  }
  {
    ParamStore ps;
    Rng brng(derive_seed(seed, 5));
    LmrbConfig lc;
    lc.cascades = 2;
    lc.reduction = 2;
    LmbParams lmb = build_lmb(ps, "lmb", 4, lc, brng);
    LmrbParams lmrb = build_lmrb(ps, "lmrb", 4, lc, brng);
    Tensor x0 = Tensor::uniform({1, 4, 4, 4}, rng, 0.1, 1.0);
    detail::run_case(out, "block.lmb", [&](const Tensor& x) {
      return P(lmb_forward(x, lmb));
    }, x0);
    detail::run_case(out, "block.lmrb", [&](const Tensor& x) {
      return P(lmrb_forward(x, lmrb, lc));
    }, x0);
  }

  // SSIM loss on a small pair
  {
    Tensor ia = Tensor::uniform({1, 3, 12, 12}, rng, 0.1, 0.9);
    Tensor ib = Tensor::uniform({1, 3, 12, 12}, rng, 0.1, 0.9);
    detail::run_case(out, "loss.ssim", [&](const Tensor& x) {
      return ssim_loss(x, ib);
    }, ia);
  }

  // full model, desk config, t=2, 1x3x8x8
  {
    ModelConfig cfg = ModelConfig::desk();
    cfg.em.iterations = 2;
    Model model = build_model(cfg, derive_seed(seed, 6));
    // nonzero final conv so the reconstruction path carries gradient
    Rng frng(derive_seed(seed, 7));
    for (double& v : model.store.get("final.w").data()) v = frng.uniform(-0.05, 0.05);
    Tensor x0 = Tensor::uniform({1, 3, 8, 8}, rng, 0.1, 0.9);
    detail::run_case(out, "model.full", [&](const Tensor& x) {
      return P(model_forward(model, x, /*training=*/true));
    }, x0);
  }

  return out;
}

}  // namespace emrf
