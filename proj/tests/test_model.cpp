#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emrf/metrics.hpp"
#include "emrf/model.hpp"
#include "emrf/train.hpp"

using namespace emrf;

namespace {

int64_t conv_params(int64_t oc, int64_t ic, int64_t kh, int64_t kw, bool bias) {
  return oc * ic * kh * kw + (bias ? oc : 0);
}

int64_t lmb_params(int64_t w, int64_t r) {
  int64_t reduced = std::max<int64_t>(1, w / r);
  return conv_params(reduced, w, 1, 1, true) + 2 * reduced + conv_params(w, reduced, 1, 1, true);
}

int64_t lmrb_params(int64_t w, const LmrbConfig& lc) {
  return lc.cascades * (conv_params(w, w, 1, 1, true) + lmb_params(w, lc.reduction));
}

}  // namespace

TEST_CASE("degenerate depths: parameter count equals the hand-computed conv sum") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.depths = {0, 0, 0, 0};
  cfg.refinement_blocks = 0;
  Model m = build_model(cfg, 42);

  int64_t want = conv_params(cfg.base_channels, 3, 3, 3, true);  // shallow
  for (size_t l = 0; l < 3; ++l) {
    int64_t w = cfg.level_channels(l);
    want += lmrb_params(w, cfg.lmrb);               // skip path
    want += conv_params(2 * w, 4 * w, 1, 1, false);  // down mixer
    want += conv_params(4 * w, 2 * w, 1, 1, false);  // up mixer
    want += conv_params(w, 2 * w, 1, 1, false);      // skip fusion
  }
  want += lmrb_params(cfg.level_channels(3), cfg.lmrb);  // bottleneck
  want += conv_params(3, cfg.base_channels, 3, 3, true);  // reconstruction
  CHECK(m.param_count() == want);
}

TEST_CASE("parameter count grows with depth and is seed-stable") {
  ModelConfig cfg = ModelConfig::desk();
  Model a = build_model(cfg, 7);
  Model b = build_model(cfg, 7);
  CHECK(a.param_count() == b.param_count());
  // bitwise-identical initialization
  for (const std::string& n : a.store.names()) {
    const auto& va = a.store.get(n).data();
    const auto& vb = b.store.get(n).data();
    REQUIRE(va.size() == vb.size());
    for (size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
  }

  ModelConfig deeper = cfg;
  deeper.depths[0] += 1;
  CHECK(build_model(deeper, 7).param_count() > a.param_count());
}

TEST_CASE("paper-scale construction succeeds with a stable count") {
  ModelConfig cfg = ModelConfig::paper_scale();
  CHECK(cfg.depths == std::vector<int64_t>{9, 6, 3, 0});
  // count parameters without instantiating twice the full model weights
  Model a = build_model(cfg, 1);
  Model b = build_model(cfg, 1);
  CHECK(a.param_count() == b.param_count());
  CHECK(a.param_count() > 1000000);
}

TEST_CASE("freshly built model is the identity on in-range inputs") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.em.iterations = 1;
  Model m = build_model(cfg, 3);
  Rng rng(4);
  NoGradGuard ng;
  Tensor x = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
  Tensor y = model_forward(m, x);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("shape preservation at 16, 24 and 32") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.em.iterations = 1;
  cfg.depths = {1, 1, 1, 0};
  Model m = build_model(cfg, 5);
  Rng rng(6);
  NoGradGuard ng;
  for (int64_t hw : {16, 24, 32}) {
    Tensor x = Tensor::uniform({1, 3, hw, hw}, rng, 0, 1);
    CHECK(model_forward(m, x).shape() == x.shape());
  }
}

TEST_CASE("indivisible spatial extents are rejected with the divisor named") {
  Model m = build_model(ModelConfig::desk(), 1);
  Tensor bad = Tensor::zeros({1, 3, 12, 16});
  CHECK_THROWS_WITH_AS(model_forward(m, bad), doctest::Contains("divisible by 8"), Error);
  Tensor wrong_c = Tensor::zeros({1, 4, 16, 16});
  CHECK_THROWS_WITH_AS(model_forward(m, wrong_c), doctest::Contains("N x 3"), Error);
}

TEST_CASE("forward is deterministic given parameters and input") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.em.iterations = 2;
  Model m = build_model(cfg, 8);
  Rng rng(9);
  NoGradGuard ng;
  Tensor x = Tensor::uniform({1, 3, 16, 16}, rng, 0, 1);
  Tensor y1 = model_forward(m, x);
  Tensor y2 = model_forward(m, x);
  for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == y2.at(i));
}

TEST_CASE("a single optimizer step decreases the training loss") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.em.iterations = 2;
  Model m = build_model(cfg, 10);

  Rng rng(11);
  Tensor clean = Tensor::uniform({1, 3, 16, 16}, rng, 0.1, 0.9);
  Tensor rainy = clean.detach();
  // brighten a diagonal band to mimic a streak
  for (int64_t i = 0; i < 16; ++i)
    for (int64_t c = 0; c < 3; ++c)
      rainy.data()[size_t((c * 16 + i) * 16 + i)] =
          std::min(1.0, rainy.at((c * 16 + i) * 16 + i) + 0.4);

  TrainConfig tc = TrainConfig::desk();
  tc.learning_rate = 1e-5;  // small enough that one step tracks the gradient
  OptState opt;
  m.store.zero_grads();
  Tensor out = model_forward(m, rainy, true);
  Tensor loss = ssim_loss(out, clean);
  double before = loss.at(0);
  backward(loss);
  adamw_step(m.store, m.store.grads(), opt, tc);

  NoGradGuard ng;
  Tensor out2 = model_forward(m, rainy, true);
  double after = ssim_loss(out2, clean).at(0);
  CHECK(after < before);
}

TEST_CASE("em momentum folds batch bases into the parameters") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.em.iterations = 1;
  cfg.depths = {1, 0, 0, 0};
  cfg.refinement_blocks = 0;
  Model m = build_model(cfg, 12);
  REQUIRE(!m.em_slots.empty());

  Rng rng(13);
  Tensor x = Tensor::uniform({1, 3, 16, 16}, rng, 0, 1);
  Tensor before = m.em_slots[0].param.detach();
  model_forward(m, x, true);  // taped: records batch-final bases
  apply_em_momentum(m);
  bool changed = false;
  for (int64_t i = 0; i < before.numel(); ++i)
    if (m.em_slots[0].param.at(i) != before.at(i)) changed = true;
  CHECK(changed);

  // rows stay unit-norm under the default normalization
  const Tensor& p = m.em_slots[0].param;
  int64_t K = p.extent(0), d = p.extent(1);
  for (int64_t q = 0; q < K; ++q) {
    double norm = 0;
    for (int64_t j = 0; j < d; ++j) norm += p.at(q * d + j) * p.at(q * d + j);
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("inference forward does not record batch bases") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.em.iterations = 1;
  cfg.depths = {1, 0, 0, 0};
  cfg.refinement_blocks = 0;
  Model m = build_model(cfg, 14);
  Tensor before = m.em_slots[0].last_batch_bases->detach();
  Rng rng(15);
  NoGradGuard ng;
  model_forward(m, Tensor::uniform({1, 3, 16, 16}, rng, 0, 1));
  for (int64_t i = 0; i < before.numel(); ++i)
    CHECK(m.em_slots[0].last_batch_bases->at(i) == before.at(i));
}
