#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "emrf/blocks.hpp"

using namespace emrf;

namespace {

void zero_param(ParamStore& store, const std::string& name) {
  for (double& v : store.get(name).data()) v = 0.0;
}

void zero_all(ParamStore& store) {
  for (const std::string& n : store.names()) zero_param(store, n);
}

int64_t numerical_rank(const Tensor& a, double tol = 1e-8) {
  // rank-revealing modified Gram-Schmidt with greedy pivoting:
  // count rows whose residual norm stays above tol after projecting
  // out the orthonormal directions accepted so far
  int64_t n = a.extent(0), d = a.extent(1);
  std::vector<std::vector<double>> rows(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(d)));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) rows[size_t(i)][size_t(j)] = a.at(i * d + j);
  int64_t rank = 0;
  while (true) {
    double best = 0;
    int64_t pick = -1;
    for (int64_t i = 0; i < n; ++i) {
      double norm2 = 0;
      for (double v : rows[size_t(i)]) norm2 += v * v;
      if (std::sqrt(norm2) > best) {
        best = std::sqrt(norm2);
        pick = i;
      }
    }
    if (pick < 0 || best <= tol) break;
    ++rank;
    std::vector<double> u = rows[size_t(pick)];
    for (double& v : u) v /= best;
    for (int64_t i = 0; i < n; ++i) {
      double dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += rows[size_t(i)][size_t(j)] * u[size_t(j)];
      for (int64_t j = 0; j < d; ++j) rows[size_t(i)][size_t(j)] -= dot * u[size_t(j)];
    }
  }
  return rank;
}

EmConfig small_em(int64_t k, int64_t t) {
  EmConfig em;
  em.num_bases = k;
  em.iterations = t;
  return em;
}

}  // namespace

TEST_CASE("ioab preserves shape and honors the residual with a zero projection") {
  Rng rng(1);
  EmConfig em = small_em(2, 2);
  ParamStore ps;
  IoabParams p = build_ioab(ps, "ioab", 4, 2, em, rng, nullptr);

  Tensor x = Tensor::uniform({2, 4, 5, 5}, rng, -1, 1);
  Tensor y = ioab_forward(x, p, em);
  CHECK(y.shape() == x.shape());

  zero_param(ps, "ioab.out.w");
  zero_param(ps, "ioab.out.b");
  Tensor y0 = ioab_forward(x, p, em);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y0.at(i) == x.at(i));
}

TEST_CASE("ioab rejects channel counts not divisible by heads") {
  Rng rng(2);
  EmConfig em = small_em(2, 1);
  ParamStore ps;
  CHECK_THROWS_WITH_AS(build_ioab(ps, "x", 5, 2, em, rng, nullptr),
                       doctest::Contains("divisible"), Error);
}

TEST_CASE("EM-reconstructed attention is low-rank yet close to the dense score") {
  // fixed instance; a sharp assignment temperature keeps the relative
  // reconstruction error of this score matrix below one half
  Rng rng(8);
  EmConfig em = small_em(4, 3);
  em.beta = 8.0;
  em.normalize_bases = false;
  ParamStore ps;
  int64_t C = 8, heads = 1;
  IoabParams p = build_ioab(ps, "ioab", C, heads, em, rng, nullptr);
  Rng rx(801);
  Tensor x = Tensor::uniform({1, C, 8, 8}, rx, -1, 1);

  // recompute the block's dense score matrix from its own kernels
  NoGradGuard ng;
  Tensor fz = layer_norm(x, p.ln_gain, p.ln_offset);
  Tensor qkv = conv2d(conv2d(fz, p.qkv_point), p.qkv_depth);
  Tensor qm = reshape(slice(qkv, 1, 0, C), {C, 64});
  Tensor km = reshape(slice(qkv, 1, C, C), {C, 64});
  Tensor dense = matmul(qm, transpose2d(km));  // [C x C]

  EmState st = em_iterate(dense, p.bases, em);
  Tensor rec = reconstruct(st);

  CHECK(numerical_rank(dense, 1e-8) == C);
  CHECK(numerical_rank(rec, 1e-8) <= em.num_bases);

  double num = 0, den = 0;
  for (int64_t i = 0; i < dense.numel(); ++i) {
    double dv = rec.at(i) - dense.at(i);
    num += dv * dv;
    den += dense.at(i) * dense.at(i);
  }
  CHECK(std::sqrt(num / den) < 0.5);
}

TEST_CASE("low-rank attention factor across 10 random inputs") {
  EmConfig em = small_em(2, 3);
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor score = Tensor::uniform({9, 9}, rng, -1, 1);
    Tensor bases = basis_init(em.num_bases, 9, rng);
    Tensor rec = reconstruct(em_iterate(score, bases, em));
    CHECK(numerical_rank(rec, 1e-8) <= em.num_bases);
  }
}

TEST_CASE("iofn preserves shape; zero value kernels leave the normalized input") {
  Rng rng(4);
  EmConfig em = small_em(2, 2);
  ParamStore ps;
  IofnParams p = build_iofn(ps, "iofn", 4, 2.0, em, rng, nullptr);

  Tensor x = Tensor::uniform({1, 4, 4, 4}, rng, -1, 1);
  CHECK(iofn_forward(x, p, em).shape() == x.shape());

  zero_param(ps, "iofn.val_pw.w");
  zero_param(ps, "iofn.val_dw.w");
  Tensor got = iofn_forward(x, p, em);
  Tensor fk = layer_norm(x, p.ln_gain, p.ln_offset);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(got.at(i) == doctest::Approx(fk.at(i)).epsilon(1e-12));
}

TEST_CASE("emb equals the manual chain and zero params give the identity") {
  Rng rng(5);
  EmConfig em = small_em(2, 2);
  ParamStore ps;
  EmbParams p = build_emb(ps, "emb", 4, 2, 2.0, em, rng, nullptr);
  Tensor x = Tensor::uniform({1, 4, 4, 4}, rng, -1, 1);

  Tensor whole = emb_forward(x, p, em);
  Tensor mid = ioab_forward(x, p.ioab, em);
  Tensor chained = add(mid, iofn_forward(mid, p.iofn, em));
  for (int64_t i = 0; i < whole.numel(); ++i) CHECK(whole.at(i) == chained.at(i));
  CHECK(whole.shape() == x.shape());

  zero_all(ps);
  Tensor y = emb_forward(x, p, em);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("lmb constant-gate algebra with zero attention kernels") {
  Rng rng(6);
  LmrbConfig lc;
  lc.reduction = 2;
  ParamStore ps;
  LmbParams p = build_lmb(ps, "lmb", 4, lc, rng);
  zero_param(ps, "lmb.expand.w");
  zero_param(ps, "lmb.expand.b");

  Tensor x = Tensor::uniform({1, 4, 3, 3}, rng, -1, 1);
  Tensor y = lmb_forward(x, p);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y.at(i) == doctest::Approx(1.25 * x.at(i)).epsilon(1e-12));
}

TEST_CASE("lmb keeps shape and maps constants to constants") {
  Rng rng(7);
  LmrbConfig lc;
  lc.reduction = 2;
  ParamStore ps;
  LmbParams p = build_lmb(ps, "lmb", 2, lc, rng);

  Tensor x = Tensor::full({1, 2, 3, 3}, 0.6);
  Tensor y = lmb_forward(x, p);
  CHECK(y.shape() == x.shape());
  // constant input -> spatially uniform gates -> constant output per channel
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t i = 1; i < 9; ++i)
      CHECK(y.at(c * 9 + i) == doctest::Approx(y.at(c * 9)).epsilon(1e-12));
}

TEST_CASE("single-stream lmb variant also preserves shape") {
  Rng rng(8);
  LmrbConfig lc;
  lc.reduction = 2;
  lc.two_stream = false;
  ParamStore ps;
  LmbParams p = build_lmb(ps, "lmb", 4, lc, rng);
  Tensor x = Tensor::uniform({2, 4, 3, 5}, rng, -1, 1);
  CHECK(lmb_forward(x, p).shape() == x.shape());
}

TEST_CASE("lmrb with two cascades equals the literal chain") {
  Rng rng(9);
  LmrbConfig lc;
  lc.cascades = 2;
  lc.reduction = 2;
  ParamStore ps;
  LmrbParams p = build_lmrb(ps, "lmrb", 4, lc, rng);
  Tensor x = Tensor::uniform({1, 4, 4, 4}, rng, -1, 1);

  Tensor got = lmrb_forward(x, p, lc);
  Tensor s1 = add(x, lmb_forward(relu(conv2d(x, p.convs[0])), p.lmbs[0]));
  Tensor s2 = add(s1, lmb_forward(relu(conv2d(s1, p.convs[1])), p.lmbs[1]));
  for (int64_t i = 0; i < got.numel(); ++i) CHECK(got.at(i) == s2.at(i));
}

TEST_CASE("lmrb with zero conv kernels is the identity") {
  Rng rng(10);
  LmrbConfig lc;
  lc.cascades = 2;
  lc.reduction = 2;
  ParamStore ps;
  LmrbParams p = build_lmrb(ps, "lmrb", 4, lc, rng);
  zero_param(ps, "lmrb.c0.conv.w");
  zero_param(ps, "lmrb.c0.conv.b");
  zero_param(ps, "lmrb.c1.conv.w");
  zero_param(ps, "lmrb.c1.conv.b");
  Tensor x = Tensor::uniform({1, 4, 4, 4}, rng, -1, 1);
  Tensor y = lmrb_forward(x, p, lc);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("lmrb forward cost grows linearly with the cascade count") {
  Rng rng(11);
  Tensor x = Tensor::uniform({1, 4, 8, 8}, rng, -1, 1);
  auto flops_for = [&](int64_t k) {
    LmrbConfig lc;
    lc.cascades = k;
    lc.reduction = 2;
    ParamStore ps;
    LmrbParams p = build_lmrb(ps, "lmrb", 4, lc, rng);
    NoGradGuard ng;
    int64_t before = flop_counter();
    lmrb_forward(x, p, lc);
    return flop_counter() - before;
  };
  int64_t f1 = flops_for(1), f2 = flops_for(2), f3 = flops_for(3);
  CHECK(f1 > 0);
  CHECK(f2 == 2 * f1);
  CHECK(f3 == 3 * f1);
}

TEST_CASE("block parameter names are unique and hierarchical") {
  Rng rng(12);
  EmConfig em = small_em(2, 1);
  ParamStore ps;
  build_emb(ps, "enc0.emb0", 4, 2, 2.0, em, rng, nullptr);
  LmrbConfig lc;
  build_lmrb(ps, "skip0.lmrb", 4, lc, rng);
  auto names = ps.names();
  std::set<std::string> unique(names.begin(), names.end());
  CHECK(unique.size() == names.size());
  CHECK(ps.has("enc0.emb0.ioab.mu"));
  CHECK(ps.has("enc0.emb0.iofn.gamma"));
  CHECK(ps.has("skip0.lmrb.c1.lmb.reduce.w"));
}
