#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "itx/attention.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace itx;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

AttentionParams identity_params(const AttentionConfig& cfg, int64_t h,
                                int64_t w) {
  std::mt19937_64 rng(0);
  AttentionParams p = init_attention_params<float>(cfg, h, w, rng);
  p.qw = testutil::identity_conv(cfg.channels);
  p.kw = testutil::identity_conv(cfg.channels);
  p.vw = testutil::identity_conv(cfg.channels);
  p.qb.fill(0);
  p.kb.fill(0);
  p.vb.fill(0);
  if (p.bias_table.size() > 0) p.bias_table.fill(0);
  return p;
}

AttentionParams random_params(const AttentionConfig& cfg, int64_t h, int64_t w,
                              uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_attention_params<float>(cfg, h, w, rng);
}

}  // namespace

TEST_CASE("qkv_project identity, zero and oracle") {
  Tensor5D x = rand_tensor({1, 3, 2, 6, 6}, 1);
  AttentionConfig cfg{AttnKind::Local, {2, 1}, 1, 3, false};
  AttentionParams p = identity_params(cfg, 6, 6);

  ad::Graph g(false);
  AttentionParamIds<float> ids;
  ids.qw = g.input(p.qw);
  ids.qb = g.input(p.qb);
  ids.kw = g.input(p.kw);
  ids.kb = g.input(p.kb);
  ids.vw = g.input(p.vw);
  ids.vb = g.input(p.vb);
  auto [q, k, v] = qkv_project(g, g.input(x), ids);
  CHECK(testutil::bit_equal(g.val(q), x));
  CHECK(testutil::bit_equal(g.val(k), x));
  CHECK(testutil::bit_equal(g.val(v), x));

  AttentionParams z = p;
  z.qw.fill(0);
  ad::Graph g2(false);
  ad::Id zq = ad::conv2d(g2, g2.input(x), g2.input(z.qw), g2.input(z.qb));
  CHECK(max_abs_diff(g2.val(zq), Tensor5D(x.dims(), 0.0f)) == 0.0);

  AttentionParams r = random_params(cfg, 6, 6, 3);
  ad::Graph g3(false);
  ad::Id rq = ad::conv2d(g3, g3.input(x), g3.input(r.qw), g3.input(r.qb));
  CHECK(max_abs_diff(g3.val(rq), ref::conv2d(x, r.qw, r.qb)) < 1e-5);
}

TEST_CASE("scaled_attention degenerate and oracle cases") {
  // R=1: softmax of a scalar is 1, out = Dv
  Tensor5D q1 = rand_tensor({2, 1, 1, 1, 4}, 4);
  Tensor5D k1 = rand_tensor({2, 1, 1, 1, 4}, 5);
  Tensor5D v1 = rand_tensor({2, 1, 1, 1, 4}, 6);
  auto r1 = scaled_attention<float>(q1, k1, v1, nullptr, 2.0f);
  CHECK(r1.a[0] == doctest::Approx(1.0f));
  CHECK(max_abs_diff(r1.out, v1) < 1e-6);

  // identical K rows -> uniform attention -> out rows = column mean of Dv
  Tensor5D q(Dims5{1, 1, 1, 3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor5D k(Dims5{1, 1, 1, 3, 2}, {7, 8, 7, 8, 7, 8});
  Tensor5D v(Dims5{1, 1, 1, 3, 2}, {0, 3, 6, 9, 0, 0});
  auto ru = scaled_attention<float>(q, k, v, nullptr, std::sqrt(2.0f));
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(ru.a[i * 3] == doctest::Approx(1.0f / 3).epsilon(1e-6));
    CHECK(ru.out[i * 2 + 0] == doctest::Approx(2.0f).epsilon(1e-5));
    CHECK(ru.out[i * 2 + 1] == doctest::Approx(4.0f).epsilon(1e-5));
  }

  // random 4x8 against the double-precision oracle
  for (uint64_t s = 0; s < 5; ++s) {
    Tensor5D qq = rand_tensor({1, 1, 1, 4, 8}, 10 + s);
    Tensor5D kk = rand_tensor({1, 1, 1, 4, 8}, 20 + s);
    Tensor5D vv = rand_tensor({1, 1, 1, 4, 8}, 30 + s);
    auto res = scaled_attention<float>(qq, kk, vv, nullptr, std::sqrt(8.0f));
    std::vector<double> qd(qq.data(), qq.data() + 32),
        kd(kk.data(), kk.data() + 32), vd(vv.data(), vv.data() + 32), od;
    oracles::softmax_attention(qd, kd, vd, 4, 8, std::sqrt(8.0), od);
    double m = 0.0;
    for (int i = 0; i < 32; ++i) m = std::max(m, std::abs(res.out[i] - od[i]));
    CHECK(m < 1e-5);
    // rows of A sum to 1, entries non-negative
    for (int64_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (int64_t j = 0; j < 4; ++j) {
        CHECK(res.a[i * 4 + j] >= 0.0f);
        sum += res.a[i * 4 + j];
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }

  // non-finite logits -> error
  Tensor5D bad = q1;
  bad[0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS(scaled_attention<float>(bad, k1, v1, nullptr, 1.0f));
}

TEST_CASE("scaled_attention row-permutation equivariance") {
  // permuting the rows of Q/K/V together permutes the output rows the
  // same way (the testable form of patch-shuffling invariance)
  const int64_t R = 6, D = 4;
  Tensor5D q = rand_tensor({1, 1, 1, R, D}, 40);
  Tensor5D k = rand_tensor({1, 1, 1, R, D}, 41);
  Tensor5D v = rand_tensor({1, 1, 1, R, D}, 42);
  std::vector<int64_t> perm{3, 1, 5, 0, 4, 2};
  auto permute = [&](const Tensor5D& t) {
    Tensor5D out(t.dims());
    for (int64_t i = 0; i < R; ++i)
      for (int64_t j = 0; j < D; ++j) out[i * D + j] = t[perm[i] * D + j];
    return out;
  };
  auto base = scaled_attention<float>(q, k, v, nullptr, 2.0f);
  auto shuf =
      scaled_attention<float>(permute(q), permute(k), permute(v), nullptr, 2.0f);
  Tensor5D expect = permute(base.out);
  CHECK(max_abs_diff(shuf.out, expect) < 1e-6);
}

TEST_CASE("local attention: shape, fixed point and dense oracle") {
  AttentionConfig cfg{AttnKind::Local, {8, 2}, 2, 4, false};
  Tensor5D x = rand_tensor({1, 4, 2, 16, 16}, 50);
  Tensor5D y = local_attention(x, cfg, random_params(cfg, 16, 16, 51));
  CHECK(y.dims() == x.dims());
  CHECK(y.all_finite());

  // identical patches within each window + identity QKV -> identity
  AttentionConfig cfg1{AttnKind::Local, {4, 2}, 1, 1, false};
  Tensor5D tiled(Dims5{1, 1, 1, 4, 4});
  const float vals[4] = {1.0f, 2.0f, 3.0f, 4.0f};
  for (int64_t y2 = 0; y2 < 4; ++y2)
    for (int64_t x2 = 0; x2 < 4; ++x2)
      tiled.at(0, 0, 0, y2, x2) = vals[(y2 % 2) * 2 + (x2 % 2)];
  Tensor5D fixed = local_attention(tiled, cfg1, identity_params(cfg1, 4, 4));
  CHECK(max_abs_diff(fixed, tiled) < 1e-5);

  // single window covering the frame == brute-force dense patch attention
  for (int64_t size : {8, 16}) {
    AttentionConfig dense{AttnKind::Local, {size, 2}, 2, 4, false};
    Tensor5D in = rand_tensor({1, 4, 1, size, size},
                              static_cast<uint64_t>(60 + size));
    AttentionParams p =
        random_params(dense, size, size, static_cast<uint64_t>(61 + size));
    Tensor5D got = local_attention(in, dense, p);
    Tensor5D want = oracles::dense_patch_attention(in, p, 2, 2);
    CHECK(max_abs_diff(got, want) < 1e-5);
  }
}

TEST_CASE("global attention: degenerate window, shape, finiteness") {
  // H=W=w -> N=1, A=[[1]]; identity QKV makes it the identity map
  AttentionConfig cfg{AttnKind::Global, {8, 2}, 1, 2, false};
  Tensor5D x = rand_tensor({1, 2, 2, 8, 8}, 70);
  Tensor5D y = global_attention(x, cfg, identity_params(cfg, 8, 8));
  CHECK(max_abs_diff(y, x) < 1e-5);

  AttentionConfig cfg2{AttnKind::Global, {4, 2}, 2, 4, false};
  Tensor5D x2 = rand_tensor({2, 4, 2, 12, 8}, 71);
  Tensor5D y2 = global_attention(x2, cfg2, random_params(cfg2, 12, 8, 72));
  CHECK(y2.dims() == x2.dims());
  CHECK(y2.all_finite());
}

TEST_CASE("frame attention: degenerate cases and dense oracle") {
  AttentionConfig cfg{AttnKind::Frame, {}, 1, 2, false};
  // F=1: A=[[1]], identity QKV -> identity
  Tensor5D x1 = rand_tensor({1, 2, 1, 6, 6}, 80);
  CHECK(max_abs_diff(frame_attention(x1, cfg, identity_params(cfg, 6, 6)), x1) <
        1e-5);

  // two identical frames, identity QKV -> both frames unchanged
  Tensor5D x2(Dims5{1, 2, 2, 4, 4});
  Tensor5D frame = rand_tensor({1, 2, 1, 4, 4}, 81);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t f = 0; f < 2; ++f)
      std::copy(frame.plane(0, c, 0), frame.plane(0, c, 0) + 16,
                x2.plane(0, c, f));
  Tensor5D y2 = frame_attention(x2, cfg, identity_params(cfg, 4, 4));
  CHECK(max_abs_diff(y2, x2) < 1e-5);

  // random F=4 against the dense oracle, single head and multi-head
  for (int64_t heads : {1, 2}) {
    AttentionConfig cfgh{AttnKind::Frame, {}, heads, 2, false};
    Tensor5D x4 = rand_tensor({1, 2, 4, 6, 6}, static_cast<uint64_t>(90 + heads));
    AttentionParams p =
        random_params(cfgh, 6, 6, static_cast<uint64_t>(91 + heads));
    Tensor5D got = frame_attention(x4, cfgh, p);
    Tensor5D want = oracles::dense_frame_attention(x4, p, heads);
    CHECK(max_abs_diff(got, want) < 1e-5);
  }
}

TEST_CASE("split and merge heads") {
  Tensor5D d = rand_tensor({2, 1, 1, 3, 8}, 100);
  auto one = split_heads(d, 1);
  CHECK(one.size() == 1);
  CHECK(testutil::bit_equal(one[0], d));

  auto four = split_heads(d, 4);
  CHECK(testutil::bit_equal(merge_heads(four), d));

  auto two = split_heads(d, 2);
  CHECK(two[0].dims().w == 4);
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(two[0][r * 4 + j] == d[r * 8 + j]);
      CHECK(two[1][r * 4 + j] == d[r * 8 + 4 + j]);
    }

  Tensor5D odd = rand_tensor({1, 1, 1, 2, 6}, 101);
  CHECK_THROWS_AS(split_heads(odd, 4), ShapeError);
}

TEST_CASE("relative positional bias tables") {
  // zero table -> zero matrix
  Tensor5D z(Dims5{1, 1, 1, 1, 9});
  Tensor5D b0 = relative_position_bias(z, 2, 2);
  CHECK(max_abs_diff(b0, Tensor5D(b0.dims(), 0.0f)) == 0.0);

  // 2x2 patch grid: 4x4 bias matrix from 9 distinct offsets
  CHECK(bias_table_size(2, 2) == 9);

  // table size mismatch
  Tensor5D small(Dims5{1, 1, 1, 1, 5});
  CHECK_THROWS_AS(relative_position_bias(small, 2, 2), ShapeError);

  // offsets match => equal bias entries, exhaustively for grids up to 4x4
  for (int64_t gh = 1; gh <= 4; ++gh)
    for (int64_t gw = 1; gw <= 4; ++gw) {
      Tensor5D table = rand_tensor({1, 1, 1, 1, bias_table_size(gh, gw)},
                                   static_cast<uint64_t>(gh * 10 + gw));
      Tensor5D b = relative_position_bias(table, gh, gw);
      const int64_t n = gh * gw;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
          for (int64_t k = 0; k < n; ++k)
            for (int64_t l = 0; l < n; ++l) {
              const bool same_offset = (i / gw - j / gw == k / gw - l / gw) &&
                                       (i % gw - j % gw == k % gw - l % gw);
              if (same_offset) CHECK(b[i * n + j] == b[k * n + l]);
            }
    }
}

TEST_CASE("bias participates in local attention") {
  AttentionConfig cfg{AttnKind::Local, {4, 2}, 1, 2, true};
  Tensor5D x = rand_tensor({1, 2, 1, 8, 8}, 110);
  AttentionParams p = random_params(cfg, 8, 8, 111);
  CHECK(p.bias_table.size() == 9);
  Tensor5D y0 = local_attention(x, cfg, p);
  p.bias_table.fill(3.0f);  // constant bias shifts all logits equally
  Tensor5D y1 = local_attention(x, cfg, p);
  CHECK(max_abs_diff(y0, y1) < 1e-5);
  // non-constant bias changes the output
  p.bias_table[0] = -5.0f;
  Tensor5D y2 = local_attention(x, cfg, p);
  CHECK(max_abs_diff(y0, y2) > 1e-4);
}

TEST_CASE("attention preserves dims across randomized configs") {
  std::mt19937_64 rng(123);
  for (int it = 0; it < 25; ++it) {
    const int64_t heads = 1 + static_cast<int64_t>(rng() % 2);
    const int64_t c = heads * (1 + static_cast<int64_t>(rng() % 3));
    const int64_t f = 1 + static_cast<int64_t>(rng() % 3);
    const int64_t h = 8 + static_cast<int64_t>(rng() % 3) * 4;
    const int64_t w = 8 + static_cast<int64_t>(rng() % 3) * 4;
    const AttnKind kind = static_cast<AttnKind>(rng() % 3);
    AttentionConfig cfg{kind, {4, 2}, heads, c, false};
    Tensor5D x = rand_tensor({1, c, f, h, w}, static_cast<uint64_t>(1000 + it));
    Tensor5D y = attention_apply(x, cfg,
                                 random_params(cfg, h, w,
                                               static_cast<uint64_t>(2000 + it)));
    CHECK(y.dims() == x.dims());
    CHECK(y.all_finite());
  }
  // sizes that are not window multiples exercise pad + crop
  AttentionConfig cfg{AttnKind::Local, {8, 2}, 1, 2, false};
  Tensor5D x = rand_tensor({1, 2, 2, 30, 26}, 3000);
  Tensor5D y = attention_apply(x, cfg, random_params(cfg, 30, 26, 3001));
  CHECK(y.dims() == x.dims());
}
