#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "itx/io.hpp"
#include "itx/kernels.hpp"
#include "itx/window.hpp"
#include "testutil.hpp"

using namespace itx;
using testutil::max_abs_diff;
using testutil::rand_tensor;

TEST_CASE("tensor invariants and itx file round-trip") {
  Tensor5D t = rand_tensor({2, 3, 2, 4, 5}, 1);
  CHECK(t.size() == 2 * 3 * 2 * 4 * 5);
  CHECK(t.all_finite());
  CHECK_THROWS_AS(Tensor5D(Dims5{1, 1, 1, 2, 2}, std::vector<float>(3)),
                  ShapeError);

  const std::string path = "test_roundtrip.itx";
  write_itx(path, t);
  Tensor5D back = read_itx(path);
  CHECK(testutil::bit_equal(t, back));
  std::remove(path.c_str());
}

TEST_CASE("assemble_local row counts and flatten order") {
  // w=8, p=2 -> P = 16 rows per matrix
  Tensor5D x = rand_tensor({1, 2, 1, 8, 8}, 2);
  auto dms = assemble_local(x, WindowSpec{8, 2});
  CHECK(dms.rows == 16);
  CHECK(dms.cols == 2 * 4);
  CHECK(dms.count == 1);

  // single-patch identity flatten: C=1, H=W=w=p=2
  Tensor5D tiny(Dims5{1, 1, 1, 2, 2}, {1, 2, 3, 4});
  auto d2 = assemble_local(tiny, WindowSpec{2, 2});
  CHECK(d2.count == 1);
  CHECK(d2.rows == 1);
  CHECK(d2.cols == 4);
  CHECK(d2.stack[0] == 1.0f);
  CHECK(d2.stack[1] == 2.0f);
  CHECK(d2.stack[2] == 3.0f);
  CHECK(d2.stack[3] == 4.0f);

  // divisibility error
  Tensor5D bad = rand_tensor({1, 1, 1, 6, 6}, 3);
  CHECK_THROWS_AS(assemble_local(bad, WindowSpec{4, 2}), ShapeError);
}

TEST_CASE("assemble_global row counts") {
  Tensor5D x = rand_tensor({1, 1, 1, 64, 64}, 4);
  auto dms = assemble_global(x, WindowSpec{8, 2});
  CHECK(dms.rows == 64);  // N = (64/8)^2

  Tensor5D one = rand_tensor({1, 2, 1, 8, 8}, 5);
  auto d1 = assemble_global(one, WindowSpec{8, 2});
  CHECK(d1.rows == 1);  // H=W=w -> degenerate N=1
}

TEST_CASE("global rows are a permutation of local rows") {
  Tensor5D x = rand_tensor({1, 3, 2, 16, 16}, 6);
  WindowSpec ws{8, 2};
  auto loc = assemble_local(x, ws);
  auto glo = assemble_global(x, ws);
  auto collect = [](const DataMatrixSet& d) {
    std::vector<std::vector<float>> rows;
    for (int64_t m = 0; m < d.count; ++m)
      for (int64_t r = 0; r < d.rows; ++r) {
        const float* p = d.matrix(m) + r * d.cols;
        rows.emplace_back(p, p + d.cols);
      }
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  CHECK(collect(loc) == collect(glo));
}

TEST_CASE("assemble_frame shapes and values") {
  Tensor5D x = rand_tensor({1, 2, 3, 4, 4}, 7);
  auto dms = assemble_frame(x);
  CHECK(dms.rows == 3);
  CHECK(dms.cols == 32);

  Tensor5D two(Dims5{1, 1, 2, 1, 1}, {5, 7});
  auto d2 = assemble_frame(two);
  CHECK(d2.rows == 2);
  CHECK(d2.cols == 1);
  CHECK(d2.stack[0] == 5.0f);
  CHECK(d2.stack[1] == 7.0f);

  Tensor5D single = rand_tensor({1, 2, 1, 3, 3}, 8);
  CHECK(assemble_frame(single).rows == 1);
}

TEST_CASE("scatter_inverse round-trips exactly for all three layouts") {
  Tensor5D x = rand_tensor({1, 2, 1, 8, 8}, 9);
  WindowSpec ws{4, 2};
  CHECK(testutil::bit_equal(scatter_inverse(assemble_local(x, ws)), x));
  CHECK(testutil::bit_equal(scatter_inverse(assemble_global(x, ws)), x));
  CHECK(testutil::bit_equal(scatter_inverse(assemble_frame(x)), x));

  Tensor5D y = rand_tensor({2, 3, 4, 16, 8}, 10);
  WindowSpec ws2{8, 2};
  CHECK(testutil::bit_equal(scatter_inverse(assemble_local(y, ws2)), y));
  CHECK(testutil::bit_equal(scatter_inverse(assemble_global(y, ws2)), y));
  CHECK(testutil::bit_equal(scatter_inverse(assemble_frame(y)), y));
}

TEST_CASE("conv2d identity, constant field and oracle agreement") {
  Tensor5D x = rand_tensor({1, 1, 1, 6, 6}, 11);
  Tensor5D y = conv2d(x, testutil::identity_conv(1), testutil::zero_bias(1));
  CHECK(max_abs_diff(x, y) == 0.0);

  // all-ones kernel on a constant field: interior pixels see 9k
  Tensor5D k(Dims5{1, 1, 1, 5, 5}, 2.5f);
  Tensor5D ones(Dims5{1, 1, 1, 3, 3}, 1.0f);
  Tensor5D conv = conv2d(k, ones, testutil::zero_bias(1));
  CHECK(conv.at(0, 0, 0, 2, 2) == doctest::Approx(9 * 2.5f));

  for (uint64_t seed = 0; seed < 5; ++seed) {
    Tensor5D in = rand_tensor({2, 3, 2, 8, 8}, 100 + seed);
    Tensor5D w = rand_tensor({4, 3, 1, 3, 3}, 200 + seed);
    Tensor5D b = rand_tensor({1, 4, 1, 1, 1}, 300 + seed);
    CHECK(max_abs_diff(conv2d(in, w, b), ref::conv2d(in, w, b)) < 1e-5);
  }

  // channel mismatch
  Tensor5D w = rand_tensor({1, 2, 1, 3, 3}, 12);
  CHECK_THROWS_AS(conv2d(x, w, testutil::zero_bias(1)), ShapeError);
}

TEST_CASE("layer_norm moments and edge cases") {
  Tensor5D gain(Dims5{1, 3, 1, 1, 1}, 1.0f);
  Tensor5D offset(Dims5{1, 3, 1, 1, 1}, 0.0f);

  Tensor5D cst(Dims5{1, 3, 2, 4, 4}, 7.0f);
  Tensor5D out = layer_norm(cst, gain, offset, 1e-5f);
  CHECK(max_abs_diff(out, Tensor5D(cst.dims(), 0.0f)) < 1e-6);

  Tensor5D x = rand_tensor({2, 3, 2, 6, 6}, 13, -2.0f, 2.0f);
  Tensor5D n = layer_norm(x, gain, offset, 1e-5f);
  // per-(b,f) moments
  const Dims5 d = x.dims();
  for (int64_t b = 0; b < d.b; ++b)
    for (int64_t f = 0; f < d.f; ++f) {
      double s = 0.0, s2 = 0.0;
      for (int64_t c = 0; c < d.c; ++c)
        for (int64_t i = 0; i < d.h * d.w; ++i) {
          const double v = n.plane(b, c, f)[i];
          s += v;
          s2 += v * v;
        }
      const double cnt = static_cast<double>(d.c * d.h * d.w);
      CHECK(std::abs(s / cnt) < 1e-4);
      CHECK(std::abs(s2 / cnt - s / cnt * s / cnt - 1.0) < 1e-3);
    }

  Tensor5D g0(Dims5{1, 3, 1, 1, 1}, 0.0f);
  Tensor5D oc(Dims5{1, 3, 1, 1, 1}, 4.25f);
  Tensor5D co = layer_norm(x, g0, oc, 1e-5f);
  CHECK(max_abs_diff(co, Tensor5D(x.dims(), 4.25f)) == 0.0);

  CHECK(max_abs_diff(layer_norm(x, gain, offset, 1e-5f),
                     ref::layer_norm(x, gain, offset, 1e-5f)) < 1e-5);
}

TEST_CASE("prelu definition") {
  Tensor5D x(Dims5{1, 1, 1, 1, 3}, {-2.0f, 0.0f, 3.0f});
  Tensor5D s1(Dims5{1, 1, 1, 1, 1}, 1.0f);
  CHECK(testutil::bit_equal(prelu(x, s1), x));
  Tensor5D s0(Dims5{1, 1, 1, 1, 1}, 0.0f);
  Tensor5D relu = prelu(x, s0);
  CHECK(relu[0] == 0.0f);
  CHECK(relu[2] == 3.0f);
  Tensor5D sq(Dims5{1, 1, 1, 1, 1}, 0.25f);
  CHECK(prelu(x, sq)[0] == doctest::Approx(-0.5f));
}

TEST_CASE("patch merge shape, multiset and constant projection") {
  Tensor5D x = rand_tensor({1, 4, 2, 8, 8}, 14);
  Tensor5D merged = patch_merge_rearrange(x);
  CHECK(merged.dims() == Dims5{1, 16, 2, 4, 4});

  // merged tensor contains exactly the input values, each once
  std::vector<float> a(x.data(), x.data() + x.size());
  std::vector<float> b(merged.data(), merged.data() + merged.size());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);

  // full patch_merge_down shape contract: (1,4,2,8,8) -> (1,8,2,4,4)
  Tensor5D pw = rand_tensor({8, 16, 1, 3, 3}, 15);
  Tensor5D pb(Dims5{1, 8, 1, 1, 1});
  CHECK(patch_merge_down(x, pw, pb).dims() == Dims5{1, 8, 2, 4, 4});

  // constant input + averaging center-tap projection stays constant
  Tensor5D cst(Dims5{1, 2, 1, 4, 4}, 3.0f);
  Tensor5D w(Dims5{4, 8, 1, 3, 3});
  for (int64_t o = 0; o < 4; ++o)
    for (int64_t k = 0; k < 4; ++k) w.at(o, k * 2 + o % 2, 0, 1, 1) = 0.25f;
  Tensor5D out = patch_merge_down(cst, w, Tensor5D(Dims5{1, 4, 1, 1, 1}));
  CHECK(max_abs_diff(out, Tensor5D(out.dims(), 3.0f)) < 1e-6);

  Tensor5D odd = rand_tensor({1, 1, 1, 5, 4}, 16);
  CHECK_THROWS_AS(patch_merge_rearrange(odd), ShapeError);
}

TEST_CASE("bilinear upsampling: constant, ramp and shape") {
  Tensor5D cst(Dims5{1, 2, 1, 4, 4}, 2.5f);
  Tensor5D up = upsample2x_bilinear(cst);
  CHECK(up.dims() == Dims5{1, 2, 1, 8, 8});
  CHECK(max_abs_diff(up, Tensor5D(up.dims(), 2.5f)) < 1e-6);

  // horizontal ramp: interior columns land exactly on the analytic ramp
  const int64_t H = 8, W = 8;
  Tensor5D ramp(Dims5{1, 1, 1, H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      ramp.at(0, 0, 0, y, x) = 0.5f * static_cast<float>(x) + 1.0f;
  Tensor5D r2 = upsample2x_bilinear(ramp);
  for (int64_t x = 1; x < 2 * W - 1; ++x) {
    const double src = (static_cast<double>(x) + 0.5) / 2.0 - 0.5;
    const double expect = 0.5 * src + 1.0;
    CHECK(std::abs(r2.at(0, 0, 0, 4, x) - expect) < 1e-5);
  }
}

TEST_CASE("pad_to_window arithmetic and round-trip") {
  Tensor5D x = rand_tensor({1, 1, 1, 64, 64}, 17);
  auto [p0, r0] = pad_to_window(x, WindowSpec{8, 2});
  CHECK(r0.h_hi == 0);
  CHECK(r0.w_hi == 0);
  CHECK(testutil::bit_equal(p0, x));

  Tensor5D y = rand_tensor({1, 2, 2, 30, 30}, 18);
  auto [p1, r1] = pad_to_window(y, WindowSpec{8, 2});
  CHECK(p1.dims().h == 32);
  CHECK(r1.h_lo == 0);
  CHECK(r1.h_hi == 2);
  CHECK(testutil::bit_equal(crop_pad(p1, r1), y));

  // mirrored content at the bottom edge
  CHECK(p1.at(0, 0, 0, 30, 5) == y.at(0, 0, 0, 29, 5));
  CHECK(p1.at(0, 0, 0, 31, 5) == y.at(0, 0, 0, 28, 5));
}

TEST_CASE("operations preserve finiteness on random input") {
  Tensor5D x = rand_tensor({1, 4, 2, 16, 16}, 19, -100.0f, 100.0f);
  Tensor5D w = rand_tensor({4, 4, 1, 3, 3}, 20);
  Tensor5D b = rand_tensor({1, 4, 1, 1, 1}, 21);
  CHECK(conv2d(x, w, b).all_finite());
  Tensor5D gain(Dims5{1, 4, 1, 1, 1}, 1.0f);
  CHECK(layer_norm(x, gain, Tensor5D(Dims5{1, 4, 1, 1, 1}), 1e-5f).all_finite());
  CHECK(upsample2x_bilinear(x).all_finite());
  CHECK(patch_merge_rearrange(x).all_finite());
  CHECK(scatter_inverse(assemble_local(x, WindowSpec{8, 2})).all_finite());
}
