#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "itx/model.hpp"
#include "testutil.hpp"

using namespace itx;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

ModelConfig tiny_config(const std::string& spec = "FLG") {
  ModelConfig cfg;
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.block.spec = spec;
  cfg.ws = WindowSpec{4, 2};
  cfg.dropout = 0.1f;
  cfg.use_bias = true;
  cfg.ref_height = 8;
  cfg.ref_width = 8;
  return cfg;
}

void zero_cell(ParamStore& params, const std::string& prefix) {
  for (const char* n : {"attn.q.w", "attn.q.b", "attn.k.w", "attn.k.b",
                        "attn.v.w", "attn.v.b", "mix.c1.w", "mix.c1.b",
                        "mix.c2.w", "mix.c2.b"})
    params.get(prefix + n).fill(0);
}

}  // namespace

TEST_CASE("block spec validation") {
  BlockSpec ok{"FLGFLG"};
  ok.validate();
  BlockSpec bad{"FLX"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  BlockSpec empty{""};
  CHECK_THROWS_AS(empty.validate(), ConfigError);
  ModelConfig cfg = tiny_config("FLX");
  CHECK_THROWS_AS(build_hrnet(cfg, 0), ConfigError);
}

TEST_CASE("cell with zero attention and mixer weights is the identity") {
  ModelConfig cfg = tiny_config("FLG");
  Model m = build_hrnet(cfg, 1);
  for (const char* c : {"blk1.c0.", "blk1.c1.", "blk1.c2."})
    zero_cell(m.params, c);

  Tensor5D x = rand_tensor({1, 4, 2, 8, 8}, 2);
  for (size_t i = 0; i < 3; ++i) {
    ad::Graph g(false);
    ParamBinding<float> P(g, m.params);
    ad::Id out = detail::cell_forward(g, P, "blk1.c" + std::to_string(i) + ".",
                                      g.input(x), cfg.block.kind_at(i), 4, cfg,
                                      false, nullptr);
    CHECK(testutil::bit_equal(g.val(out), x));
  }
}

TEST_CASE("cell output dims preserved for every kind") {
  ModelConfig cfg = tiny_config("FLG");
  Model m = build_hrnet(cfg, 3);
  Tensor5D x = rand_tensor({2, 4, 3, 8, 8}, 4);
  for (size_t i = 0; i < 3; ++i) {
    ad::Graph g(false);
    ParamBinding<float> P(g, m.params);
    ad::Id out = detail::cell_forward(g, P, "blk1.c" + std::to_string(i) + ".",
                                      g.input(x), cfg.block.kind_at(i), 4, cfg,
                                      false, nullptr);
    CHECK(g.val(out).dims() == x.dims());
    CHECK(g.val(out).all_finite());
  }
}

TEST_CASE("inference is deterministic; training dropout is seeded") {
  ModelConfig cfg = tiny_config();
  Model m = build_hrnet(cfg, 5);
  Tensor5D x = rand_tensor({1, 3, 2, 8, 8}, 6);
  Tensor5D a = model_forward(m, x, false);
  Tensor5D b = model_forward(m, x, false);
  CHECK(testutil::bit_equal(a, b));

  std::mt19937_64 r1(77), r2(77), r3(78);
  Tensor5D t1 = model_forward(m, x, true, &r1);
  Tensor5D t2 = model_forward(m, x, true, &r2);
  Tensor5D t3 = model_forward(m, x, true, &r3);
  CHECK(testutil::bit_equal(t1, t2));
  CHECK_FALSE(testutil::bit_equal(t1, t3));
}

TEST_CASE("model maps 3 channels to 2 and preserves (F,H,W)") {
  ModelConfig cfg = tiny_config();
  cfg.ref_height = 16;
  cfg.ref_width = 16;
  Model m = build_hrnet(cfg, 7);
  Tensor5D x = rand_tensor({1, 3, 4, 16, 16}, 8, -50.0f, 50.0f);
  Tensor5D y = model_forward(m, x, false);
  CHECK(y.dims() == Dims5{1, 2, 4, 16, 16});
  CHECK(y.all_finite());

  Tensor5D wrong = rand_tensor({1, 4, 2, 16, 16}, 9);
  CHECK_THROWS_AS(model_forward(m, wrong, false), ShapeError);

  // sizes that need padding are rejected only when they change the padded
  // grid the bias tables were built for
  Tensor5D offgrid = rand_tensor({1, 3, 2, 24, 24}, 10);
  CHECK_THROWS_AS(model_forward(m, offgrid, false), ConfigError);
  Tensor5D padded_ok = rand_tensor({1, 3, 2, 13, 11}, 11);  // pads to 16x16
  CHECK(model_forward(m, padded_ok, false).dims() == Dims5{1, 2, 2, 13, 11});
}

TEST_CASE("half-resolution branch runs at doubled channels") {
  ModelConfig cfg = tiny_config();
  Model m = build_hrnet(cfg, 12);
  const Tensor5D& qw = m.params.get("blk4.c1.attn.q.w");
  CHECK(qw.dims().b == 8);  // 2C output channels
  CHECK(qw.dims().c == 8);  // 2C input channels
  const Tensor5D& down = m.params.get("down.w");
  CHECK(down.dims().b == 8);   // 2C
  CHECK(down.dims().c == 16);  // 4C after patch merge
}

TEST_CASE("parameter counting: analytic oracle and block doubling") {
  // a single 1->1 conv holds 9 weights + 1 bias
  ParamStore solo;
  std::mt19937_64 rng(13);
  detail::add_conv(solo, "only", 1, 1, rng);
  CHECK(solo.total_params() == 10);

  ModelConfig cfg = tiny_config("FLG");
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.ws = WindowSpec{8, 2};
  cfg.ref_height = 32;
  cfg.ref_width = 32;
  Model m = build_hrnet(cfg, 14);

  // independent analytic sum
  auto cell_count = [&](int64_t C, AttnKind kind, int64_t grid_h,
                        int64_t grid_w) {
    int64_t n = 2 * C;                  // ln1
    n += 3 * (9 * C * C + C);           // qkv convs
    if (kind == AttnKind::Local) n += (2 * 4 - 1) * (2 * 4 - 1);
    if (kind == AttnKind::Global)
      n += (2 * grid_h - 1) * (2 * grid_w - 1);
    n += 2 * C;                         // ln2
    n += 4 * C * C * 9 + 4 * C;         // mix.c1
    n += 4 * C;                         // slope
    n += C * 4 * C * 9 + C;             // mix.c2
    return n;
  };
  const int64_t C = 16;
  int64_t expect = C * 3 * 9 + C;  // pre
  for (int blk = 1; blk <= 3; ++blk)
    expect += cell_count(C, AttnKind::Frame, 4, 4) +
              cell_count(C, AttnKind::Local, 4, 4) +
              cell_count(C, AttnKind::Global, 4, 4);
  expect += 2 * C * 4 * C * 9 + 2 * C;  // down
  for (int blk = 4; blk <= 5; ++blk)
    expect += cell_count(2 * C, AttnKind::Frame, 2, 2) +
              cell_count(2 * C, AttnKind::Local, 2, 2) +
              cell_count(2 * C, AttnKind::Global, 2, 2);
  expect += C * 2 * C * 9 + C;      // up
  expect += 2 * 2 * C * 9 + 2;      // post
  CHECK(count_params(m) == expect);

  // FLGFLG doubles the block-local parameter count exactly
  Model m2 = build_hrnet(tiny_config("FLG"), 15);
  Model m4 = build_hrnet(tiny_config("FLGFLG"), 16);
  CHECK(block_param_count(m4, "blk1.") == 2 * block_param_count(m2, "blk1."));

  // count is a pure function of the config
  Model m5 = build_hrnet(tiny_config("FLG"), 99);
  CHECK(count_params(m5) == count_params(m2));
}

TEST_CASE("save and load round-trip parameters bit-exactly") {
  ModelConfig cfg = tiny_config();
  Model m = build_hrnet(cfg, 17);
  Tensor5D x = rand_tensor({1, 3, 2, 8, 8}, 18);
  Tensor5D before = model_forward(m, x, false);

  const std::string path = "test_params.itxp";
  save_params(m, path, {{"step", 123}});
  Model m2 = build_hrnet(cfg, 555);  // different init, same structure
  nlohmann::json meta = load_params(m2, path);
  CHECK(meta["step"] == 123);
  Tensor5D after = model_forward(m2, x, false);
  CHECK(testutil::bit_equal(before, after));

  // corrupted magic
  {
    std::ofstream os("bad.itxp", std::ios::binary);
    os << "not a parameter file\n";
  }
  CHECK_THROWS_AS(load_params(m2, "bad.itxp"), IoError);

  // mismatched model config
  ModelConfig other = tiny_config("FLGFLG");
  Model m3 = build_hrnet(other, 19);
  CHECK_THROWS_AS(load_params(m3, path), IoError);

  std::remove(path.c_str());
  std::remove("bad.itxp");
}

TEST_CASE("finite outputs over random seeds") {
  ModelConfig cfg = tiny_config();
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Model m = build_hrnet(cfg, seed);
    Tensor5D x = rand_tensor({1, 3, 2, 8, 8}, 100 + seed, -200.0f, 200.0f);
    CHECK(model_forward(m, x, false).all_finite());
  }
}

TEST_CASE("config validation") {
  ModelConfig bad = tiny_config();
  bad.heads = 3;  // does not divide channels=4
  CHECK_THROWS_AS(build_hrnet(bad, 0), ConfigError);
  ModelConfig bad2 = tiny_config();
  bad2.ws = WindowSpec{5, 2};  // patch does not divide window
  CHECK_THROWS_AS(build_hrnet(bad2, 0), ConfigError);
  ModelConfig bad3 = tiny_config();
  bad3.dropout = 1.5f;
  CHECK_THROWS_AS(build_hrnet(bad3, 0), ConfigError);
}
