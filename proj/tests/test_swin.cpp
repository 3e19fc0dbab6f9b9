#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "oracles.hpp"

using namespace sunet;
using namespace sunet::testing;

TEST_CASE("window_partition / window_reverse") {
  Tensor<double> grid({1, 4, 4, 1}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  const auto w = window_partition(constant(grid), 2).value();
  REQUIRE(w.shape() == Shape{4, 4, 1});
  const double quads[4][4] = {{0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(w.at({i, j, 0}) == quads[i][j]);

  const auto x = random_tensor({2, 6, 9, 3}, 1);
  const auto parts = window_partition(constant(x), 3);
  CHECK(parts.dim(0) == 2 * 6 * 9 / 9);
  CHECK(window_reverse(parts, 3, 6, 9).value() == x);
  CHECK_THROWS_AS(window_partition(constant(x), 4), ShapeError);
}

TEST_CASE("cyclic_shift rolls toroidally") {
  const auto x = random_tensor({1, 4, 6, 2}, 2);
  CHECK(cyclic_shift(constant(x), 0, 0).value() == x);
  CHECK(cyclic_shift(constant(x), 4, 6).value() == x);
  const auto row = cyclic_shift(constant(Tensor<double>({1, 1, 4, 1}, {0, 1, 2, 3})), 0, 1).value();
  CHECK(row.vec() == std::vector<double>{3, 0, 1, 2});
  const auto y = cyclic_shift(constant(x), -1, 2).value();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 6; ++c) CHECK(y.at({0, r, c, 1}) == x.at({0, (r + 1) % 4, (c - 2 + 6) % 6, 1}));
}

TEST_CASE("shift mask: zero without shift, four wrapped regions, symmetry") {
  for (auto v : build_shift_mask<double>(8, 8, 4, 0).data()) CHECK(v == 0.0);

  const int w = 4, s = 2;
  const auto m = build_shift_mask<double>(4, 4, w, s);
  REQUIRE(m.shape() == Shape{1, 16, 16});
  // Brute force: shifted pixel (y', x') originates at ((y'+s) mod 4, (x'+s) mod 4).
  std::vector<int> label(16);
  std::set<int> distinct;
  for (int yp = 0; yp < 4; ++yp)
    for (int xp = 0; xp < 4; ++xp) {
      const int oy = (yp + s) % 4, ox = (xp + s) % 4;
      label[yp * 4 + xp] = (region(oy, w, s) + 1) * 10 + region(ox, w, s) + 1;
      distinct.insert(label[yp * 4 + xp]);
    }
  CHECK(distinct.size() == 4);
  for (int q = 0; q < 16; ++q)
    for (int k = 0; k < 16; ++k) {
      CHECK(m.at({0, q, k}) == (label[q] == label[k] ? 0.0 : kMaskFill));
      CHECK(m.at({0, q, k}) == m.at({0, k, q}));
    }
}

TEST_CASE("window_attention: single token, identical tokens, dense per-window oracle") {
  ParameterList<double> params;
  StlConfig cfg{.dim = 4, .heads = 2, .window = 2, .shift = 0, .mlp_ratio = 2};
  auto p = random_stl(params, cfg, 3);

  // w = 1: softmax over one key, output = proj(V(token)).
  ParameterList<double> p1list;
  StlConfig c1{.dim = 4, .heads = 2, .window = 1, .shift = 0, .mlp_ratio = 2};
  auto p1 = random_stl(p1list, c1, 4);
  const auto tok = random_tensor({3, 1, 4}, 5);
  const auto got1 = window_attention<double>(constant(tok), p1.attn, 2, std::nullopt).value();
  for (int t = 0; t < 3; ++t) {
    const auto one = narrow(constant(tok), 0, t, 1).value().reshape({1, 4});
    // V is the third block of the qkv projection.
    auto v = narrow(linear(constant(one), p1.attn.qkv), 1, 8, 4);
    auto want = linear(v, p1.attn.proj).value();
    for (int j = 0; j < 4; ++j) CHECK(std::abs(got1.at({t, 0, j}) - want[j]) < 1e-12);
  }

  Tensor<double> same = Tensor<double>::zeros({1, 4, 4});
  const auto row = random_tensor({4}, 6);
  for (int t = 0; t < 4; ++t)
    for (int j = 0; j < 4; ++j) same.at({0, t, j}) = row[j];
  // The bias table differs per offset, so zero it to make all tokens symmetric.
  auto sym = p.attn;
  sym.rel_bias = constant(Tensor<double>::zeros(p.attn.rel_bias.shape()));
  const auto gs = window_attention<double>(constant(same), sym, 2, std::nullopt).value();
  for (int t = 1; t < 4; ++t)
    for (int j = 0; j < 4; ++j) CHECK(std::abs(gs.at({0, t, j}) - gs.at({0, 0, j})) < 1e-12);

  const auto x = random_tensor({2, 4, 4}, 7);
  const auto got = window_attention<double>(constant(x), p.attn, 2, std::nullopt).value();
  for (int win = 0; win < 2; ++win) {
    const auto tokens = narrow(constant(x), 0, win, 1).value().reshape({4, 4});
    const auto want = dense_attention(
        tokens, p.attn, 2, [](int, int) { return true; },
        [](int q, int k) { return rel_row(q / 2, q % 2, k / 2, k % 2, 2); });
    for (int t = 0; t < 4; ++t)
      for (int j = 0; j < 4; ++j) CHECK(std::abs(got.at({win, t, j}) - want.at({t, j})) < 1e-5);
  }
}

TEST_CASE("shifted-window attention equals brute-force region attention on 8x8") {
  const int H = 8, W = 8, w = 4, s = 2, C = 6, heads = 2;
  ParameterList<double> params;
  StlConfig cfg{.dim = C, .heads = heads, .window = w, .shift = s, .mlp_ratio = 2};
  auto p = random_stl(params, cfg, 8);
  const auto x = random_tensor({1, H, W, C}, 9);

  const auto got = shifted_window_attention(x, p.attn, heads, w, s);
  const auto want = region_attention(x, p.attn, heads, w, s);
  CHECK(max_abs_diff(got, want) < 1e-5);
}

TEST_CASE("attention rows are probability vectors over unmasked keys") {
  const auto mask = build_shift_mask<double>(8, 8, 4, 2);
  const auto logits = random_tensor({4, 16, 16}, 10, -4, 4);
  const auto probs = softmax(add(constant(logits), constant(mask)), -1).value();
  for (int win = 0; win < 4; ++win)
    for (int q = 0; q < 16; ++q) {
      double total = 0;
      for (int k = 0; k < 16; ++k) {
        const double a = probs.at({win, q, k});
        if (mask.at({win, q, k}) != 0.0) CHECK(a < 1e-8);
        total += a;
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
}

TEST_CASE("locality without shift: a pixel only influences its own window") {
  ParameterList<double> params;
  StlConfig cfg{.dim = 4, .heads = 2, .window = 2, .shift = 0, .mlp_ratio = 2};
  auto p = random_stl(params, cfg, 11);
  auto x = random_tensor({1, 4, 4, 4}, 12);
  auto run = [&](const Tensor<double>& in) {
    return stl_forward(constant(in.reshape({1, 16, 4})), cfg, p, 4, 4).value().reshape({1, 4, 4, 4});
  };
  const auto before = run(x);
  x.at({0, 1, 2, 3}) += 0.5;  // window (0, 1)
  const auto after = run(x);
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) {
      bool changed = false;
      for (int c = 0; c < 4; ++c) changed = changed || before.at({0, y, xx, c}) != after.at({0, y, xx, c});
      CHECK(changed == (y / 2 == 0 && xx / 2 == 1));
    }
}

TEST_CASE("stl_forward and stb_forward preserve shape on random configs") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t w = std::int64_t{1} << (rng() % 3);
    const std::int64_t heads = 1 + static_cast<std::int64_t>(rng() % 3);
    const std::int64_t dim = heads * (1 + static_cast<std::int64_t>(rng() % 3));
    const std::int64_t H = w * (1 + static_cast<std::int64_t>(rng() % 3));
    const std::int64_t W = w * (1 + static_cast<std::int64_t>(rng() % 3));
    const std::int64_t B = 1 + static_cast<std::int64_t>(rng() % 2);
    const std::int64_t shift = (rng() % 2) ? w / 2 : 0;
    ParameterList<double> params;
    ParamInit init(trial);
    StlConfig cfg{.dim = dim, .heads = heads, .window = w, .shift = shift, .mlp_ratio = 2};
    auto p = make_stl_params(params, "l", cfg, init);
    const auto x = constant(random_tensor({B, H * W, dim}, 100 + trial));
    CHECK(stl_forward(x, cfg, p, H, W).shape() == x.shape());

    StbConfig bcfg{.dim = dim, .depth = 2, .heads = heads, .window = w, .mlp_ratio = 2};
    auto layers = make_stb_params(params, "b", bcfg, init);
    CHECK(stb_forward<double>(x, bcfg, layers, H, W).shape() == x.shape());
  }

  ParameterList<float> params;
  ParamInit init(1);
  StbConfig deep{.dim = 8, .depth = 8, .heads = 2, .window = 2, .mlp_ratio = 2};
  auto layers = make_stb_params(params, "deep", deep, init);
  const auto x = constant(random_tensor<float>({1, 16, 8}, 14));
  CHECK(stb_forward<float>(x, deep, layers, 4, 4).shape() == x.shape());
}

TEST_CASE("zero weights give the residual identity") {
  ParameterList<double> params;
  ParamInit init(15);
  StbConfig cfg{.dim = 4, .depth = 4, .heads = 2, .window = 2, .mlp_ratio = 2};
  auto layers = make_stb_params(params, "b", cfg, init);
  for (auto& item : params.items()) {
    Var<double> v = item.var;
    v.mutable_value() = Tensor<double>::zeros(v.shape());
  }
  const auto x = random_tensor({2, 16, 4}, 16);
  CHECK(stl_forward(constant(x), cfg.layer(1), layers[1], 4, 4).value() == x);
  CHECK(stb_forward<double>(constant(x), cfg, layers, 4, 4).value() == x);
}

TEST_CASE("stb of depth 2 is W-MSA layer then SW-MSA layer; odd depth is rejected") {
  ParameterList<double> params;
  ParamInit init(17);
  StbConfig cfg{.dim = 4, .depth = 2, .heads = 2, .window = 4, .mlp_ratio = 2};
  auto layers = make_stb_params(params, "b", cfg, init);
  CHECK(cfg.layer(0).shift == 0);
  CHECK(cfg.layer(1).shift == 2);
  const auto x = constant(random_tensor({1, 64, 4}, 18));
  const auto manual =
      stl_forward(stl_forward(x, cfg.layer(0), layers[0], 8, 8), cfg.layer(1), layers[1], 8, 8).value();
  CHECK(stb_forward<double>(x, cfg, layers, 8, 8).value() == manual);

  StbConfig odd = cfg;
  odd.depth = 3;
  CHECK_THROWS_AS(make_stb_params(params, "odd", odd, init), ShapeError);
  CHECK_THROWS_AS(stb_forward<double>(x, odd, layers, 8, 8), ShapeError);
  CHECK_THROWS_AS(stl_forward(constant(random_tensor({1, 36, 4}, 1)), cfg.layer(0), layers[0], 6, 6), ShapeError);
}

TEST_CASE("stl_forward passes a 64-bit gradient check, with and without shift") {
  for (std::int64_t shift : {0, 1}) {
    ParameterList<double> params;
    StlConfig cfg{.dim = 4, .heads = 2, .window = 2, .shift = shift, .mlp_ratio = 2};
    auto base = random_stl(params, cfg, 19 + shift);
    const double err = grad_check(
        [&](const auto& in) {
          StlParams<double> p = base;
          p.attn.qkv.weight = in[1];
          p.attn.rel_bias = in[2];
          p.fc1.weight = in[3];
          p.norm1.gamma = in[4];
          return stl_forward(in[0], cfg, p, 4, 4);
        },
        {random_tensor({1, 16, 4}, 20), base.attn.qkv.weight.value(), base.attn.rel_bias.value(),
         base.fc1.weight.value(), base.norm1.gamma.value()},
        1e-4);
    CHECK(err < 1e-5);
  }
}
