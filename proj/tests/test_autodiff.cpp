#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "midline/gradcheck.hpp"
#include "midline/tape.hpp"

using namespace midline::ad;

namespace {

Tensor<double> randt(Shape sh, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return random_tensor<double>(std::move(sh), rng, scale);
}

// Direct quadruple-loop convolution, the independent oracle.
Tensor<double> conv_oracle(const Tensor<double>& in, const Tensor<double>& ker, int stride, int pad) {
  const int Cin = in.shape[0], H = in.shape[1], W = in.shape[2];
  const int Cout = ker.shape[0], k = ker.shape[2];
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> out = Tensor<double>::zeros({Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co)
    for (int y = 0; y < Ho; ++y)
      for (int x = 0; x < Wo; ++x) {
        double acc = 0;
        for (int ci = 0; ci < Cin; ++ci)
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              const int sy = y * stride + dy - pad;
              const int sx = x * stride + dx - pad;
              if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
              acc += in.at3(ci, sy, sx) * ker.v[(size_t)(((co * Cin + ci) * k + dy) * k + dx)];
            }
        out.at3(co, y, x) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d: identity 1x1 kernel") {
  Tape<double> t;
  int x = t.leaf(randt({2, 4, 5}, 11));
  Tensor<double> k = Tensor<double>::zeros({2, 2, 1, 1});
  k.v = {1, 0, 0, 1};  // per-channel identity
  int y = t.conv2d(x, t.constant(k), -1, 1, 0);
  for (int i = 0; i < t.value(x).numel(); ++i) CHECK(t.value(y)[i] == t.value(x)[i]);
}

TEST_CASE("conv2d: averaging a constant image") {
  Tape<double> t;
  const double c = 0.73;
  int x = t.constant(Tensor<double>::full({1, 6, 6}, c));
  int k = t.constant(Tensor<double>::full({1, 1, 3, 3}, 1.0 / 9.0));
  int y = t.conv2d(x, k, -1, 1, 0);
  CHECK(t.value(y).shape == Shape{1, 4, 4});
  for (double v : t.value(y).v) CHECK(v == doctest::Approx(c).epsilon(1e-12));
}

TEST_CASE("conv2d: matches quadruple-loop oracle") {
  Tensor<double> in = randt({1, 5, 7}, 21);
  Tensor<double> ker = randt({2, 1, 3, 3}, 22);
  for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
    Tape<double> t;
    int y = t.conv2d(t.constant(in), t.constant(ker), -1, stride, pad);
    Tensor<double> want = conv_oracle(in, ker, stride, pad);
    REQUIRE(t.value(y).shape == want.shape);
    for (int i = 0; i < want.numel(); ++i)
      CHECK(std::abs(t.value(y)[i] - want[i]) < 1e-12);
  }
}

TEST_CASE("conv2d: channel mismatch is rejected with a dimension report") {
  Tape<double> t;
  int x = t.constant(randt({3, 5, 5}, 1));
  int k = t.constant(randt({2, 2, 3, 3}, 2));
  CHECK_THROWS_WITH_AS(t.conv2d(x, k, -1, 1, 1), doctest::Contains("channel mismatch"),
                       std::invalid_argument);
}

TEST_CASE("bilinear_upsample: constant and factor-1 identity") {
  Tape<double> t;
  int c = t.constant(Tensor<double>::full({2, 3, 4}, 0.31));
  int up = t.bilinear_upsample(c, 3);
  CHECK(t.value(up).shape == Shape{2, 9, 12});
  for (double v : t.value(up).v) CHECK(v == doctest::Approx(0.31).epsilon(1e-12));

  Tensor<double> r = randt({1, 4, 4}, 5);
  int id1 = t.bilinear_upsample(t.constant(r), 1);
  for (int i = 0; i < r.numel(); ++i) CHECK(t.value(id1)[i] == r[i]);
}

TEST_CASE("bilinear_upsample: 2x2 by factor 2 matches the coordinate formula") {
  Tensor<double> in({1, 2, 2}, {0, 1, 2, 3});
  Tape<double> t;
  int up = t.bilinear_upsample(t.constant(in), 2);
  auto sample = [&](double sy, double sx) {
    sy = std::clamp(sy, 0.0, 1.0);
    sx = std::clamp(sx, 0.0, 1.0);
    int y0 = std::min((int)std::floor(sy), 0), x0 = std::min((int)std::floor(sx), 0);
    double wy = sy - y0, wx = sx - x0;
    auto at = [&](int y, int x) { return in.at3(0, y, x); };
    return (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
           wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
  };
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      double want = sample((y + 0.5) / 2.0 - 0.5, (x + 0.5) / 2.0 - 0.5);
      CHECK(t.value(up).at3(0, y, x) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("maxpool2: constants, tiny case, brute-force oracle, odd rejection") {
  Tape<double> t;
  int c = t.constant(Tensor<double>::full({1, 4, 4}, 2.5));
  for (double v : t.value(t.maxpool2(c)).v) CHECK(v == 2.5);

  int m = t.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
  CHECK(t.value(t.maxpool2(m)).v == std::vector<double>{4});

  Tensor<double> r = randt({1, 6, 6}, 9);
  int p = t.maxpool2(t.constant(r));
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      double want = std::max({r.at3(0, 2 * y, 2 * x), r.at3(0, 2 * y, 2 * x + 1),
                              r.at3(0, 2 * y + 1, 2 * x), r.at3(0, 2 * y + 1, 2 * x + 1)});
      CHECK(t.value(p).at3(0, y, x) == want);
    }

  CHECK_THROWS_AS(t.maxpool2(t.constant(randt({1, 5, 6}, 2))), std::invalid_argument);
}

TEST_CASE("se_recalibrate: zero weights halve the input") {
  Tape<double> t;
  Tensor<double> in = randt({4, 3, 3}, 31);
  int x = t.constant(in);
  int w1 = t.constant(Tensor<double>::zeros({2, 4}));
  int w2 = t.constant(Tensor<double>::zeros({4, 2}));
  int y = t.se_recalibrate(x, w1, w2);
  for (int i = 0; i < in.numel(); ++i)
    CHECK(t.value(y)[i] == doctest::Approx(in[i] / 2.0).epsilon(1e-15));
}

TEST_CASE("se_recalibrate: gates strictly inside (0,1)") {
  Tape<double> t;
  Tensor<double> in = randt({4, 5, 5}, 41, 2.0);
  for (auto& v : in.v) v = std::abs(v) + 0.1;  // nonzero so gate = out/in is observable
  int y = t.se_recalibrate(t.constant(in), t.constant(randt({2, 4}, 42, 3.0)),
                           t.constant(randt({4, 2}, 43, 3.0)));
  for (int i = 0; i < in.numel(); ++i) {
    double gate = t.value(y)[i] / in[i];
    CHECK(gate > 0.0);
    CHECK(gate < 1.0);
  }
}

TEST_CASE("se_recalibrate: matches flat scalar-loop oracle") {
  Tensor<double> in = randt({4, 3, 5}, 51);
  Tensor<double> w1 = randt({2, 4}, 52);
  Tensor<double> w2 = randt({4, 2}, 53);
  Tape<double> t;
  int y = t.se_recalibrate(t.constant(in), t.constant(w1), t.constant(w2));

  // oracle: plain scalar loops
  double gap[4] = {0, 0, 0, 0};
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 15; ++i) gap[c] += in.v[(size_t)(c * 15 + i)];
    gap[c] /= 15.0;
  }
  double hid[2];
  for (int m = 0; m < 2; ++m) {
    double a = 0;
    for (int n = 0; n < 4; ++n) a += w1.v[(size_t)(m * 4 + n)] * gap[n];
    hid[m] = a > 0 ? a : 0;
  }
  for (int c = 0; c < 4; ++c) {
    double a = 0;
    for (int m = 0; m < 2; ++m) a += w2.v[(size_t)(c * 2 + m)] * hid[m];
    double gate = 1.0 / (1.0 + std::exp(-a));
    for (int i = 0; i < 15; ++i) {
      double want = in.v[(size_t)(c * 15 + i)] * gate;
      CHECK(std::abs(t.value(y).v[(size_t)(c * 15 + i)] - want) < 1e-12);
    }
  }
}

TEST_CASE("row_softmax: uniform, shift invariance, direct oracle, row sums") {
  Tape<double> t;
  int u = t.row_softmax(t.constant(Tensor<double>::full({3, 8}, 1.7)), 1.0);
  for (double v : t.value(u).v) CHECK(v == doctest::Approx(1.0 / 8).epsilon(1e-14));

  Tensor<double> row = randt({1, 10}, 61);
  Tensor<double> shifted = row;
  for (auto& v : shifted.v) v += 3.21;
  int a = t.row_softmax(t.constant(row), 0.5);
  int b = t.row_softmax(t.constant(shifted), 0.5);
  for (int i = 0; i < 10; ++i) CHECK(t.value(a)[i] == doctest::Approx(t.value(b)[i]).epsilon(1e-13));

  // direct exp/normalize oracle at temperature 0.5
  double z = 0;
  std::vector<double> want(10);
  for (int i = 0; i < 10; ++i) z += (want[i] = std::exp(row[i] / 0.5));
  for (int i = 0; i < 10; ++i) CHECK(t.value(a)[i] == doctest::Approx(want[i] / z).epsilon(1e-12));

  Tensor<double> big = randt({16, 24}, 62, 4.0);
  int sm = t.row_softmax(t.constant(big), 1.0);
  for (int y = 0; y < 16; ++y) {
    double s = 0;
    for (int x = 0; x < 24; ++x) s += t.value(sm).at2(y, x);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("row_expectation: point mass and uniform") {
  Tape<double> t;
  Tensor<double> onehot = Tensor<double>::zeros({1, 9});
  onehot.at2(0, 4) = 1.0;
  CHECK(t.value(t.row_expectation(t.constant(onehot)))[0] == 4.0);
  int u = t.row_expectation(t.constant(Tensor<double>::full({2, 9}, 1.0 / 9)));
  CHECK(t.value(u)[0] == doctest::Approx(4.0).epsilon(1e-13));
}

TEST_CASE("graph: diamond fan-out accumulates additively, one visit per node") {
  // L = sum(relu(x) * sigmoid(x)): x fans out to two paths
  Tensor<double> x0 = randt({6}, 71);
  for (auto& v : x0.v) v = std::abs(v) + 0.5;  // keep relu away from its kink
  auto build = [](Tape<double>& t, const std::vector<int>& leaves) {
    return t.sum(t.elementwise_mul(t.relu(leaves[0]), t.sigmoid(leaves[0])));
  };
  auto r = gradcheck(build, {x0});
  CHECK(r.finite);
  CHECK(r.max_rel_err < 1e-6);

  Tape<double> t;
  int x = t.leaf(x0);
  int root = build(t, {x});
  t.backward(root);
  CHECK(t.backward_calls() == 4);  // relu, sigmoid, mul, sum: each exactly once

  // fan-out grad equals the sum of path grads: d(x+x)/dx = 2
  Tape<double> t2;
  int y = t2.leaf(Tensor<double>::scalar(1.25));
  t2.backward(t2.add(y, y));
  CHECK(t2.grad_tensor(y)[0] == 2.0);
}

TEST_CASE("forward determinism: identical graphs give bit-identical values") {
  auto run = [] {
    Tape<double> t;
    int x = t.leaf(randt({3, 8, 8}, 81));
    int k = t.leaf(randt({4, 3, 3, 3}, 82, 0.3));
    int y = t.relu(t.conv2d(x, k, -1, 1, 1));
    int se = t.se_recalibrate(y, t.leaf(randt({1, 4}, 83)), t.leaf(randt({4, 1}, 84)));
    return t.value(se).v;
  };
  CHECK(run() == run());
}

// ---------------------------------------------------------------------------
// gradcheck: every differentiable operator
// ---------------------------------------------------------------------------

TEST_CASE("gradcheck: linear conv is exact to rounding") {
  Tensor<double> ker = randt({2, 1, 3, 3}, 91);
  auto r = gradcheck(
      [&](Tape<double>& t, const std::vector<int>& l) {
        return t.conv2d(l[0], t.constant(ker), -1, 1, 1);
      },
      {randt({1, 5, 5}, 92)});
  CHECK(r.finite);
  CHECK(r.max_rel_err < 1e-9);
}

TEST_CASE("gradcheck: relu at 5 is locally linear") {
  auto r = gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.sum(t.relu(l[0])); },
                     {Tensor<double>::scalar(5.0)});
  CHECK(r.finite);
  CHECK(r.max_rel_err < 1e-9);
}

TEST_CASE("gradcheck: conv2d with kernel and bias") {
  auto r = gradcheck(
      [](Tape<double>& t, const std::vector<int>& l) { return t.conv2d(l[0], l[1], l[2], 1, 1); },
      {randt({2, 5, 4}, 101), randt({3, 2, 3, 3}, 102), randt({3}, 103)});
  CHECK(r.finite);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: strided conv2d") {
  auto r = gradcheck(
      [](Tape<double>& t, const std::vector<int>& l) { return t.conv2d(l[0], l[1], -1, 2, 1); },
      {randt({1, 6, 6}, 104), randt({2, 1, 3, 3}, 105)});
  CHECK(r.finite);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: se_recalibrate at a random point") {
  auto r = gradcheck(
      [](Tape<double>& t, const std::vector<int>& l) { return t.se_recalibrate(l[0], l[1], l[2]); },
      {randt({4, 3, 3}, 111), randt({2, 4}, 112), randt({4, 2}, 113)});
  CHECK(r.finite);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: elementwise and reduction ops") {
  CHECK(gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.sigmoid(l[0]); },
                  {randt({7}, 121)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck(
            [](Tape<double>& t, const std::vector<int>& l) { return t.elementwise_mul(l[0], l[1]); },
            {randt({3, 4}, 122), randt({3, 4}, 123)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.global_avg_pool(l[0]); },
                  {randt({3, 4, 4}, 124)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.mean_over_width(l[0]); },
                  {randt({2, 5, 6}, 125)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck(
            [](Tape<double>& t, const std::vector<int>& l) { return t.fully_connected(l[0], l[1], l[2]); },
            {randt({5}, 126), randt({3, 5}, 127), randt({3}, 128)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck(
            [](Tape<double>& t, const std::vector<int>& l) { return t.concat_channels({l[0], l[1]}); },
            {randt({2, 3, 3}, 129), randt({1, 3, 3}, 130)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.atan_elem(l[0]); },
                  {randt({5}, 131)})
            .max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: pooling, upsample, norm, softmax paths") {
  CHECK(gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.maxpool2(l[0]); },
                  {randt({2, 4, 4}, 141)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.bilinear_upsample(l[0], 2); },
                  {randt({2, 3, 4}, 142)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck(
            [](Tape<double>& t, const std::vector<int>& l) { return t.instance_norm(l[0], l[1], l[2]); },
            {randt({2, 4, 4}, 143), randt({2}, 144), randt({2}, 145)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck([](Tape<double>& t, const std::vector<int>& l) { return t.row_softmax(l[0], 0.7); },
                  {randt({3, 6}, 146)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck(
            [](Tape<double>& t, const std::vector<int>& l) { return t.row_expectation(t.row_softmax(l[0], 1.0)); },
            {randt({3, 6}, 147)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck(
            [](Tape<double>& t, const std::vector<int>& l) { return t.scale_channels(l[0], l[1]); },
            {randt({3, 4, 4}, 148), randt({3}, 149)})
            .max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: losses") {
  Tensor<double> target({6}, {1, 0, 1, 1, 0, 0});
  Tensor<double> pred = Tensor<double>({6}, {0.7, 0.2, 0.9, 0.4, 0.3, 0.6});
  CHECK(gradcheck(
            [&](Tape<double>& t, const std::vector<int>& l) { return t.binary_cross_entropy(t.sigmoid(l[0]), target); },
            {randt({6}, 151)})
            .max_rel_err < 1e-4);
  CHECK(gradcheck(
            [&](Tape<double>& t, const std::vector<int>& l) {
              return t.weighted_cross_entropy(l[0], target, 10.0);
            },
            {pred})
            .max_rel_err < 1e-4);
  // keep L1 away from zero differences
  Tensor<double> tgt2({5}, {0, 0, 0, 0, 0});
  Tensor<double> p2({5}, {0.4, -0.7, 1.2, -0.5, 0.9});
  CHECK(gradcheck([&](Tape<double>& t, const std::vector<int>& l) { return t.l1_loss(l[0], tgt2); }, {p2})
            .max_rel_err < 1e-4);
  CHECK(gradcheck([&](Tape<double>& t, const std::vector<int>& l) { return t.l2_loss(l[0], tgt2); }, {p2})
            .max_rel_err < 1e-4);
  CHECK(gradcheck([&](Tape<double>& t, const std::vector<int>& l) { return t.logit(t.sigmoid(l[0])); },
                  {randt({5}, 152)})
            .max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: restrict_rows and crl away from hinge kinks") {
  std::vector<uint8_t> mask = {0, 1, 1, 1, 0, 1, 1, 0};
  CHECK(gradcheck(
            [&](Tape<double>& t, const std::vector<int>& l) { return t.sum(t.restrict_rows(l[0], mask)); },
            {randt({8}, 161)})
            .max_rel_err < 1e-4);
  // |dx| values far from delta=1
  Tensor<double> x({5}, {0.0, 2.5, 2.6, -0.5, -0.4});
  CHECK(gradcheck([&](Tape<double>& t, const std::vector<int>& l) { return t.crl(l[0], 1.0); }, {x})
            .max_rel_err < 1e-4);
}

TEST_CASE("weighted_sum of scalar terms") {
  Tape<double> t;
  int a = t.leaf(Tensor<double>::scalar(2.0));
  int b = t.leaf(Tensor<double>::scalar(3.0));
  int s = t.weighted_sum({{a, 1.5}, {b, 0.5}});
  CHECK(t.value(s)[0] == doctest::Approx(4.5));
  t.backward(s);
  CHECK(t.grad_tensor(a)[0] == 1.5);
  CHECK(t.grad_tensor(b)[0] == 0.5);
}
