#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "midline/losses.hpp"
#include "midline/model.hpp"

using namespace midline;
using namespace midline::model;
using ad::Tensor;

namespace {

Tensor<double> smooth_image(int H, int W, uint64_t seed) {
  ad::Rng rng(seed);
  const double ph = rng.uniform(0, 6.28);
  auto img = Tensor<double>::zeros({H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      img.at2(y, x) = 0.5 + 0.25 * std::sin(0.2 * x + ph) * std::cos(0.15 * y) + 0.02 * ((x * 7 + y * 3) % 5);
  return img;
}

struct Built {
  ad::Tape<double> tape;
  WeightStore<double>* store;
  ModelNodes<double> nodes;
  ParamBinder<double>* binder;
};

CarNetConfig tiny_config() {
  CarNetConfig cfg;
  cfg.base_width = 2;
  cfg.se_reduction = 2;
  cfg.refine_blocks = {1, 1, 1, 1, 1};
  return cfg;
}

}  // namespace

TEST_CASE("unet_forward: stride arithmetic at 128x96, base width 8") {
  WeightStore<double> store;
  ad::Rng rng(1);
  ad::Tape<double> t;
  ParamBinder<double> pb(store, t, false, &rng);
  CarNetConfig cfg;
  int img = t.constant(smooth_image(128, 96, 2).reshaped({1, 128, 96}));
  auto pyr = unet_forward(t, pb, img, cfg);
  CHECK(t.value(pyr.f[0]).shape == ad::Shape{8, 128, 96});
  CHECK(t.value(pyr.f[1]).shape == ad::Shape{16, 64, 48});
  CHECK(t.value(pyr.f[2]).shape == ad::Shape{32, 32, 24});
  CHECK(t.value(pyr.f[3]).shape == ad::Shape{64, 16, 12});
  CHECK(t.value(pyr.f[4]).shape == ad::Shape{128, 8, 6});
}

TEST_CASE("unet_forward: indivisible extents rejected") {
  WeightStore<double> store;
  ad::Rng rng(1);
  ad::Tape<double> t;
  ParamBinder<double> pb(store, t, false, &rng);
  int img = t.constant(Tensor<double>::zeros({1, 40, 48}));
  CHECK_THROWS_AS(unet_forward(t, pb, img, CarNetConfig{}), ConfigError);
}

TEST_CASE("zero weights: features vanish, head outputs are exactly 0.5, all finite") {
  WeightStore<double> store;
  {
    ad::Rng rng(3);
    ad::Tape<double> t;
    ParamBinder<double> pb(store, t, false, &rng);
    int img = t.constant(smooth_image(32, 32, 4).reshaped({1, 32, 32}));
    build_model(t, pb, img, tiny_config());
  }
  for (auto& [name, tensor] : store.tensors)
    for (auto& v : tensor.v) v = 0.0;

  ad::Tape<double> t;
  ParamBinder<double> pb(store, t, false, nullptr);
  int img = t.constant(smooth_image(32, 32, 4).reshaped({1, 32, 32}));
  auto m = build_model(t, pb, img, tiny_config());
  for (int i = 0; i < 5; ++i)
    for (double v : t.value(m.pyramid.f[(size_t)i]).v) CHECK(v == 0.0);
  for (double v : t.value(m.limits).v) CHECK(v == 0.5);
  for (double v : t.value(m.band).v) CHECK(v == 0.5);
  // uniform rows: soft-argmax lands on the center of mass
  for (double v : t.value(m.coords).v) CHECK(v == doctest::Approx((32 - 1) / 2.0).epsilon(1e-12));
  CHECK(t.value(m.coords).all_finite());
}

TEST_CASE("model forward is bit-identical for a fixed seed") {
  auto run = [] {
    WeightStore<double> store;
    ad::Rng rng(55);
    ad::Tape<double> t;
    ParamBinder<double> pb(store, t, false, &rng);
    int img = t.constant(smooth_image(32, 32, 5).reshaped({1, 32, 32}));
    auto m = build_model(t, pb, img, tiny_config());
    return std::tuple{t.value(m.limits).v, t.value(m.band).v, t.value(m.coords).v};
  };
  CHECK(run() == run());
}

TEST_CASE("car_refine: degenerate single-level config reduces to block + SE + fuse") {
  WeightStore<double> store;
  ad::Rng rng(7);
  CarNetConfig cfg = tiny_config();
  cfg.levels = 1;

  ad::Tape<double> t;
  ParamBinder<double> pb(store, t, false, &rng);
  int img = t.constant(smooth_image(32, 32, 8).reshaped({1, 32, 32}));
  auto pyr = unet_forward(t, pb, img, cfg);
  int refined = car_refine(t, pb, pyr, cfg);
  CHECK(t.value(refined).shape == t.value(pyr.f[0]).shape);

  // manual composition over the same weights
  int manual = basic_block(t, pb, "car.lvl1.b0", pyr.f[0], cfg.base_width, cfg.base_width);
  int se = t.se_recalibrate(manual, pb.param("car.lvl1.se.w1", {1, 2}, ParamBinder<double>::Init::zeros),
                            pb.param("car.lvl1.se.w2", {2, 1}, ParamBinder<double>::Init::zeros));
  int fuse = basic_block(t, pb, "car.fuse", se, cfg.base_width, cfg.base_width);
  CHECK(t.value(fuse).v == t.value(refined).v);
}

TEST_CASE("car_refine: f^R extent equals the input extent for every legal config") {
  struct Variant {
    int base, red, levels;
    std::array<int, 5> blocks;
  };
  for (const Variant& v : {Variant{4, 2, 5, {1, 1, 2, 2, 3}}, Variant{2, 2, 3, {1, 2, 2, 2, 2}},
                           Variant{6, 3, 2, {1, 1, 1, 1, 1}}}) {
    WeightStore<double> store;
    ad::Rng rng(9);
    ad::Tape<double> t;
    ParamBinder<double> pb(store, t, false, &rng);
    CarNetConfig cfg;
    cfg.base_width = v.base;
    cfg.se_reduction = v.red;
    cfg.levels = v.levels;
    cfg.refine_blocks = v.blocks;
    int img = t.constant(smooth_image(32, 48, 10).reshaped({1, 32, 48}));
    auto pyr = unet_forward(t, pb, img, cfg);
    int refined = car_refine(t, pb, pyr, cfg);
    CHECK(t.value(refined).shape == ad::Shape{v.base, 32, 48});
  }
}

TEST_CASE("car_refine: zeroed SE weights gate every level at exactly one half") {
  WeightStore<double> store;
  CarNetConfig cfg = tiny_config();
  {
    ad::Rng rng(11);
    ad::Tape<double> t;
    ParamBinder<double> pb(store, t, false, &rng);
    int img = t.constant(smooth_image(32, 32, 12).reshaped({1, 32, 32}));
    auto pyr = unet_forward(t, pb, img, cfg);
    car_refine(t, pb, pyr, cfg);
  }
  for (auto& [name, tensor] : store.tensors)
    if (name.find(".se.") != std::string::npos)
      for (auto& v : tensor.v) v = 0.0;

  ad::Tape<double> t;
  ParamBinder<double> pb(store, t, false, nullptr);
  int img = t.constant(smooth_image(32, 32, 12).reshaped({1, 32, 32}));
  auto pyr = unet_forward(t, pb, img, cfg);
  RefineDiagnostics<double> diag;
  car_refine(t, pb, pyr, cfg, &diag);
  REQUIRE(diag.f_local.size() == 5);
  for (size_t i = 0; i < diag.f_local.size(); ++i) {
    const auto& fl = t.value(diag.f_local[i]).v;
    const auto& fa = t.value(diag.f_attended[i]).v;
    for (size_t j = 0; j < fl.size(); ++j) CHECK(fa[j] == doctest::Approx(0.5 * fl[j]).epsilon(1e-14));
  }
}

TEST_CASE("limits_head: zero weights give probability 0.5; outputs always in (0,1)") {
  WeightStore<double> store;
  ad::Rng rng(13);
  ad::Tape<double> t;
  ParamBinder<double> pb(store, t, false, &rng);
  int feat = t.constant(ad::random_tensor<double>({4, 16, 16}, rng));
  CarNetConfig cfg = tiny_config();
  cfg.base_width = 4;
  int out = limits_head(t, pb, feat, cfg);
  CHECK(t.value(out).shape == ad::Shape{1, 16, 1});
  for (double v : t.value(out).v) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  for (auto& [name, tensor] : store.tensors)
    for (auto& v : tensor.v) v = 0.0;
  ad::Tape<double> t2;
  ParamBinder<double> pb2(store, t2, false, nullptr);
  int out2 = limits_head(t2, pb2, t2.constant(ad::random_tensor<double>({4, 16, 16}, rng)), cfg);
  for (double v : t2.value(out2).v) CHECK(v == 0.5);
}

TEST_CASE("regression_head: point mass, uniform row, and the expectation oracle") {
  ad::Tape<double> t;
  const int W = 24;
  auto onehot = Tensor<double>::full({1, W}, 1e-9);
  onehot.at2(0, 17) = 1.0 - 1e-9;
  int c = regression_head<double>(t, t.constant(onehot), 1.0);
  CHECK(t.value(c)[0] == doctest::Approx(17.0).epsilon(1e-6));

  int u = regression_head<double>(t, t.constant(Tensor<double>::full({3, W}, 0.4)), 1.0);
  for (int y = 0; y < 3; ++y) CHECK(t.value(u)[y] == doctest::Approx((W - 1) / 2.0).epsilon(1e-12));

  ad::Rng rng(15);
  auto band = Tensor<double>::zeros({1, W});
  for (auto& v : band.v) v = rng.uniform(0.05, 0.95);
  int r = regression_head<double>(t, t.constant(band), 1.0);
  // direct oracle: softmax of logits, then sum x * p
  std::vector<double> logits(W);
  double m = -1e300;
  for (int i = 0; i < W; ++i) m = std::max(m, logits[(size_t)i] = std::log(band[i] / (1 - band[i])));
  double z = 0;
  for (int i = 0; i < W; ++i) z += std::exp(logits[(size_t)i] - m);
  double want = 0;
  for (int i = 0; i < W; ++i) want += i * std::exp(logits[(size_t)i] - m) / z;
  CHECK(t.value(r)[0] == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("largest_run: run selection oracle cases") {
  std::vector<uint8_t> m(128, 0);
  for (int i = 5; i <= 20; ++i) m[(size_t)i] = 1;
  for (int i = 40; i <= 100; ++i) m[(size_t)i] = 1;
  CHECK(largest_run(m) == std::pair{40, 100});

  std::vector<uint8_t> exact(128, 0);
  for (int i = 10; i <= 90; ++i) exact[(size_t)i] = 1;
  CHECK(largest_run(exact) == std::pair{10, 90});

  CHECK(largest_run(std::vector<uint8_t>(16, 0)) == std::pair{-1, -1});
  CHECK(largest_run(std::vector<uint8_t>(16, 1)) == std::pair{0, 15});
}

TEST_CASE("infer: pure, deterministic, structurally sound on random weights") {
  WeightStore<float> store;
  {
    ad::Rng rng(17);
    ad::Tape<float> t;
    ParamBinder<float> pb(store, t, false, &rng);
    int img = t.constant(Tensor<float>::zeros({1, 32, 32}));
    build_model(t, pb, img, tiny_config());
  }
  auto image = smooth_image(32, 32, 18);
  auto r1 = infer(image, store, tiny_config());
  auto r2 = infer(image, store, tiny_config());
  CHECK(r1.found == r2.found);
  CHECK(r1.coords == r2.coords);
  CHECK(r1.limits == r2.limits);
  if (r1.found) {
    auto [lo, hi] = largest_run(r1.limits);
    for (int y = lo; y <= hi; ++y) {
      CHECK(r1.limits[(size_t)y] == 1);
      CHECK(r1.coords[(size_t)y] >= 0.0);
      CHECK(r1.coords[(size_t)y] <= 31.0);
    }
  }
}

TEST_CASE("infer: all limits below threshold yields an explicit empty result") {
  WeightStore<double> store;
  {
    ad::Rng rng(19);
    ad::Tape<double> t;
    ParamBinder<double> pb(store, t, false, &rng);
    int img = t.constant(Tensor<double>::zeros({1, 32, 32}));
    build_model(t, pb, img, tiny_config());
  }
  for (auto& [name, tensor] : store.tensors)
    for (auto& v : tensor.v) v = 0.0;
  // zero weights give limits = 0.5 everywhere; threshold 0.6 clears them
  CarNetConfig cfg = tiny_config();
  cfg.limits_threshold = 0.6;
  auto image = smooth_image(32, 32, 20);
  auto r = infer(image, store, cfg);
  CHECK(!r.found);
  CHECK(!r.warning.empty());
  CHECK(r.overlay.v == image.v);  // untouched
  for (auto v : r.limits) CHECK(v == 0);
}

TEST_CASE("parameter budget: refinement adds at most 5 percent") {
  auto count = [](bool refine) {
    WeightStore<double> store;
    ad::Rng rng(21);
    ad::Tape<double> t;
    ParamBinder<double> pb(store, t, false, &rng);
    CarNetConfig cfg;  // default desk config
    cfg.use_refinement = refine;
    int img = t.constant(Tensor<double>::zeros({1, 32, 32}));
    build_model(t, pb, img, cfg);
    return store.total_params();
  };
  const auto base = count(false);
  const auto car = count(true);
  CHECK(car > base);
  CHECK((double)(car - base) / (double)base <= 0.05);
}

TEST_CASE("end-to-end: d(L_reg + L_CR)/d(first conv weight) matches finite differences") {
  const int H = 32, W = 32;
  CarNetConfig cfg = tiny_config();
  loss::LossWeights lw;
  lw.lambda = 0;
  lw.gamma = 0;
  lw.xi = 1;
  lw.mu = 1;
  lw.delta = 0.01;  // small margin so the hinge is active at random init

  loss::LossTargets<double> tgt;
  tgt.limits = Tensor<double>::zeros({H});
  tgt.band = Tensor<double>::zeros({H, W});
  tgt.coords = Tensor<double>::zeros({H});
  tgt.present.assign((size_t)H, 0);
  for (int y = 6; y <= 25; ++y) {
    tgt.present[(size_t)y] = 1;
    tgt.limits[y] = 1;
    tgt.coords[y] = 14.0 + 0.2 * y;
    tgt.band.at2(y, (int)tgt.coords[y]) = 1;
  }
  auto image = smooth_image(H, W, 23);

  WeightStore<double> store;
  auto eval = [&](bool want_grad, Tensor<double>* grad_out) {
    ad::Rng rng(24);
    ad::Tape<double> t;
    ParamBinder<double> pb(store, t, want_grad, store.tensors.empty() ? &rng : nullptr);
    int img = t.constant(image.reshaped({1, H, W}));
    auto m = build_model(t, pb, img, cfg);
    int limits_flat = t.reshape(m.limits, {H});
    auto terms = loss::total_loss(t, limits_flat, m.band, m.coords, tgt, lw);
    const double val = t.value(terms.total)[0];
    if (want_grad) {
      t.backward(terms.total);
      for (const auto& b : pb.bound)
        if (store.tensors[(size_t)b.store_index].first == "unet.enc1.b0.conv.w")
          *grad_out = t.grad_tensor(b.node);
    }
    return val;
  };

  Tensor<double> analytic;
  const double base = eval(true, &analytic);
  CHECK(base > 0.0);
  REQUIRE(analytic.numel() == 18);

  auto& probe = store.get("unet.enc1.b0.conv.w");
  // gradients through the soft-argmax are O(100); a smaller step keeps
  // the central-difference truncation error below the tolerance
  const double h = 1e-6;
  for (int c : {0, 3, 7, 11, 14, 17}) {
    const double keep = probe[c];
    probe[c] = keep + h;
    const double up = eval(false, nullptr);
    probe[c] = keep - h;
    const double dn = eval(false, nullptr);
    probe[c] = keep;
    const double numeric = (up - dn) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[c]), 1e-6});
    CHECK(std::abs(numeric - analytic[c]) / denom < 1e-3);
  }
}
