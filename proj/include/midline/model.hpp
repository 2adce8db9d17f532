#pragma once

#include <array>
#include <string>
#include <vector>

#include "midline/errors.hpp"
#include "midline/tape.hpp"
#include "midline/weights_io.hpp"

namespace midline::model {

struct CarNetConfig {
  int base_width = 8;
  int se_reduction = 4;
  std::array<int, 5> refine_blocks{1, 1, 2, 2, 3};  // deeper levels get more
  double temperature = 1.0;                          // regression softmax
  double limits_threshold = 0.5;
  bool use_refinement = true;  // false = plain U-Net baseline
  int levels = 5;

  void validate() const {
    if (base_width < 2) throw ConfigError("base width must be >= 2");
    if (se_reduction < 1 || base_width % se_reduction != 0)
      throw ConfigError("SE reduction ratio must divide the refined channel width");
    if (levels < 1 || levels > 5) throw ConfigError("pyramid levels must be in 1..5");
    for (int i = 1; i < levels; ++i)
      if (refine_blocks[(size_t)i] < refine_blocks[(size_t)i - 1])
        throw ConfigError("refinement block counts must be non-decreasing with depth");
    for (int i = 0; i < levels; ++i)
      if (refine_blocks[(size_t)i] < 1) throw ConfigError("refinement block counts must be >= 1");
    if (temperature <= 0) throw ConfigError("regression temperature must be > 0");
    if (limits_threshold <= 0 || limits_threshold >= 1)
      throw ConfigError("limits threshold must be in (0,1)");
  }
};

/// Creates-or-fetches named parameters, records tape bindings so the
/// optimizer can map gradients back to store slots. With trainable=false
/// parameters enter the tape as constants (inference).
template <class S>
class ParamBinder {
 public:
  struct Binding {
    int store_index;
    int node;
  };
  enum class Init { he_normal, zeros, ones };

  ParamBinder(WeightStore<S>& store, ad::Tape<S>& tape, bool trainable, ad::Rng* init_rng)
      : store_(&store), tape_(&tape), trainable_(trainable), rng_(init_rng) {}

  int param(const std::string& name, ad::Shape shape, Init init, int fan_in = 0) {
    int idx;
    if (store_->has(name)) {
      idx = store_->index.at(name);
      if (store_->tensors[(size_t)idx].second.shape != shape)
        throw ConfigError("weight shape mismatch for " + name);
    } else {
      if (!rng_) throw ConfigError("weights missing and initialization disabled: " + name);
      ad::Tensor<S> t;
      switch (init) {
        case Init::zeros:
          t = ad::Tensor<S>::zeros(shape);
          break;
        case Init::ones:
          t = ad::Tensor<S>::full(shape, S(1));
          break;
        case Init::he_normal: {
          const double scale = std::sqrt(2.0 / std::max(1, fan_in));
          t = ad::random_tensor<S>(shape, *rng_, scale);
          break;
        }
      }
      idx = store_->add(name, std::move(t));
    }
    const auto& tensor = store_->tensors[(size_t)idx].second;
    const int node = trainable_ ? tape_->leaf(tensor) : tape_->constant(tensor);
    if (trainable_) bound.push_back({idx, node});
    return node;
  }

  std::vector<Binding> bound;

 private:
  WeightStore<S>* store_;
  ad::Tape<S>* tape_;
  bool trainable_;
  ad::Rng* rng_;
};

/// conv3x3 -> per-channel instance norm -> relu.
template <class S>
int basic_block(ad::Tape<S>& t, ParamBinder<S>& pb, const std::string& prefix, int x, int c_in,
                int c_out) {
  using Init = typename ParamBinder<S>::Init;
  int w = pb.param(prefix + ".conv.w", {c_out, c_in, 3, 3}, Init::he_normal, c_in * 9);
  int b = pb.param(prefix + ".conv.b", {c_out}, Init::zeros);
  int g = pb.param(prefix + ".norm.g", {c_out}, Init::ones);
  int be = pb.param(prefix + ".norm.b", {c_out}, Init::zeros);
  return t.relu(t.instance_norm(t.conv2d(x, w, b, 1, 1), g, be));
}

template <class S>
struct PyramidNodes {
  std::array<int, 5> f;  // decoder features at strides 1,2,4,8,16
};

/// U-Net backbone: 4 pooled encoder stages plus bottleneck, decoder with
/// bilinear upsampling and skip concatenation. Emits the five
/// decoder-side feature maps; f[0] is at input resolution.
template <class S>
PyramidNodes<S> unet_forward(ad::Tape<S>& t, ParamBinder<S>& pb, int image, const CarNetConfig& cfg) {
  const auto& sh = t.value(image).shape;
  if (sh.size() != 3 || sh[0] != 1) throw ConfigError("unet_forward expects [1,H,W]");
  if (sh[1] % 16 != 0 || sh[2] % 16 != 0)
    throw ConfigError("unet_forward requires extents divisible by 16, got " + ad::shape_str(sh));
  const int B = cfg.base_width;

  auto stage = [&](const std::string& name, int x, int cin, int cout) {
    int h = basic_block(t, pb, name + ".b0", x, cin, cout);
    return basic_block(t, pb, name + ".b1", h, cout, cout);
  };

  int e1 = stage("unet.enc1", image, 1, B);
  int e2 = stage("unet.enc2", t.maxpool2(e1), B, 2 * B);
  int e3 = stage("unet.enc3", t.maxpool2(e2), 2 * B, 4 * B);
  int e4 = stage("unet.enc4", t.maxpool2(e3), 4 * B, 8 * B);
  int f5 = stage("unet.enc5", t.maxpool2(e4), 8 * B, 16 * B);

  int d4 = stage("unet.dec4", t.concat_channels({t.bilinear_upsample(f5, 2), e4}), 24 * B, 8 * B);
  int d3 = stage("unet.dec3", t.concat_channels({t.bilinear_upsample(d4, 2), e3}), 12 * B, 4 * B);
  int d2 = stage("unet.dec2", t.concat_channels({t.bilinear_upsample(d3, 2), e2}), 6 * B, 2 * B);
  int d1 = stage("unet.dec1", t.concat_channels({t.bilinear_upsample(d2, 2), e1}), 3 * B, B);

  return PyramidNodes<S>{{d1, d2, d3, d4, f5}};
}

template <class S>
struct RefineDiagnostics {
  std::vector<int> f_local;        // f_i^l node ids
  std::vector<int> f_attended;     // f_i^a node ids
};

/// Context-aware refinement: per level, a stack of basic blocks narrows
/// the level to the base width (f_i^l), SE recalibration picks the
/// discriminative channels (f_i^a), then all levels are upsampled to
/// full resolution, concatenated and fused by one basic block into f^R.
template <class S>
int car_refine(ad::Tape<S>& t, ParamBinder<S>& pb, const PyramidNodes<S>& pyr, const CarNetConfig& cfg,
               RefineDiagnostics<S>* diag = nullptr) {
  using Init = typename ParamBinder<S>::Init;
  cfg.validate();
  const int B = cfg.base_width;
  const int R = B / cfg.se_reduction;
  std::vector<int> upsampled;
  for (int i = 0; i < cfg.levels; ++i) {
    const std::string lvl = "car.lvl" + std::to_string(i + 1);
    int x = pyr.f[(size_t)i];
    int cin = t.value(x).shape[0];
    for (int bi = 0; bi < cfg.refine_blocks[(size_t)i]; ++bi) {
      x = basic_block(t, pb, lvl + ".b" + std::to_string(bi), x, cin, B);
      cin = B;
    }
    int w1 = pb.param(lvl + ".se.w1", {R, B}, Init::he_normal, B);
    int w2 = pb.param(lvl + ".se.w2", {B, R}, Init::he_normal, R);
    int attended = t.se_recalibrate(x, w1, w2);
    if (diag) {
      diag->f_local.push_back(x);
      diag->f_attended.push_back(attended);
    }
    upsampled.push_back(i == 0 ? attended : t.bilinear_upsample(attended, 1 << i));
  }
  int fused_in = upsampled.size() == 1 ? upsampled[0] : t.concat_channels(upsampled);
  return basic_block(t, pb, "car.fuse", fused_in, cfg.levels * B, B);
}

/// Width-pooled per-row classifier: global average over width, then two
/// 1x1 convolutions over the channel dimension, sigmoid.
template <class S>
int limits_head(ad::Tape<S>& t, ParamBinder<S>& pb, int feat, const CarNetConfig& cfg) {
  using Init = typename ParamBinder<S>::Init;
  const int B = cfg.base_width;
  int pooled = t.mean_over_width(feat);  // [B,H,1]
  int w1 = pb.param("head.limits.fc1.w", {B, B, 1, 1}, Init::he_normal, B);
  int b1 = pb.param("head.limits.fc1.b", {B}, Init::zeros);
  int h = t.relu(t.conv2d(pooled, w1, b1, 1, 0));
  int w2 = pb.param("head.limits.fc2.w", {1, B, 1, 1}, Init::he_normal, B);
  int b2 = pb.param("head.limits.fc2.b", {1}, Init::zeros);
  return t.sigmoid(t.conv2d(h, w2, b2, 1, 0));  // [1,H,1]
}

/// 1x1 convolution to one channel plus sigmoid, at input resolution.
template <class S>
int seg_head(ad::Tape<S>& t, ParamBinder<S>& pb, int feat, const CarNetConfig& cfg) {
  using Init = typename ParamBinder<S>::Init;
  const int B = cfg.base_width;
  int w = pb.param("head.seg.w", {1, B, 1, 1}, Init::he_normal, B);
  int b = pb.param("head.seg.b", {1}, Init::zeros);
  return t.sigmoid(t.conv2d(feat, w, b, 1, 0));  // [1,H,W]
}

/// Row-wise soft-argmax over the band probabilities: differentiable
/// coordinates Y_C(y) = sum_x x * softmax(logit(band)/temperature).
template <class S>
int regression_head(ad::Tape<S>& t, int band_hw, double temperature) {
  if (temperature <= 0) throw ConfigError("regression temperature must be > 0");
  int logits = t.logit(band_hw);
  return t.row_expectation(t.row_softmax(logits, (S)temperature));
}

template <class S>
struct ModelNodes {
  int limits = -1;  // [1,H,1] probabilities
  int band = -1;    // [H,W] probabilities
  int coords = -1;  // [H] px
  PyramidNodes<S> pyramid{};
  int refined = -1;  // head input feature (f^R, or f_1 for the baseline)
  RefineDiagnostics<S> diag;
};

template <class S>
ModelNodes<S> build_model(ad::Tape<S>& t, ParamBinder<S>& pb, int image, const CarNetConfig& cfg) {
  cfg.validate();
  ModelNodes<S> m;
  m.pyramid = unet_forward(t, pb, image, cfg);
  m.refined = cfg.use_refinement ? car_refine(t, pb, m.pyramid, cfg, &m.diag) : m.pyramid.f[0];
  m.limits = limits_head(t, pb, m.refined, cfg);
  const int band3 = seg_head(t, pb, m.refined, cfg);
  const auto& bsh = t.value(band3).shape;
  m.band = t.reshape(band3, {bsh[1], bsh[2]});
  m.coords = regression_head<S>(t, m.band, cfg.temperature);
  return m;
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

/// First row index of the largest contiguous run of nonzero entries;
/// ties keep the earliest run. Returns {-1,-1} when the mask is empty.
inline std::pair<int, int> largest_run(const std::vector<uint8_t>& mask) {
  int best_lo = -1, best_len = 0, lo = -1;
  for (int i = 0; i <= (int)mask.size(); ++i) {
    const bool on = i < (int)mask.size() && mask[(size_t)i];
    if (on && lo < 0) lo = i;
    if (!on && lo >= 0) {
      if (i - lo > best_len) {
        best_len = i - lo;
        best_lo = lo;
      }
      lo = -1;
    }
  }
  return best_len ? std::pair{best_lo, best_lo + best_len - 1} : std::pair{-1, -1};
}

struct InferResult {
  bool found = false;
  std::vector<uint8_t> limits;       // binary, after largest-run cleanup
  std::vector<double> coords;        // defined on limit rows
  std::vector<double> limit_probs;   // raw head output
  ad::Tensor<double> overlay;        // aligned image with the midline drawn
  std::string warning;
};

/// Thresholds the limits, keeps the single largest run, masks the
/// coordinates (Hadamard product) and draws them into the aligned image.
/// An empty run yields found=false with a warning, not a crash.
template <class S>
InferResult infer(const ad::Tensor<double>& image, WeightStore<S>& store, const CarNetConfig& cfg) {
  cfg.validate();
  ad::Tape<S> t;
  ParamBinder<S> pb(store, t, /*trainable=*/false, nullptr);
  const int H = image.shape[0], W = image.shape[1];
  int img_node = t.constant(image.template cast<S>().reshaped({1, H, W}));
  ModelNodes<S> m = build_model(t, pb, img_node, cfg);

  InferResult r;
  r.limit_probs.resize((size_t)H);
  for (int y = 0; y < H; ++y) r.limit_probs[(size_t)y] = (double)t.value(m.limits)[y];
  std::vector<uint8_t> mask((size_t)H, 0);
  for (int y = 0; y < H; ++y) mask[(size_t)y] = r.limit_probs[(size_t)y] > cfg.limits_threshold;
  auto [lo, hi] = largest_run(mask);

  r.limits.assign((size_t)H, 0);
  r.coords.assign((size_t)H, 0.0);
  r.overlay = image;
  if (lo < 0) {
    r.found = false;
    r.warning = "no midline found: no row above the limits threshold";
    return r;
  }
  r.found = true;
  for (int y = lo; y <= hi; ++y) {
    r.limits[(size_t)y] = 1;
    r.coords[(size_t)y] = (double)t.value(m.coords)[y];
    const int x = (int)std::lround(r.coords[(size_t)y]);
    if (x >= 0 && x < W) r.overlay.at2(y, x) = 1.0;
  }
  return r;
}

}  // namespace midline::model
