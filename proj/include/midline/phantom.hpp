#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "midline/errors.hpp"
#include "midline/geometry.hpp"
#include "midline/tensor.hpp"

namespace midline::phantom {

/// Procedural brain-slice generator. The canonical-pose midline is
///   x(y) = W/2 + a * bump((y - center)/width),
/// a cosine-squared compact bump, so ground truth is analytic and
/// 1-connected by construction. Per-sample variation randomizes the bump
/// sign, center and width (within the envelope the spec fields define),
/// the skull axes, shading and noise, and the pose perturbation.
struct PhantomSpec {
  int height = 128;
  int width = 96;
  double skull_semi_y = 56;  // px
  double skull_semi_x = 40;  // px
  double bump_amplitude = 10;  // a, px
  double bump_center = 64;     // row
  double bump_width = 30;      // px (half-support of the bump)
  int limits_top = 20;         // y_top
  int limits_bottom = 108;     // y_bot (inclusive)
  double band_halfwidth = 2;   // w, px
  double noise_sigma = 0.02;   // intensity
  double range_t_x = 10;       // pose perturbation ranges (+/-)
  double range_t_y = 10;
  double range_theta = 0.3;  // rad
  uint64_t seed = 1;

  void validate() const;
};

struct Sample {
  uint64_t id = 0;
  ad::Tensor<double> image_src;      // I_S, perturbed pose
  ad::Tensor<double> image_aligned;  // I_A, canonical pose
  geom::RigidPose true_pose;         // rectifying pose: warp(I_S, true_pose) ~ I_A
  std::vector<double> coords;        // Y_C in canonical space, px
  std::vector<uint8_t> limits;       // Y_L, binary
  ad::Tensor<double> band;           // Y_B [H,W], binary
};

std::vector<Sample> generate(const PhantomSpec& spec, int n);

/// Canonical falx-line-only rendering for a sample's midline; used by
/// re-rendering consistency checks.
ad::Tensor<double> render_midline_only(const Sample& s);

/// JSON-lines manifest plus PNG images and CSV labels under `dir`.
/// Round trip is lossless for labels and within 16-bit quantization for
/// images. Returns the manifest path.
std::string save_manifest(const std::vector<Sample>& samples, const std::string& dir);
std::vector<Sample> load_manifest(const std::string& manifest_path);

}  // namespace midline::phantom
