#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "midline/tape.hpp"

namespace midline::geom {

// Coordinate convention used by every module: x = column index,
// y = row index, origin at the top-left pixel, image center at
// (W/2, H/2). Poses are applied by destination-driven sampling: the
// warp output at pixel d is read from the source at
//
//   S_p(d) = Rm(theta) * (d - c) + c + t,   Rm(theta) = [ cos  sin]
//                                                       [-sin  cos]
//
// With this orientation, pose_from_landmarks' theta is the signed angle
// of the falx segment against the vertical axis (positive when the
// inferior end tilts toward +x), and warping by the fitted pose brings
// the segment onto the vertical centerline.

struct Point {
  double x = 0, y = 0;
};

struct RigidPose {
  double t_x = 0;    // px, horizontal displacement
  double t_y = 0;    // px, vertical displacement
  double theta = 0;  // rad, in (-pi, pi]
};

struct LandmarkPair {
  Point p1;  // anterior falx point
  Point p2;  // posterior falx point
};

inline double normalize_angle(double a) {
  while (a <= -3.14159265358979323846) a += 2 * 3.14159265358979323846;
  while (a > 3.14159265358979323846) a -= 2 * 3.14159265358979323846;
  return a;
}

inline Point image_center(int H, int W) { return {W / 2.0, H / 2.0}; }

/// Where the warp output at destination d samples the source image.
inline Point sample_map(const RigidPose& p, Point d, int H, int W) {
  const Point c = image_center(H, W);
  const double ux = d.x - c.x, uy = d.y - c.y;
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  return {ct * ux + st * uy + c.x + p.t_x, -st * ux + ct * uy + c.y + p.t_y};
}

/// Where source content at s lands in the warp output; inverse of sample_map.
inline Point content_map(const RigidPose& p, Point s, int H, int W) {
  const Point c = image_center(H, W);
  const double ux = s.x - c.x - p.t_x, uy = s.y - c.y - p.t_y;
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  return {ct * ux - st * uy + c.x, st * ux + ct * uy + c.y};
}

inline RigidPose inverse(const RigidPose& p) {
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  return {-(ct * p.t_x - st * p.t_y), -(st * p.t_x + ct * p.t_y), normalize_angle(-p.theta)};
}

/// Fits the rigid pose that rectifies the falx segment: theta is the
/// signed angle between P1->P2 and the vertical axis, and the
/// translation brings the segment midpoint to the image center.
inline RigidPose pose_from_landmarks(const LandmarkPair& lm, int H, int W) {
  auto inside = [&](const Point& p) { return p.x >= 0 && p.x <= W - 1 && p.y >= 0 && p.y <= H - 1; };
  if (!inside(lm.p1) || !inside(lm.p2))
    throw std::invalid_argument("pose_from_landmarks: landmarks must lie inside the image");
  const double dx = lm.p2.x - lm.p1.x, dy = lm.p2.y - lm.p1.y;
  if (dx == 0 && dy == 0) throw std::invalid_argument("pose_from_landmarks: coincident landmarks");
  const Point c = image_center(H, W);
  return {(lm.p1.x + lm.p2.x) / 2 - c.x, (lm.p1.y + lm.p2.y) / 2 - c.y,
          normalize_angle(std::atan2(dx, dy))};
}

/// Per-pixel source coordinates for the given pose: grid [H,W,2] with
/// (x_src, y_src) stored at the last axis.
template <class S>
ad::Tensor<S> make_grid(int H, int W, const RigidPose& p) {
  if (H < 1 || W < 1) throw std::invalid_argument("make_grid: extents must be positive");
  auto g = ad::Tensor<S>::zeros({H, W, 2});
  const Point c = image_center(H, W);
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double ux = x - c.x, uy = y - c.y;
      g.v[(size_t)((y * W + x) * 2)] = (S)(ct * ux + st * uy + c.x + p.t_x);
      g.v[(size_t)((y * W + x) * 2 + 1)] = (S)(-st * ux + ct * uy + c.y + p.t_y);
    }
  return g;
}

namespace detail {
/// Bilinear sample with constant fill outside; also returns the spatial
/// derivative of the sampled value with respect to (sx, sy).
template <class S>
struct SampleVal {
  S value, dx, dy;
};

template <class S>
SampleVal<S> bilinear_at(const ad::Tensor<S>& img, double sx, double sy, S fill) {
  const int H = img.shape[0], W = img.shape[1];
  const int x0 = (int)std::floor(sx), y0 = (int)std::floor(sy);
  const S wx = (S)(sx - x0), wy = (S)(sy - y0);
  auto at = [&](int y, int x) -> S {
    return (y < 0 || y >= H || x < 0 || x >= W) ? fill : img.v[(size_t)(y * W + x)];
  };
  const S v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
  const S top = v00 * (S(1) - wx) + v01 * wx;
  const S bot = v10 * (S(1) - wx) + v11 * wx;
  return {top * (S(1) - wy) + bot * wy,
          (v01 - v00) * (S(1) - wy) + (v11 - v10) * wy,
          bot - top};
}
}  // namespace detail

/// Plain (non-tracked) rigid warp via bilinear sampling of the grid.
template <class S>
ad::Tensor<S> warp_rigid(const ad::Tensor<S>& img, const RigidPose& p, S fill = S(0)) {
  if (img.shape.size() != 2) throw std::invalid_argument("warp_rigid expects [H,W]");
  const int H = img.shape[0], W = img.shape[1];
  auto out = ad::Tensor<S>::zeros({H, W});
  const Point c = image_center(H, W);
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double ux = x - c.x, uy = y - c.y;
      const double sx = ct * ux + st * uy + c.x + p.t_x;
      const double sy = -st * ux + ct * uy + c.y + p.t_y;
      out.at2(y, x) = detail::bilinear_at(img, sx, sy, fill).value;
    }
  return out;
}

/// Tracked rigid warp: img node [H,W], pose node [3] = (t_x, t_y, theta).
/// Differentiable with respect to both; this is the pathway that lets
/// the rectifier train through the warp.
template <class S>
int warp_rigid_op(ad::Tape<S>& t, int img, int pose, S fill = S(0)) {
  const auto& im = t.value(img);
  if (im.shape.size() != 2) throw std::invalid_argument("warp_rigid_op expects img [H,W]");
  if (t.value(pose).numel() != 3) throw std::invalid_argument("warp_rigid_op expects pose [3]");
  const int H = im.shape[0], W = im.shape[1];
  const RigidPose p{(double)t.value(pose)[0], (double)t.value(pose)[1], (double)t.value(pose)[2]};
  ad::Tensor<S> out = warp_rigid(im, p, fill);

  bool rq = t.requires_grad(img) || t.requires_grad(pose);
  int id = t.make_node(std::move(out), rq, nullptr);
  if (!rq) return id;

  // Backward re-derives the grid from the saved pose values.
  auto back = [id, img, pose, H, W, fill](ad::Tape<S>& tp) {
    const auto& g = tp.grad_buf(id);
    const auto& im2 = tp.value(img);
    const double tx = (double)tp.value(pose)[0], ty = (double)tp.value(pose)[1],
                 th = (double)tp.value(pose)[2];
    const double ct = std::cos(th), st = std::sin(th);
    const Point c = image_center(H, W);
    const bool need_img = tp.requires_grad(img);
    const bool need_pose = tp.requires_grad(pose);
    S g_tx = 0, g_ty = 0, g_th = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const S gv = g[(size_t)(y * W + x)];
        if (gv == S(0)) continue;
        const double ux = x - c.x, uy = y - c.y;
        const double sx = ct * ux + st * uy + c.x + tx;
        const double sy = -st * ux + ct * uy + c.y + ty;
        if (need_pose) {
          const auto s = detail::bilinear_at(im2, sx, sy, fill);
          g_tx += gv * s.dx;
          g_ty += gv * s.dy;
          // d(sx)/d(theta) = -sin*ux + cos*uy ; d(sy)/d(theta) = -cos*ux - sin*uy
          g_th += gv * (s.dx * (S)(-st * ux + ct * uy) + s.dy * (S)(-ct * ux - st * uy));
        }
        if (need_img) {
          const int x0 = (int)std::floor(sx), y0 = (int)std::floor(sy);
          const S wx = (S)(sx - x0), wy = (S)(sy - y0);
          auto& gi = tp.grad_buf(img);
          auto add = [&](int yy, int xx, S w) {
            if (yy >= 0 && yy < H && xx >= 0 && xx < W) gi[(size_t)(yy * W + xx)] += gv * w;
          };
          add(y0, x0, (S(1) - wx) * (S(1) - wy));
          add(y0, x0 + 1, wx * (S(1) - wy));
          add(y0 + 1, x0, (S(1) - wx) * wy);
          add(y0 + 1, x0 + 1, wx * wy);
        }
      }
    if (need_pose) {
      auto& gp = tp.grad_buf(pose);
      gp[0] += g_tx;
      gp[1] += g_ty;
      gp[2] += g_th;
    }
  };
  t.set_back(id, std::move(back));
  return id;
}

/// Centered crop; ties in the centering offset break toward the top-left.
template <class S>
ad::Tensor<S> center_crop(const ad::Tensor<S>& img, int th, int tw) {
  if (img.shape.size() != 2) throw std::invalid_argument("center_crop expects [H,W]");
  const int H = img.shape[0], W = img.shape[1];
  if (th > H || tw > W)
    throw std::invalid_argument("center_crop target " + std::to_string(th) + "x" + std::to_string(tw) +
                                " exceeds source " + std::to_string(H) + "x" + std::to_string(W));
  const int oy = (H - th) / 2, ox = (W - tw) / 2;
  auto out = ad::Tensor<S>::zeros({th, tw});
  for (int y = 0; y < th; ++y)
    for (int x = 0; x < tw; ++x) out.at2(y, x) = img.at2(y + oy, x + ox);
  return out;
}

/// Pads an image back to a larger extent with the crop window centered,
/// filling the border; inverse of center_crop's window arithmetic.
template <class S>
ad::Tensor<S> center_pad(const ad::Tensor<S>& img, int th, int tw, S fill = S(0)) {
  const int H = img.shape[0], W = img.shape[1];
  if (th < H || tw < W) throw std::invalid_argument("center_pad target must not be smaller");
  auto out = ad::Tensor<S>::full({th, tw}, fill);
  const int oy = (th - H) / 2, ox = (tw - W) / 2;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) out.at2(y + oy, x + ox) = img.at2(y, x);
  return out;
}

struct CurveLabels {
  std::vector<double> coords;   // x per row; meaningful where limits != 0
  std::vector<uint8_t> limits;  // 1 where the midline exists
};

/// Maps per-row midline labels through the pose's sampling map (the
/// inverse of the content motion) and re-rasterizes to one x per integer
/// row. Rows whose mapped points leave the image are cleared. This keeps
/// labels aligned with what warp_rigid does to the image: labels living
/// in the warp's destination space are carried into its source space.
inline CurveLabels transform_coords(const CurveLabels& in, const RigidPose& pose, int H, int W) {
  CurveLabels out;
  out.coords.assign((size_t)H, 0.0);
  out.limits.assign((size_t)H, 0);

  // mapped points of consecutive present rows; gaps are not bridged
  std::vector<std::vector<Point>> runs;
  for (int y = 0; y < H; ++y) {
    if (y < (int)in.limits.size() && in.limits[(size_t)y]) {
      if (runs.empty() || (y > 0 && !in.limits[(size_t)y - 1])) runs.emplace_back();
      runs.back().push_back(sample_map(pose, {in.coords[(size_t)y], (double)y}, H, W));
    }
  }
  for (const auto& run : runs) {
    if (run.size() == 1) {
      const Point q = run[0];
      const int r = (int)std::lround(q.y);
      if (std::abs(q.y - r) <= 0.5 && r >= 0 && r < H && q.x >= 0 && q.x <= W - 1) {
        out.coords[(size_t)r] = q.x;
        out.limits[(size_t)r] = 1;
      }
      continue;
    }
    for (size_t i = 0; i + 1 < run.size(); ++i) {
      const Point a = run[i], b = run[i + 1];
      const double ylo = std::min(a.y, b.y), yhi = std::max(a.y, b.y);
      for (int r = (int)std::ceil(ylo); r <= (int)std::floor(yhi); ++r) {
        if (r < 0 || r >= H) continue;
        const double span = b.y - a.y;
        const double f = std::abs(span) < 1e-12 ? 0.0 : (r - a.y) / span;
        const double x = a.x + f * (b.x - a.x);
        if (x < 0 || x > W - 1) continue;
        out.coords[(size_t)r] = x;
        out.limits[(size_t)r] = 1;
      }
    }
  }
  return out;
}

}  // namespace midline::geom
