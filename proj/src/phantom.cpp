#include "midline/phantom.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "midline/losses.hpp"
#include "midline/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace midline::phantom {

namespace {
constexpr double kPi = 3.14159265358979323846;

double bump(double u) {
  if (u <= -1.0 || u >= 1.0) return 0.0;
  const double c = std::cos(kPi * u / 2.0);
  return c * c;
}

struct SampleParams {
  double amp, center, width;
  int y_top, y_bot;
  double sa_x, sa_y;
  double shade_l, shade_r;
  double phase_l, phase_r, phase2_l, phase2_r;
  geom::RigidPose perturb;
};

SampleParams draw_params(const PhantomSpec& s, ad::Rng& rng) {
  SampleParams p;
  p.amp = (rng.uniform() < 0.5 ? -1.0 : 1.0) * s.bump_amplitude;
  p.width = s.bump_width * rng.uniform(0.8, 1.2);
  const double jitter = 0.12 * s.height;
  p.y_top = std::clamp(s.limits_top + (int)std::lround(rng.uniform(-3, 3)), 1, s.height - 10);
  p.y_bot = std::clamp(s.limits_bottom + (int)std::lround(rng.uniform(-3, 3)), p.y_top + 8, s.height - 2);
  p.center = std::clamp(s.bump_center + rng.uniform(-jitter, jitter), (double)p.y_top + 1, (double)p.y_bot - 1);
  p.sa_x = s.skull_semi_x * rng.uniform(0.95, 1.05);
  p.sa_y = s.skull_semi_y * rng.uniform(0.95, 1.05);
  p.shade_l = 0.38 + rng.uniform(-0.015, 0.015);
  p.shade_r = 0.44 + rng.uniform(-0.015, 0.015);
  p.phase_l = rng.uniform(0, 2 * kPi);
  p.phase_r = rng.uniform(0, 2 * kPi);
  p.phase2_l = rng.uniform(0, 2 * kPi);
  p.phase2_r = rng.uniform(0, 2 * kPi);
  p.perturb.t_x = rng.uniform(-s.range_t_x, s.range_t_x);
  p.perturb.t_y = rng.uniform(-s.range_t_y, s.range_t_y);
  p.perturb.theta = rng.uniform(-s.range_theta, s.range_theta);
  return p;
}

double midline_x(const PhantomSpec& s, const SampleParams& p, double y) {
  return s.width / 2.0 + p.amp * bump((y - p.center) / p.width);
}

ad::Tensor<double> render_canonical(const PhantomSpec& s, const SampleParams& p, ad::Rng& rng) {
  const int H = s.height, W = s.width;
  const double cx = W / 2.0, cy = H / 2.0;
  auto img = ad::Tensor<double>::zeros({H, W});
  for (int y = 0; y < H; ++y) {
    const double xm = midline_x(s, p, y);
    const bool falx_row = y >= p.y_top && y <= p.y_bot;
    for (int x = 0; x < W; ++x) {
      const double rx = (x - cx) / p.sa_x, ry = (y - cy) / p.sa_y;
      const double r = std::sqrt(rx * rx + ry * ry);
      double v = 0.0;
      if (r <= 1.0) {
        if (r > 0.93) {
          v = 0.85;  // skull rim
        } else if (x < xm) {
          v = p.shade_l + 0.02 * std::sin(2 * kPi * y / 31.0 + p.phase_l) *
                              std::cos(2 * kPi * x / 23.0 + p.phase2_l);
        } else {
          v = p.shade_r + 0.02 * std::sin(2 * kPi * y / 27.0 + p.phase_r) *
                              std::cos(2 * kPi * x / 19.0 + p.phase2_r);
        }
        if (falx_row && r <= 0.93) {
          const double d = std::abs(x - xm);
          if (d < 1.0) v += 0.18 * (1.0 - d);
        }
      }
      img.at2(y, x) = v;
    }
  }
  if (s.noise_sigma > 0) {
    for (auto& v : img.v) v = std::clamp(v + s.noise_sigma * rng.normal(), 0.0, 1.0);
  }
  return img;
}

std::string sample_stem(uint64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06llu", (unsigned long long)id);
  return buf;
}
}  // namespace

void PhantomSpec::validate() const {
  if (height < 32 || width < 32) throw ConfigError("phantom extent too small");
  if (bump_amplitude < 0 || bump_amplitude > width / 4.0)
    throw ConfigError("bump amplitude must satisfy 0 <= a <= W/4");
  if (!(0 <= limits_top && limits_top < limits_bottom && limits_bottom < height))
    throw ConfigError("limits rows must satisfy 0 <= y_top < y_bot < H");
  if (band_halfwidth < 1) throw ConfigError("band half-width must be >= 1");
  if (bump_width < 4) throw ConfigError("bump width too small");
  // slope bound keeps ground truth 1-connected for every width jitter
  if (bump_amplitude * kPi / (2.0 * 0.8 * bump_width) > 1.0)
    throw ConfigError("bump too steep for 1-connected ground truth: need a*pi/(2*0.8*width) <= 1");
  if (noise_sigma < 0 || range_theta < 0 || range_t_x < 0 || range_t_y < 0)
    throw ConfigError("noise and pose ranges must be non-negative");
}

std::vector<Sample> generate(const PhantomSpec& spec, int n) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve((size_t)n);
  for (int i = 0; i < n; ++i) {
    ad::Rng rng(spec.seed, (uint64_t)i);  // parallel-safe per-sample stream
    const SampleParams p = draw_params(spec, rng);

    Sample s;
    s.id = (uint64_t)i;
    s.image_aligned = render_canonical(spec, p, rng);
    s.image_src = geom::warp_rigid(s.image_aligned, p.perturb, 0.0);
    s.true_pose = geom::inverse(p.perturb);

    const int H = spec.height, W = spec.width;
    s.coords.assign((size_t)H, 0.0);
    s.limits.assign((size_t)H, 0);
    s.band = ad::Tensor<double>::zeros({H, W});
    for (int y = p.y_top; y <= p.y_bot; ++y) {
      const double xm = midline_x(spec, p, y);
      s.coords[(size_t)y] = xm;
      s.limits[(size_t)y] = 1;
      const int c = (int)std::lround(xm);
      const int w = (int)spec.band_halfwidth;
      for (int x = std::max(0, c - w); x <= std::min(W - 1, c + w); ++x) s.band.at2(y, x) = 1.0;
    }

    // ground truth is 1-connected by construction; keep it that way
    std::vector<double> present;
    for (int y = 0; y < H; ++y)
      if (s.limits[(size_t)y]) present.push_back(s.coords[(size_t)y]);
    if (!loss::check_delta_connectivity(present, 1.0))
      throw NumericFailure("phantom ground truth violated 1-connectivity");

    out.push_back(std::move(s));
  }
  return out;
}

ad::Tensor<double> render_midline_only(const Sample& s) {
  const int H = s.image_aligned.shape[0], W = s.image_aligned.shape[1];
  auto img = ad::Tensor<double>::zeros({H, W});
  for (int y = 0; y < H; ++y) {
    if (!s.limits[(size_t)y]) continue;
    const double xm = s.coords[(size_t)y];
    for (int x = 0; x < W; ++x) {
      const double d = std::abs(x - xm);
      if (d < 1.0) img.at2(y, x) = 1.0 - d;
    }
  }
  return img;
}

std::string save_manifest(const std::vector<Sample>& samples, const std::string& dir) {
  fs::create_directories(dir);
  const std::string manifest = (fs::path(dir) / "manifest.jsonl").string();
  std::ofstream mf(manifest);
  if (!mf) throw std::runtime_error("cannot write manifest: " + manifest);
  for (const Sample& s : samples) {
    const std::string stem = sample_stem(s.id);
    io::write_png16((fs::path(dir) / (stem + "_src.png")).string(), s.image_src);
    io::write_png16((fs::path(dir) / (stem + "_aligned.png")).string(), s.image_aligned);
    io::write_png16((fs::path(dir) / (stem + "_band.png")).string(), s.band);

    std::ofstream lf(fs::path(dir) / (stem + "_labels.csv"));
    lf << "row,limit,x\n";
    lf.precision(17);
    for (size_t y = 0; y < s.limits.size(); ++y)
      lf << y << "," << (int)s.limits[y] << "," << s.coords[y] << "\n";

    json j;
    j["id"] = s.id;
    j["image_src"] = stem + "_src.png";
    j["image_aligned"] = stem + "_aligned.png";
    j["band"] = stem + "_band.png";
    j["labels"] = stem + "_labels.csv";
    j["pose"] = {{"t_x", s.true_pose.t_x}, {"t_y", s.true_pose.t_y}, {"theta", s.true_pose.theta}};
    mf << j.dump() << "\n";
  }
  return manifest;
}

std::vector<Sample> load_manifest(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open manifest: " + manifest_path);
  const fs::path dir = fs::path(manifest_path).parent_path();
  std::vector<Sample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(mf, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      Sample s;
      s.id = j.at("id").get<uint64_t>();
      const auto need = [&](const char* key) {
        const fs::path p = dir / j.at(key).get<std::string>();
        if (!fs::exists(p)) throw std::runtime_error("missing file: " + p.string());
        return p.string();
      };
      s.image_src = io::read_png16(need("image_src"));
      s.image_aligned = io::read_png16(need("image_aligned"));
      s.band = io::read_png16(need("band"));
      for (auto& v : s.band.v) v = v >= 0.5 ? 1.0 : 0.0;
      s.true_pose.t_x = j.at("pose").at("t_x").get<double>();
      s.true_pose.t_y = j.at("pose").at("t_y").get<double>();
      s.true_pose.theta = j.at("pose").at("theta").get<double>();

      std::ifstream lf(need("labels"));
      std::string lrow;
      std::getline(lf, lrow);  // header
      const int H = s.image_aligned.shape[0];
      s.coords.assign((size_t)H, 0.0);
      s.limits.assign((size_t)H, 0);
      int rows_read = 0;
      while (std::getline(lf, lrow)) {
        if (lrow.empty()) continue;
        int row = 0, limit = 0;
        double x = 0;
        if (std::sscanf(lrow.c_str(), "%d,%d,%lf", &row, &limit, &x) != 3 || row < 0 || row >= H)
          throw std::runtime_error("bad label row '" + lrow + "'");
        s.limits[(size_t)row] = (uint8_t)limit;
        s.coords[(size_t)row] = x;
        ++rows_read;
      }
      if (rows_read != H) throw std::runtime_error("label file truncated");
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace midline::phantom
