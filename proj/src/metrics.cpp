#include "midline/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace midline::metrics {

namespace {

double sq(double v) { return v * v; }

// Minimum squared distance from point (x,y) to the points of `c`,
// exploiting the row ordering: a candidate further than the current best
// in row distance alone cannot win.
double min_sqdist_to(const MidlineCurve& c, double x, double y) {
  const auto it = std::lower_bound(c.rows.begin(), c.rows.end(), (int)std::floor(y));
  const int start = (int)(it - c.rows.begin());
  double best = std::numeric_limits<double>::infinity();
  for (int i = start; i < (int)c.size(); ++i) {
    const double dy = c.rows[(size_t)i] - y;
    if (sq(dy) >= best) break;
    best = std::min(best, sq(c.xs[(size_t)i] - x) + sq(dy));
  }
  for (int i = start - 1; i >= 0; --i) {
    const double dy = c.rows[(size_t)i] - y;
    if (sq(dy) >= best) break;
    best = std::min(best, sq(c.xs[(size_t)i] - x) + sq(dy));
  }
  return best;
}

// Maximum deviation of the curve from the straight line through its own
// endpoints (perpendicular point-to-line distance).
double max_shift_distance(const MidlineCurve& c) {
  const double ax = c.xs.front(), ay = c.rows.front();
  const double bx = c.xs.back(), by = c.rows.back();
  const double len = std::hypot(bx - ax, by - ay);
  double worst = 0.0;
  if (len == 0.0) {
    for (size_t i = 0; i < c.size(); ++i)
      worst = std::max(worst, std::hypot(c.xs[i] - ax, c.rows[i] - ay));
    return worst;
  }
  for (size_t i = 0; i < c.size(); ++i) {
    const double cross = (bx - ax) * (ay - c.rows[i]) - (ax - c.xs[i]) * (by - ay);
    worst = std::max(worst, std::abs(cross) / len);
  }
  return worst;
}

}  // namespace

MetricOutcome lde(const MidlineCurve& pred, const MidlineCurve& gt) {
  double acc = 0.0;
  int n = 0;
  size_t i = 0, j = 0;
  while (i < pred.size() && j < gt.size()) {
    if (pred.rows[i] < gt.rows[j]) {
      ++i;
    } else if (pred.rows[i] > gt.rows[j]) {
      ++j;
    } else {
      acc += std::abs(pred.xs[i] - gt.xs[j]);
      ++n;
      ++i;
      ++j;
    }
  }
  if (n == 0) return MetricOutcome::undefined();
  return MetricOutcome::of(acc / n);
}

MetricOutcome msde(const MidlineCurve& pred, const MidlineCurve& gt) {
  if (pred.size() < 2 || gt.size() < 2) return MetricOutcome::undefined();
  return MetricOutcome::of(std::abs(max_shift_distance(pred) - max_shift_distance(gt)));
}

MetricOutcome hd(const MidlineCurve& pred, const MidlineCurve& gt) {
  if (pred.empty() || gt.empty()) return MetricOutcome::undefined();
  double worst = 0.0;
  for (size_t i = 0; i < pred.size(); ++i)
    worst = std::max(worst, min_sqdist_to(gt, pred.xs[i], pred.rows[i]));
  for (size_t j = 0; j < gt.size(); ++j)
    worst = std::max(worst, min_sqdist_to(pred, gt.xs[j], gt.rows[j]));
  return MetricOutcome::of(std::sqrt(worst));
}

MetricOutcome asd(const MidlineCurve& pred, const MidlineCurve& gt) {
  if (pred.empty() || gt.empty()) return MetricOutcome::undefined();
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i)
    acc += std::sqrt(min_sqdist_to(gt, pred.xs[i], pred.rows[i]));
  for (size_t j = 0; j < gt.size(); ++j)
    acc += std::sqrt(min_sqdist_to(pred, gt.xs[j], gt.rows[j]));
  return MetricOutcome::of(acc / (double)(pred.size() + gt.size()));
}

MetricReport evaluate_pair(const MidlineCurve& pred, const MidlineCurve& gt, double delta) {
  MetricReport r;
  r.lde = lde(pred, gt);
  r.msde = msde(pred, gt);
  r.hd = hd(pred, gt);
  r.asd = asd(pred, gt);
  if (!pred.empty()) {
    r.connectivity_indicator = connectivity_indicator(pred.xs, delta);
    r.connectivity_valid = true;
  }
  return r;
}

void MetricsAccumulator::add(const std::string& sample_id, const MetricReport& r) {
  rows_.push_back({sample_id, r});
}

namespace {
void put(std::ostringstream& os, const MetricOutcome& m) {
  if (m.valid)
    os << m.value << ",1";
  else
    os << ",0";
}
struct Stats {
  double mean = 0, std = 0;
  int n = 0;
};
Stats stats(const std::vector<double>& v) {
  Stats s;
  s.n = (int)v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= s.n;
  for (double x : v) s.std += sq(x - s.mean);
  s.std = std::sqrt(s.std / s.n);
  return s;
}
}  // namespace

std::string MetricsAccumulator::csv() const {
  std::ostringstream os;
  os.precision(6);
  os << "sample,lde,lde_valid,msde,msde_valid,hd,hd_valid,asd,asd_valid,"
        "connectivity,connectivity_valid\n";
  std::vector<double> a_lde, a_msde, a_hd, a_asd, a_conn;
  for (const auto& row : rows_) {
    os << row.id << ",";
    put(os, row.r.lde);
    os << ",";
    put(os, row.r.msde);
    os << ",";
    put(os, row.r.hd);
    os << ",";
    put(os, row.r.asd);
    os << ",";
    if (row.r.connectivity_valid)
      os << row.r.connectivity_indicator << ",1\n";
    else
      os << ",0\n";
    if (row.r.lde.valid) a_lde.push_back(row.r.lde.value);
    if (row.r.msde.valid) a_msde.push_back(row.r.msde.value);
    if (row.r.hd.valid) a_hd.push_back(row.r.hd.value);
    if (row.r.asd.valid) a_asd.push_back(row.r.asd.value);
    if (row.r.connectivity_valid) a_conn.push_back(row.r.connectivity_indicator);
  }
  auto agg = [&](const char* name, const std::vector<double>& v) {
    const Stats s = stats(v);
    os << "aggregate_" << name << "," << s.mean << "(" << s.std << "),defined=" << s.n
       << ",undefined=" << (int)rows_.size() - s.n << "\n";
  };
  agg("lde", a_lde);
  agg("msde", a_msde);
  agg("hd", a_hd);
  agg("asd", a_asd);
  agg("connectivity", a_conn);
  return os.str();
}

void MetricsAccumulator::write_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write metrics CSV: " + path);
  f << csv();
}

double MetricsAccumulator::mean_connectivity() const {
  std::vector<double> v;
  for (const auto& r : rows_)
    if (r.r.connectivity_valid) v.push_back(r.r.connectivity_indicator);
  return stats(v).mean;
}

double MetricsAccumulator::mean_of(const char* which) const {
  std::vector<double> v;
  const std::string w = which;
  for (const auto& r : rows_) {
    const MetricOutcome& m = w == "lde" ? r.r.lde : w == "msde" ? r.r.msde : w == "hd" ? r.r.hd : r.r.asd;
    if (m.valid) v.push_back(m.value);
  }
  return stats(v).mean;
}

int MetricsAccumulator::undefined_count(const char* which) const {
  int n = 0;
  const std::string w = which;
  for (const auto& r : rows_) {
    const MetricOutcome& m = w == "lde" ? r.r.lde : w == "msde" ? r.r.msde : w == "hd" ? r.r.hd : r.r.asd;
    if (!m.valid) ++n;
  }
  return n;
}

}  // namespace midline::metrics
