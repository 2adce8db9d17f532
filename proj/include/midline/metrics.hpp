#pragma once

#include <optional>
#include <string>
#include <vector>

#include "midline/losses.hpp"

namespace midline::metrics {

/// A delineated midline: at most one x per row, rows ascending.
struct MidlineCurve {
  std::vector<int> rows;
  std::vector<double> xs;

  static MidlineCurve from_labels(const std::vector<double>& coords, const std::vector<uint8_t>& limits) {
    MidlineCurve c;
    for (size_t y = 0; y < limits.size(); ++y)
      if (limits[y]) {
        c.rows.push_back((int)y);
        c.xs.push_back(coords[y]);
      }
    return c;
  }
  size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
};

/// A metric value or an undefined-metric outcome (empty prediction,
/// degenerate curve). Undefined outcomes are reported and excluded from
/// means, never silently imputed.
struct MetricOutcome {
  double value = 0.0;
  bool valid = false;
  static MetricOutcome undefined() { return {}; }
  static MetricOutcome of(double v) { return {v, true}; }
};

struct MetricReport {
  MetricOutcome lde, msde, hd, asd;
  double connectivity_indicator = 0.0;
  bool connectivity_valid = false;
};

/// Mean absolute horizontal error over rows present in both curves.
MetricOutcome lde(const MidlineCurve& pred, const MidlineCurve& gt);

/// |MSD(pred) - MSD(gt)| where MSD is a curve's maximum deviation from
/// the straight line joining its own endpoints.
MetricOutcome msde(const MidlineCurve& pred, const MidlineCurve& gt);

/// Hausdorff distance between the two point sets (Euclidean, px).
MetricOutcome hd(const MidlineCurve& pred, const MidlineCurve& gt);

/// Average symmetric surface distance between the two point sets.
MetricOutcome asd(const MidlineCurve& pred, const MidlineCurve& gt);

/// The inference-time CRL value on the predicted real coordinates;
/// zero means the prediction satisfies delta-connectivity.
inline double connectivity_indicator(const std::vector<double>& pred_coords, double delta) {
  return loss::crl(pred_coords, delta);
}

MetricReport evaluate_pair(const MidlineCurve& pred, const MidlineCurve& gt, double delta);

/// Accumulates per-sample rows and writes the CSV interface: one row per
/// sample plus an aggregate mean(std) summary, with validity flags and
/// undefined counts.
class MetricsAccumulator {
 public:
  void add(const std::string& sample_id, const MetricReport& r);
  std::string csv() const;
  void write_csv(const std::string& path) const;

  int count() const { return (int)rows_.size(); }
  double mean_connectivity() const;
  double mean_of(const char* which) const;  // "lde" | "msde" | "hd" | "asd"
  int undefined_count(const char* which) const;

 private:
  struct Row {
    std::string id;
    MetricReport r;
  };
  std::vector<Row> rows_;
};

}  // namespace midline::metrics
