#pragma once

#include <vector>

#include "midline/errors.hpp"
#include "midline/tape.hpp"

namespace midline::loss {

/// Adjacent differences with a leading zero: (Phi X)_0 = 0,
/// (Phi X)_i = x_i - x_{i-1}. Banded evaluation; the dense matrix form
/// exists only as a test oracle.
template <class S>
std::vector<S> apply_phi(const std::vector<S>& x) {
  if (x.empty()) throw std::invalid_argument("apply_phi: empty vector");
  std::vector<S> d(x.size());
  d[0] = S(0);
  for (size_t i = 1; i < x.size(); ++i) d[i] = x[i] - x[i - 1];
  return d;
}

/// Connectivity regular loss: sum_i max(0, |dx_i| - delta). Zero exactly
/// when X satisfies delta-connectivity.
template <class S>
S crl(const std::vector<S>& x, S delta) {
  if (delta <= S(0)) throw std::invalid_argument("crl: delta must be > 0");
  S acc = 0;
  for (size_t i = 1; i < x.size(); ++i) {
    const S d = std::abs(x[i] - x[i - 1]) - delta;
    if (d > S(0)) acc += d;
  }
  return acc;
}

template <class S>
bool check_delta_connectivity(const std::vector<S>& x, S delta) {
  for (size_t i = 1; i < x.size(); ++i)
    if (std::abs(x[i] - x[i - 1]) > delta) return false;
  return true;
}

struct LossWeights {
  double lambda = 1.0;       // limits term
  double gamma = 1.0;        // segmentation term
  double xi = 1.0;           // regression term
  double mu = 0.5;           // connectivity term
  double delta = 1.0;        // connectivity margin, px
  double seg_pos_weight = 10.0;  // positive-class weight of the band CE

  void validate() const {
    if (lambda < 0 || gamma < 0 || xi < 0 || mu < 0 || delta <= 0 || seg_pos_weight <= 0)
      throw ConfigError("loss weights must be non-negative with delta > 0");
  }
};

template <class S>
struct LossTargets {
  ad::Tensor<S> limits;          // [H], binary
  ad::Tensor<S> band;            // [H*W] or [1,H,W]-compatible, binary
  ad::Tensor<S> coords;          // [H], defined where present
  std::vector<uint8_t> present;  // Y_L as a row mask
};

template <class S>
struct LossTerms {
  int limits = -1, seg = -1, reg = -1, cr = -1, total = -1;
};

/// The four-term objective: lambda*L_limits + gamma*L_seg + xi*L_reg +
/// mu*L_CR. The regression and connectivity terms are evaluated only on
/// rows where the ground truth midline exists. Throws NumericFailure
/// naming the offending term if any value is non-finite.
template <class S>
LossTerms<S> total_loss(ad::Tape<S>& t, int limits_node, int band_node, int coords_node,
                        const LossTargets<S>& tgt, const LossWeights& w) {
  w.validate();
  LossTerms<S> out;
  out.limits = t.binary_cross_entropy(limits_node, tgt.limits);
  out.seg = t.weighted_cross_entropy(band_node, tgt.band, (S)w.seg_pos_weight);

  bool any_present = false;
  for (uint8_t m : tgt.present) any_present = any_present || (m != 0);
  if (any_present) {
    int pred_rows = t.restrict_rows(coords_node, tgt.present);
    ad::Tensor<S> want = ad::Tensor<S>::zeros({t.value(pred_rows).numel()});
    int k = 0;
    for (size_t y = 0; y < tgt.present.size(); ++y)
      if (tgt.present[y]) want[k++] = tgt.coords[(int)y];
    out.reg = t.l1_loss(pred_rows, want);
    out.cr = t.crl(pred_rows, (S)w.delta);
  } else {
    out.reg = t.constant(ad::Tensor<S>::scalar(0));
    out.cr = t.constant(ad::Tensor<S>::scalar(0));
  }

  const char* names[4] = {"L_limits", "L_seg", "L_reg", "L_CR"};
  const int ids[4] = {out.limits, out.seg, out.reg, out.cr};
  for (int i = 0; i < 4; ++i)
    if (!std::isfinite((double)t.value(ids[i])[0]))
      throw NumericFailure(std::string("non-finite loss term ") + names[i]);

  out.total = t.weighted_sum({{out.limits, (S)w.lambda},
                              {out.seg, (S)w.gamma},
                              {out.reg, (S)w.xi},
                              {out.cr, (S)w.mu}});
  return out;
}

}  // namespace midline::loss
