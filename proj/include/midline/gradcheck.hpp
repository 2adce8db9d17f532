#pragma once

#include <functional>

#include "midline/tape.hpp"

namespace midline::ad {

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool finite = true;
  int bad_input = -1;   // input index of the first non-finite coordinate
  int bad_coord = -1;   // flat coordinate within that input
};

/// Compares the analytic gradient of a graph against central finite
/// differences, coordinate by coordinate, and returns the worst relative
/// error. `build` reconstructs the graph from fresh leaves so the
/// numeric side re-runs the whole forward pass. Non-scalar outputs are
/// reduced by a fixed random projection so every output coordinate
/// contributes. 64-bit only; keep inputs >= 10*step away from kinks.
inline GradCheckResult gradcheck(
    const std::function<int(Tape<double>&, const std::vector<int>&)>& build,
    std::vector<Tensor<double>> inputs, double step = 1e-5, uint64_t projection_seed = 7) {
  auto run = [&](const std::vector<Tensor<double>>& ins, Tape<double>** tape_out,
                 std::vector<int>* leaves_out) -> int {
    auto* tape = new Tape<double>();
    std::vector<int> leaves;
    for (const auto& t : ins) leaves.push_back(tape->leaf(t));
    int out = build(*tape, leaves);
    if (tape->value(out).numel() != 1) {
      Rng rng(projection_seed);
      Tensor<double> w = Tensor<double>::zeros(tape->value(out).shape);
      for (auto& x : w.v) x = rng.uniform(-1.0, 1.0);
      out = tape->sum(tape->elementwise_mul(out, tape->constant(std::move(w))));
    }
    if (tape_out) *tape_out = tape;
    if (leaves_out) *leaves_out = leaves;
    return out;
  };

  Tape<double>* tape = nullptr;
  std::vector<int> leaves;
  int root = run(inputs, &tape, &leaves);
  tape->backward(root);
  std::vector<Tensor<double>> analytic;
  for (int id : leaves) analytic.push_back(tape->grad_tensor(id));
  delete tape;

  auto eval = [&](const std::vector<Tensor<double>>& ins) -> double {
    Tape<double>* t2 = nullptr;
    int out = run(ins, &t2, nullptr);
    double v = t2->value(out)[0];
    delete t2;
    return v;
  };

  GradCheckResult res;
  for (size_t ii = 0; ii < inputs.size(); ++ii) {
    for (int c = 0; c < inputs[ii].numel(); ++c) {
      std::vector<Tensor<double>> plus = inputs, minus = inputs;
      plus[ii][c] += step;
      minus[ii][c] -= step;
      const double numeric = (eval(plus) - eval(minus)) / (2.0 * step);
      const double a = analytic[ii][c];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        res.finite = false;
        res.bad_input = (int)ii;
        res.bad_coord = c;
        res.max_rel_err = std::numeric_limits<double>::infinity();
        return res;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(a - numeric) / denom);
    }
  }
  return res;
}

}  // namespace midline::ad
