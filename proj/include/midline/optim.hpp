#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <thread>
#include <vector>

#include "midline/errors.hpp"
#include "midline/model.hpp"

namespace midline::pipe {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// lr0 * (1 - iter/max_iter)^power; monotonically non-increasing.
inline double poly_lr(int64_t iter, int64_t max_iter, double lr0, double power) {
  if (iter < 0 || iter > max_iter || max_iter <= 0)
    throw ConfigError("poly_lr requires 0 <= iter <= max_iter");
  return lr0 * std::pow(1.0 - (double)iter / (double)max_iter, power);
}

template <class S>
struct AdamState {
  std::vector<std::vector<S>> m, v;
  int64_t step = 0;

  void init(const model::WeightStore<S>& store) {
    m.clear();
    v.clear();
    for (const auto& [name, t] : store.tensors) {
      m.emplace_back(t.v.size(), S(0));
      v.emplace_back(t.v.size(), S(0));
    }
    step = 0;
  }
};

/// Standard Adam with bias correction. Gradients are per store tensor,
/// aligned with store order. Throws NumericFailure naming the tensor on
/// a non-finite gradient.
template <class S>
void adam_step(model::WeightStore<S>& store, const std::vector<std::vector<S>>& grads,
               AdamState<S>& state, const AdamConfig& cfg, double lr) {
  if (grads.size() != store.tensors.size() || state.m.size() != store.tensors.size())
    throw ConfigError("adam_step: state/gradient layout does not match the store");
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, (double)state.step);
  const double bc2 = 1.0 - std::pow(b2, (double)state.step);
  for (size_t i = 0; i < store.tensors.size(); ++i) {
    auto& p = store.tensors[i].second.v;
    const auto& g = grads[i];
    if (g.size() != p.size()) throw ConfigError("adam_step: gradient size mismatch");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = (double)g[j];
      if (!std::isfinite(gj))
        throw NumericFailure("non-finite gradient in tensor " + store.tensors[i].first);
      const double mj = b1 * (double)m[j] + (1 - b1) * gj;
      const double vj = b2 * (double)v[j] + (1 - b2) * gj * gj;
      m[j] = (S)mj;
      v[j] = (S)vj;
      p[j] = (S)((double)p[j] - lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps));
    }
  }
}

/// Per-store-tensor gradient accumulator for batch reduction. Gradients
/// are added in call order; callers iterate samples in index order so
/// the reduction is deterministic regardless of how the forward passes
/// were parallelized.
template <class S>
struct GradAccumulator {
  std::vector<std::vector<S>> grads;

  explicit GradAccumulator(const model::WeightStore<S>& store) {
    for (const auto& [name, t] : store.tensors) grads.emplace_back(t.v.size(), S(0));
  }
  void zero() {
    for (auto& g : grads) std::fill(g.begin(), g.end(), S(0));
  }
  void add(ad::Tape<S>& tape, const std::vector<typename model::ParamBinder<S>::Binding>& bound) {
    for (const auto& b : bound) {
      const auto& g = tape.grad_buf(b.node);
      auto& acc = grads[(size_t)b.store_index];
      for (size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
    }
  }
  void scale(S k) {
    for (auto& g : grads)
      for (auto& x : g) x *= k;
  }
};

/// Runs fn(i) for each element of `indices`, spreading positions across
/// up to `threads` workers. Results must be written to per-position
/// slots by the caller; the call returns when all positions finished.
inline void parallel_for_indices(int count, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve((size_t)threads);
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < count; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace midline::pipe
