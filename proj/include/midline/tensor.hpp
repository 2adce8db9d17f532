#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace midline::ad {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major tensor. Scalar type S is float for training and
/// double for tests/gradient checks; the math is identical in both.
template <class S>
struct Tensor {
  Shape shape;
  std::vector<S> v;

  Tensor() = default;
  Tensor(Shape sh, std::vector<S> vals) : shape(std::move(sh)), v(std::move(vals)) {
    if ((int)v.size() != shape_numel(shape))
      throw std::invalid_argument("tensor value count does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape sh) {
    int n = shape_numel(sh);
    return Tensor(std::move(sh), std::vector<S>(n, S(0)));
  }
  static Tensor full(Shape sh, S val) {
    int n = shape_numel(sh);
    return Tensor(std::move(sh), std::vector<S>(n, val));
  }
  static Tensor scalar(S val) { return Tensor({1}, {val}); }

  int numel() const { return (int)v.size(); }
  int extent(int d) const { return shape[(size_t)d]; }

  S& operator[](int i) { return v[(size_t)i]; }
  const S& operator[](int i) const { return v[(size_t)i]; }

  // [C,H,W] indexing
  S& at3(int c, int y, int x) { return v[(size_t)((c * shape[1] + y) * shape[2] + x)]; }
  const S& at3(int c, int y, int x) const { return v[(size_t)((c * shape[1] + y) * shape[2] + x)]; }
  // [H,W] indexing
  S& at2(int y, int x) { return v[(size_t)(y * shape[1] + x)]; }
  const S& at2(int y, int x) const { return v[(size_t)(y * shape[1] + x)]; }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite((double)x)) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = (T)v[i];
    return out;
  }

  Tensor reshaped(Shape sh) const {
    if (shape_numel(sh) != numel()) throw std::invalid_argument("reshape element count mismatch");
    Tensor out = *this;
    out.shape = std::move(sh);
    return out;
  }
};

/// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64
/// so that sampled streams depend only on the seed, not on the standard
/// library's unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(split_mix(seed)) {}
  Rng(uint64_t seed, uint64_t stream) : state_(split_mix(seed ^ split_mix(stream + 0x9e3779b97f4a7c15ull))) {}

  uint64_t next_u64() {
    // xorshift* — small, fast, reproducible everywhere
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }  // [0,1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; one value per call keeps the stream position simple
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  int uniform_int(int n) { return (int)(next_u64() % (uint64_t)n); }  // [0,n)

 private:
  static uint64_t split_mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return (z ^ (z >> 31)) | 1ull;  // never zero
  }
  uint64_t state_;
};

template <class S>
Tensor<S> random_tensor(Shape sh, Rng& rng, double scale = 1.0) {
  Tensor<S> t = Tensor<S>::zeros(std::move(sh));
  for (auto& x : t.v) x = (S)(rng.normal() * scale);
  return t;
}

}  // namespace midline::ad
