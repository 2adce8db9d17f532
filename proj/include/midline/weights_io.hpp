#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "midline/errors.hpp"
#include "midline/tensor.hpp"

namespace midline::model {

static_assert(std::endian::native == std::endian::little,
              "weight blobs are little-endian; big-endian hosts are unsupported");

/// Named parameter tensors in creation order. Creation order is
/// deterministic, so saved blobs are bit-identical across runs.
template <class S>
struct WeightStore {
  std::vector<std::pair<std::string, ad::Tensor<S>>> tensors;
  std::unordered_map<std::string, int> index;

  bool has(const std::string& name) const { return index.count(name) > 0; }

  ad::Tensor<S>& get(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown weight tensor: " + name);
    return tensors[(size_t)it->second].second;
  }
  const ad::Tensor<S>& get(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown weight tensor: " + name);
    return tensors[(size_t)it->second].second;
  }

  int add(const std::string& name, ad::Tensor<S> t) {
    if (has(name)) throw ConfigError("duplicate weight tensor: " + name);
    tensors.emplace_back(name, std::move(t));
    index[name] = (int)tensors.size() - 1;
    return (int)tensors.size() - 1;
  }

  int64_t total_params(const std::string& prefix = "") const {
    int64_t n = 0;
    for (const auto& [name, t] : tensors)
      if (prefix.empty() || name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
  }

  template <class T>
  WeightStore<T> cast() const {
    WeightStore<T> out;
    for (const auto& [name, t] : tensors) out.add(name, t.template cast<T>());
    return out;
  }
};

// Blob layout: "MLWB" | u32 version | u32 count | per tensor:
// u16 name_len, UTF-8 name, u32 rank, u32 extents[rank], f32 data (LE).
inline constexpr char kWeightMagic[4] = {'M', 'L', 'W', 'B'};
inline constexpr uint32_t kWeightVersion = 1;

template <class S>
void save_weights(const WeightStore<S>& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write weights: " + path);
  f.write(kWeightMagic, 4);
  auto put32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  put32(kWeightVersion);
  put32((uint32_t)store.tensors.size());
  for (const auto& [name, t] : store.tensors) {
    const uint16_t len = (uint16_t)name.size();
    f.write(reinterpret_cast<const char*>(&len), 2);
    f.write(name.data(), len);
    put32((uint32_t)t.shape.size());
    for (int e : t.shape) put32((uint32_t)e);
    for (S v : t.v) {
      const float fv = (float)v;
      f.write(reinterpret_cast<const char*>(&fv), 4);
    }
  }
  if (!f) throw std::runtime_error("short write: " + path);
}

template <class S>
WeightStore<S> load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open weights: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kWeightMagic, 4) != 0)
    throw std::runtime_error("not a weight blob: " + path);
  auto get32 = [&]() {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  const uint32_t version = get32();
  if (version != kWeightVersion)
    throw std::runtime_error("unsupported weight blob version " + std::to_string(version));
  const uint32_t count = get32();
  WeightStore<S> store;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 2);
    std::string name((size_t)len, '\0');
    f.read(name.data(), len);
    const uint32_t rank = get32();
    ad::Shape shape;
    for (uint32_t d = 0; d < rank; ++d) shape.push_back((int)get32());
    auto t = ad::Tensor<S>::zeros(shape);
    for (auto& v : t.v) {
      float fv = 0;
      f.read(reinterpret_cast<char*>(&fv), 4);
      v = (S)fv;
    }
    if (!f) throw std::runtime_error("truncated weight blob at tensor " + name + ": " + path);
    store.add(name, std::move(t));
  }
  return store;
}

}  // namespace midline::model
