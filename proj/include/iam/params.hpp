#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "iam/error.hpp"
#include "iam/rng.hpp"

namespace iam {

enum class ParamKind : uint8_t { weight, bias, norm_gain, norm_bias };

using ParamId = uint32_t;

template <typename S>
struct ParamTensor {
  std::string name;
  ParamKind kind = ParamKind::weight;
  std::vector<uint32_t> dims;  // rank 1 or 2; rank 2 is (rows=in, cols=out)
  std::vector<S> w;
  std::vector<S> g;

  size_t size() const { return w.size(); }
  uint32_t rows() const { return dims[0]; }
  uint32_t cols() const { return dims.size() > 1 ? dims[1] : 1; }
  // biases and normalization gains/biases are excluded from weight decay
  bool decay_exempt() const { return kind != ParamKind::weight; }
};

// Ordered map name -> (tensor, gradient accumulator). Iteration order is
// insertion order, which fixes reduction and serialization order.
template <typename S>
class ParamStore {
 public:
  ParamId add_matrix(std::string name, ParamKind kind, uint32_t rows, uint32_t cols) {
    return add(std::move(name), kind, {rows, cols});
  }

  ParamId add_vector(std::string name, ParamKind kind, uint32_t len) {
    return add(std::move(name), kind, {len});
  }

  ParamId add(std::string name, ParamKind kind, std::vector<uint32_t> dims) {
    check(!index_.contains(name), "ParamStore: duplicate name " + name);
    check(!dims.empty() && dims.size() <= 2, "ParamStore: rank must be 1 or 2");
    size_t n = 1;
    for (uint32_t d : dims) {
      check(d > 0, "ParamStore: zero dimension in " + name);
      n *= d;
    }
    ParamTensor<S> t;
    t.name = name;
    t.kind = kind;
    t.dims = std::move(dims);
    t.w.assign(n, S(0));
    t.g.assign(n, S(0));
    const ParamId id = static_cast<ParamId>(list_.size());
    index_.emplace(std::move(name), id);
    list_.push_back(std::move(t));
    return id;
  }

  ParamTensor<S>& at(ParamId id) { return list_[id]; }
  const ParamTensor<S>& at(ParamId id) const { return list_[id]; }

  ParamId id(std::string_view name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "ParamStore: unknown name " + std::string(name));
    return it->second;
  }
  bool has(std::string_view name) const { return index_.contains(name); }

  size_t count() const { return list_.size(); }
  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& t : list_) n += t.size();
    return n;
  }

  auto begin() { return list_.begin(); }
  auto end() { return list_.end(); }
  auto begin() const { return list_.begin(); }
  auto end() const { return list_.end(); }

  void zero_grads() {
    for (auto& t : list_) std::fill(t.g.begin(), t.g.end(), S(0));
  }

  // Weights: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = input dim.
  // Biases and norm biases zero, norm gains one. Draw order follows
  // insertion order, so a fixed seed fixes every value.
  void init(Rng& rng) {
    for (auto& t : list_) {
      switch (t.kind) {
        case ParamKind::weight: {
          const double scale = 1.0 / std::sqrt(static_cast<double>(t.rows()));
          for (auto& x : t.w) x = static_cast<S>(rng.uniform(-scale, scale));
          break;
        }
        case ParamKind::norm_gain:
          std::fill(t.w.begin(), t.w.end(), S(1));
          break;
        case ParamKind::bias:
        case ParamKind::norm_bias:
          std::fill(t.w.begin(), t.w.end(), S(0));
          break;
      }
    }
  }

 private:
  std::vector<ParamTensor<S>> list_;
  std::map<std::string, ParamId, std::less<>> index_;
};

// Per-worker gradient scratch aligned with a ParamStore. Training threads
// accumulate here and merge in fixed index order for determinism.
template <typename S>
struct GradBuffer {
  std::vector<std::vector<S>> g;

  explicit GradBuffer(const ParamStore<S>& store) {
    g.reserve(store.count());
    for (const auto& t : store) g.emplace_back(t.size(), S(0));
  }

  void zero() {
    for (auto& v : g) std::fill(v.begin(), v.end(), S(0));
  }

  void add_scaled(const GradBuffer<S>& other, S k) {
    for (size_t i = 0; i < g.size(); ++i)
      for (size_t j = 0; j < g[i].size(); ++j) g[i][j] += k * other.g[i][j];
  }

  // overwrite the store's accumulators
  void store_into(ParamStore<S>& store) const {
    ParamId id = 0;
    for (auto& t : store) {
      t.g.assign(g[id].begin(), g[id].end());
      ++id;
    }
  }
};

}  // namespace iam
