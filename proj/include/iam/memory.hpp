#pragma once

#include <cstddef>
#include <deque>

#include "iam/error.hpp"

namespace iam {

// Bounded FIFO queue: pushing at capacity evicts the oldest element first,
// so the size never exceeds the capacity, not even transiently.
// Index 0 is the oldest element, size()-1 the newest.
template <typename T>
class BoundedFifo {
 public:
  explicit BoundedFifo(size_t capacity) : cap_(capacity) {
    check(capacity >= 1, "BoundedFifo: capacity must be >= 1");
  }

  void push(T v) {
    if (q_.size() == cap_) q_.pop_front();
    q_.push_back(std::move(v));
  }

  size_t size() const { return q_.size(); }
  size_t capacity() const { return cap_; }
  bool empty() const { return q_.empty(); }
  void clear() { q_.clear(); }

  const T& operator[](size_t i) const { return q_[i]; }
  T& operator[](size_t i) { return q_[i]; }

  const T& oldest() const { return q_.front(); }
  const T& newest() const { return q_.back(); }

  auto begin() const { return q_.begin(); }
  auto end() const { return q_.end(); }

 private:
  std::deque<T> q_;
  size_t cap_;
};

}  // namespace iam
