#pragma once

// Capacity-bounded buffer of the best candidates seen so far, stored in a
// min-max heap so both the best and the worst entry are available in O(1)
// and replaced in O(log B).
//
// Order is by loss, then by insertion serial: among equal losses the oldest
// entry counts as best and the newest as worst, so eviction removes the newest
// of a tied-worst group.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "gcq/errors.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

struct Candidate {
  TokenSeq seq;
  double loss = 0.0;
};

class CandidateBuffer {
 public:
  explicit CandidateBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("buffer capacity must be at least 1");
    heap_.reserve(capacity + 1);
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return heap_.size(); }
  bool empty() const noexcept { return heap_.empty(); }
  bool full() const noexcept { return heap_.size() >= capacity_; }

  /// Accepts when there is room, or when `loss` is no worse than the current
  /// worst (which is then evicted).
  bool try_insert(Candidate candidate) {
    if (!std::isfinite(candidate.loss)) throw ConfigError("candidate loss must be finite");
    if (full()) {
      if (candidate.loss > worst().loss) return false;
      pop_max();
    }
    heap_.push_back({std::move(candidate), serial_++});
    push_up(heap_.size() - 1);
    return true;
  }

  const Candidate& best() const {
    if (heap_.empty()) throw EmptyBuffer();
    return heap_.front().candidate;
  }

  const Candidate& worst() const {
    if (heap_.empty()) throw EmptyBuffer();
    return heap_[max_index()].candidate;
  }

  /// Entries from best to worst.
  std::vector<Candidate> sorted() const {
    std::vector<const Entry*> ptrs;
    for (const auto& e : heap_) ptrs.push_back(&e);
    std::sort(ptrs.begin(), ptrs.end(), [](const Entry* a, const Entry* b) { return less(*a, *b); });
    std::vector<Candidate> out;
    for (const auto* p : ptrs) out.push_back(p->candidate);
    return out;
  }

 private:
  struct Entry {
    Candidate candidate;
    std::uint64_t serial;
  };

  static bool less(const Entry& a, const Entry& b) {
    if (a.candidate.loss != b.candidate.loss) return a.candidate.loss < b.candidate.loss;
    return a.serial < b.serial;
  }
  bool lt(std::size_t i, std::size_t j) const { return less(heap_[i], heap_[j]); }

  static bool is_min_level(std::size_t i) {
    std::size_t level = 0;
    for (std::size_t n = i + 1; n > 1; n >>= 1) ++level;
    return level % 2 == 0;
  }
  static std::size_t parent(std::size_t i) { return (i - 1) / 2; }

  std::size_t max_index() const {
    if (heap_.size() == 1) return 0;
    if (heap_.size() == 2) return 1;
    return lt(1, 2) ? 2 : 1;
  }

  void swap_entries(std::size_t i, std::size_t j) { std::swap(heap_[i], heap_[j]); }

  void push_up(std::size_t i) {
    if (i == 0) return;
    const std::size_t p = parent(i);
    if (is_min_level(i)) {
      if (lt(p, i)) {
        swap_entries(i, p);
        push_up_towards(p, /*min=*/false);
      } else {
        push_up_towards(i, /*min=*/true);
      }
    } else {
      if (lt(i, p)) {
        swap_entries(i, p);
        push_up_towards(p, /*min=*/true);
      } else {
        push_up_towards(i, /*min=*/false);
      }
    }
  }

  void push_up_towards(std::size_t i, bool min) {
    while (i >= 3) {
      const std::size_t g = parent(parent(i));
      const bool move = min ? lt(i, g) : lt(g, i);
      if (!move) break;
      swap_entries(i, g);
      i = g;
    }
  }

  void pop_max() {
    const std::size_t m = max_index();
    heap_[m] = std::move(heap_.back());
    heap_.pop_back();
    if (m < heap_.size()) push_down(m);
  }

  void push_down(std::size_t i) {
    const bool min = is_min_level(i);
    // "better" means smaller on min levels and larger on max levels.
    auto better = [&](std::size_t a, std::size_t b) { return min ? lt(a, b) : lt(b, a); };
    const std::size_t n = heap_.size();
    for (;;) {
      const std::size_t first_child = 2 * i + 1;
      if (first_child >= n) return;
      std::size_t m = first_child;
      for (std::size_t c = first_child; c <= first_child + 1 && c < n; ++c) {
        if (better(c, m)) m = c;
        for (std::size_t g = 2 * c + 1; g <= 2 * c + 2 && g < n; ++g)
          if (better(g, m)) m = g;
      }
      if (m > first_child + 1) {  // grandchild
        if (!better(m, i)) return;
        swap_entries(m, i);
        if (better(parent(m), m)) swap_entries(m, parent(m));
        i = m;
      } else {
        if (better(m, i)) swap_entries(m, i);
        return;
      }
    }
  }

  std::size_t capacity_;
  std::uint64_t serial_ = 0;
  std::vector<Entry> heap_;
};

}  // namespace gcq
