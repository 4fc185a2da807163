#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace dear {

/// Additive attention mask with entries in {0, -inf}. The -inf sentinel is
/// stored as a flag; softmax drops flagged entries from both the max and
/// the normalizer instead of exponentiating an infinity.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), blocked_(rows * cols, 0) {}

  static AttentionMask open(std::size_t n) { return AttentionMask(n, n); }

  /// Query i may attend key j iff j <= i.
  static AttentionMask causal(std::size_t n) {
    AttentionMask m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m.block(i, j);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool blocked(std::size_t i, std::size_t j) const { return blocked_[i * cols_ + j] != 0; }
  void block(std::size_t i, std::size_t j) { blocked_[i * cols_ + j] = 1; }
  void unblock(std::size_t i, std::size_t j) { blocked_[i * cols_ + j] = 0; }

  std::size_t blocked_count() const {
    std::size_t n = 0;
    for (auto b : blocked_) n += b;
    return n;
  }

  bool any_row_fully_blocked() const {
    for (std::size_t i = 0; i < rows_; ++i) {
      bool open_cell = false;
      for (std::size_t j = 0; j < cols_ && !open_cell; ++j) open_cell = !blocked(i, j);
      if (!open_cell) return true;
    }
    return false;
  }

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> blocked_;
};

}  // namespace dear
