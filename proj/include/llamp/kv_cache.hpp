#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <string>

namespace llamp {

// Per-layer key/value store for previously processed positions. Rows are
// positions, columns are n_heads * head_dim (head h occupies the column
// block [h*head_dim, (h+1)*head_dim)). Grows by append until frozen; a
// frozen entry is immutable and safe to share across threads.
class KVCacheEntry {
 public:
  KVCacheEntry() = default;
  KVCacheEntry(int n_heads, int head_dim);

  void append(const Eigen::MatrixXd& keys, const Eigen::MatrixXd& values);
  void freeze() { frozen_ = true; }

  bool frozen() const { return frozen_; }
  Eigen::Index length() const { return keys_.rows(); }
  int n_heads() const { return n_heads_; }
  int head_dim() const { return head_dim_; }
  const Eigen::MatrixXd& keys() const { return keys_; }
  const Eigen::MatrixXd& values() const { return values_; }

  bool bit_identical(const KVCacheEntry& other) const;

  // "LKVC" container: magic, version u16, L u32, n_heads u32, head_dim u32,
  // dtype tag u16 (1 = float64), then row-major keys and values,
  // little-endian throughout. Loaded entries come back frozen.
  void save(const std::filesystem::path& path) const;
  static KVCacheEntry load(const std::filesystem::path& path);

 private:
  int n_heads_ = 0;
  int head_dim_ = 0;
  bool frozen_ = false;
  Eigen::MatrixXd keys_;    // L x (n_heads*head_dim)
  Eigen::MatrixXd values_;  // L x (n_heads*head_dim)
};

}  // namespace llamp
