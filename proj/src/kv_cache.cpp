#include "llamp/kv_cache.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "llamp/serialize.hpp"

namespace llamp {

namespace {
constexpr char kMagic[4] = {'L', 'K', 'V', 'C'};
constexpr uint16_t kVersion = 1;
constexpr uint16_t kDtypeF64 = 1;
}  // namespace

KVCacheEntry::KVCacheEntry(int n_heads, int head_dim)
    : n_heads_(n_heads),
      head_dim_(head_dim),
      keys_(0, static_cast<Eigen::Index>(n_heads) * head_dim),
      values_(0, static_cast<Eigen::Index>(n_heads) * head_dim) {
  if (n_heads <= 0 || head_dim <= 0)
    throw std::invalid_argument("KVCacheEntry: n_heads and head_dim must be positive");
}

void KVCacheEntry::append(const Eigen::MatrixXd& keys,
                          const Eigen::MatrixXd& values) {
  if (frozen_)
    throw std::logic_error("KVCacheEntry: append on a frozen cache");
  const Eigen::Index width = static_cast<Eigen::Index>(n_heads_) * head_dim_;
  if (keys.cols() != width || values.cols() != width ||
      keys.rows() != values.rows())
    throw std::invalid_argument("KVCacheEntry: key/value shape mismatch");
  const Eigen::Index old = keys_.rows();
  keys_.conservativeResize(old + keys.rows(), width);
  values_.conservativeResize(old + values.rows(), width);
  keys_.middleRows(old, keys.rows()) = keys;
  values_.middleRows(old, values.rows()) = values;
}

bool KVCacheEntry::bit_identical(const KVCacheEntry& other) const {
  if (length() != other.length() || n_heads_ != other.n_heads_ ||
      head_dim_ != other.head_dim_)
    return false;
  if (keys_.size() == 0) return true;
  return std::memcmp(keys_.data(), other.keys_.data(),
                     sizeof(double) * keys_.size()) == 0 &&
         std::memcmp(values_.data(), other.values_.data(),
                     sizeof(double) * values_.size()) == 0;
}

void KVCacheEntry::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(kMagic, 4);
  write_u16(os, kVersion);
  write_u32(os, static_cast<uint32_t>(length()));
  write_u32(os, static_cast<uint32_t>(n_heads_));
  write_u32(os, static_cast<uint32_t>(head_dim_));
  write_u16(os, kDtypeF64);
  write_matrix_rowmajor(os, keys_);
  write_matrix_rowmajor(os, values_);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

KVCacheEntry KVCacheEntry::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad LKVC magic in " + path.string());
  const uint16_t version = read_u16(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported LKVC version " +
                             std::to_string(version));
  const uint32_t len = read_u32(is);
  const uint32_t n_heads = read_u32(is);
  const uint32_t head_dim = read_u32(is);
  const uint16_t dtype = read_u16(is);
  if (dtype != kDtypeF64)
    throw std::runtime_error("unsupported LKVC dtype tag " +
                             std::to_string(dtype));
  KVCacheEntry e(static_cast<int>(n_heads), static_cast<int>(head_dim));
  const Eigen::Index width = static_cast<Eigen::Index>(n_heads) * head_dim;
  e.keys_ = read_matrix_rowmajor(is, len, width);
  e.values_ = read_matrix_rowmajor(is, len, width);
  e.frozen_ = true;
  return e;
}

}  // namespace llamp
