#include "llamp/serialize.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace llamp {

namespace {

template <typename T>
void write_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of stream");
  return v;
}

}  // namespace

void write_u16(std::ostream& os, uint16_t v) { write_raw(os, v); }
void write_u32(std::ostream& os, uint32_t v) { write_raw(os, v); }
void write_u64(std::ostream& os, uint64_t v) { write_raw(os, v); }
void write_f64(std::ostream& os, double v) { write_raw(os, v); }
uint16_t read_u16(std::istream& is) { return read_raw<uint16_t>(is); }
uint32_t read_u32(std::istream& is) { return read_raw<uint32_t>(is); }
uint64_t read_u64(std::istream& is) { return read_raw<uint64_t>(is); }
double read_f64(std::istream& is) { return read_raw<double>(is); }

void write_matrix_rowmajor(std::ostream& os, const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) write_f64(os, m(i, j));
}

Eigen::MatrixXd read_matrix_rowmajor(std::istream& is, Eigen::Index rows,
                                     Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = read_f64(is);
  return m;
}

std::string sha256_hex(const void* data, size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(digest_len * 2);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::string& s) {
  return sha256_hex(s.data(), s.size());
}

std::string matrix_sha256(const Eigen::MatrixXd& m) {
  std::string buf;
  buf.reserve(16 + static_cast<size_t>(m.size()) * sizeof(double));
  uint64_t dims[2] = {static_cast<uint64_t>(m.rows()),
                      static_cast<uint64_t>(m.cols())};
  buf.append(reinterpret_cast<const char*>(dims), sizeof(dims));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double v = m(i, j);
      buf.append(reinterpret_cast<const char*>(&v), sizeof(double));
    }
  return sha256_hex(buf.data(), buf.size());
}

namespace {
constexpr char kArchiveMagic[4] = {'L', 'T', 'A', 'R'};
constexpr uint16_t kArchiveVersion = 1;
}  // namespace

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json manifest;
  manifest["meta"] = meta_json;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, m] : tensors)
    list.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  manifest["tensors"] = list;
  const std::string mstr = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(kArchiveMagic, 4);
  write_u16(os, kArchiveVersion);
  write_u64(os, mstr.size());
  os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& [name, m] : tensors) write_matrix_rowmajor(os, m);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kArchiveMagic, 4) != 0)
    throw std::runtime_error("bad archive magic in " + path.string());
  const uint16_t version = read_u16(is);
  if (version != kArchiveVersion)
    throw std::runtime_error("unsupported archive version " +
                             std::to_string(version));
  const uint64_t mlen = read_u64(is);
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw std::runtime_error("truncated archive manifest");
  nlohmann::json manifest = nlohmann::json::parse(mstr);

  TensorArchive out;
  out.meta_json = manifest.value("meta", std::string());
  for (const auto& t : manifest.at("tensors")) {
    const std::string name = t.at("name");
    const Eigen::Index rows = t.at("rows");
    const Eigen::Index cols = t.at("cols");
    out.tensors.emplace_back(name, read_matrix_rowmajor(is, rows, cols));
  }
  return out;
}

nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  nlohmann::json j;
  is >> j;
  return j;
}

void save_json_file(const std::filesystem::path& path,
                    const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace llamp
