#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace llamp {

// Little-endian scalar IO used by all binary formats in this project.
void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f64(std::ostream& os, double v);
uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

void write_matrix_rowmajor(std::ostream& os, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_rowmajor(std::istream& is, Eigen::Index rows,
                                     Eigen::Index cols);

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
// Hash of dims plus row-major contents; stable across Eigen storage order.
std::string matrix_sha256(const Eigen::MatrixXd& m);

// Named-tensor archive: a JSON manifest followed by raw float64 payloads.
// Used for model checkpoints.
struct TensorArchive {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;
  std::string meta_json;  // caller-owned metadata blob

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);
};

nlohmann::json load_json_file(const std::filesystem::path& path);
void save_json_file(const std::filesystem::path& path,
                    const nlohmann::json& j);

}  // namespace llamp
