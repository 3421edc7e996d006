#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "llamp/text_pipeline.hpp"

namespace llamp {

// Desk-scale vision-language testbed. Each class is a subset of attribute
// prototypes; its images scatter those prototypes over random patches under
// Gaussian noise, and its pre-generated description names exactly the
// attribute words. Class names are opaque codes, so the description is the
// only textual signal that separates classes.
struct SyntheticWorldConfig {
  int n_classes = 16;
  int n_attributes = 6;
  int attributes_per_class = 3;
  int patches = 9;          // grid positions per image
  int patch_width = 64;     // embedding width of each patch
  double noise_sigma = 0.3;
  int samples_per_class = 16;  // training pool
  int eval_per_class = 12;     // held-out evaluation images
  uint64_t seed = 1;
};

struct LabeledImage {
  Eigen::MatrixXd patches;  // patches x patch_width
  int label_id = 0;
};

struct Dataset {
  std::vector<LabeledImage> items;
  std::vector<std::string> class_names;

  std::vector<int> indices_of_class(int label) const;
};

struct World {
  SyntheticWorldConfig config;
  Dataset train;
  Dataset test;
  std::vector<ClassSpec> classes;
  std::vector<ResponseRecord> responses;
  std::vector<std::string> attribute_names;           // adjective-noun pairs
  Eigen::MatrixXd attribute_prototypes;               // n_attributes x width
  std::vector<std::vector<int>> class_attributes;     // per class, sorted
};

World generate_world(const SyntheticWorldConfig& cfg,
                     const TemplateSet& templates);

// Directory layout written/read by the world IO:
//   root/manifest.json     config + class/attribute table
//   root/responses.jsonl   response store
//   root/train/<class>/NNN.img, root/test/<class>/NNN.img
void save_world(const World& world, const std::filesystem::path& root);
World load_world(const std::filesystem::path& root);

// Generic loader for one split tree (root/<class_dir>/*.img). Labels follow
// sorted class-directory order; files within a class sort by name.
Dataset load_directory_dataset(const std::filesystem::path& root);

// Raw patch-grid image container ("LIMG": magic, version u16, rows u32,
// cols u32, row-major float64, little-endian).
void save_image(const std::filesystem::path& path, const Eigen::MatrixXd& patches);
Eigen::MatrixXd load_image(const std::filesystem::path& path);

// Deterministic description texts for a synthetic world, one per
// (class, query template), with the attribute words embedded so that
// noun-phrase extraction recovers them.
std::vector<ResponseRecord> generate_stub_responses(
    const std::vector<std::string>& class_names,
    const std::vector<std::vector<int>>& class_attributes,
    const std::vector<std::string>& attribute_names,
    const TemplateSet& templates, const NounPhraseExtractor& extractor);

}  // namespace llamp
