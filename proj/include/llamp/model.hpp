#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "llamp/encoders.hpp"
#include "llamp/llm_bridge.hpp"

namespace llamp {

// Every knob of the system: geometry, mechanism flags (one per ablation
// axis) and training hyperparameters. Serializes to/from JSON; unknown keys
// are rejected so configs stay honest.
struct ExperimentConfig {
  // geometry
  int vision_width = 64;
  int text_width = 64;
  int joint_width = 32;
  int llm_width = 128;
  int n_heads = 4;
  int vision_layers = 12;
  int text_layers = 12;
  int decoder_layers = 4;
  int ffn_multiplier = 4;
  int max_positions = 160;
  double tau = 0.01;
  std::string text_mask_mode = "causal";  // causal | bidirectional
  uint64_t model_seed = 17;

  // prompting / adaptation
  std::string vision_scheme = "hybrid";  // hybrid | prompt9 | lora12 | custom
  int vision_prompt_depth = 6;
  int vision_lora_from = 6;  // first 0-based vision layer carrying LoRA;
                             // >= vision_layers disables LoRA
  int text_prompt_depth = 9;
  int n_visual_prompts = 4;
  int n_text_prompts = 4;
  int k_llm_prompts = 16;
  int lora_rank = 4;
  bool use_llm = true;
  TrainableGroupConfig groups;
  std::string prior = "np";  // none | plain | np
  bool ta1 = true;           // noun-phrase-augmented caption templates
  bool ta2 = true;           // full query-template set (false: template 0 only)
  bool kl_teacher_first = false;

  // training
  double global_lr = 2e-4;
  double lora_lr = 2e-5;
  int batch_size = 8;
  int epochs = 20;
  std::string optimizer = "sgd";  // sgd | adam
  double momentum = 0.0;
  double lambda_v = 10.0;
  double lambda_t = 25.0;
  double lambda_dist = 2.5;
  uint64_t train_seed = 1;
  int shots = 16;
  std::string split = "sorted";  // sorted | random
  uint64_t split_seed = 0;
  int ensemble = 0;  // templates in the inference ensemble; 0 = all

  // Applies the named vision scheme to prompt depth and LoRA coverage.
  void resolve_vision_scheme();
  // Query template ids active under ta2.
  std::vector<int> active_template_ids(int available) const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct ParamPartition {
  NamedParams trainable;
  NamedParams frozen;
};

// The assembled system: tokenizer, the two encoder towers, the decoder
// bridge, prompt bank and projection heads. Construction is a pure function
// of (config, class names, responses, templates).
class ModelBundle {
 public:
  static ModelBundle create(const ExperimentConfig& config,
                            const std::vector<ClassSpec>& classes,
                            const TemplateSet& templates);

  // All parameters in a fixed, deterministic order.
  NamedParams named_parameters() const;
  // Opens the selected last-decoder-layer groups, the projection heads, the
  // prompt bank and the vision adapters; freezes everything else. Returns
  // the resulting exhaustive, disjoint partition.
  ParamPartition apply_trainable_groups(const TrainableGroupConfig& cfg);
  ParamPartition apply_trainable_groups() {
    return apply_trainable_groups(config.groups);
  }

  std::string decoder_fingerprint() const;
  // name -> sha256 of the current tensor contents.
  std::vector<std::pair<std::string, std::string>> parameter_hashes() const;
  std::string model_hash() const;

  // Forward paths. class_feature uses the adaptive-prompt route when the
  // bundle has the bridge enabled and a cache is supplied.
  Tensor image_feature(const Matrix& patches) const;
  Tensor class_feature(const ClassSpec& cls, const KnowledgeCache* cache) const;
  AdaptivePrompts adaptive_prompts(const KnowledgeCache& cache) const;
  // Frozen prompt-free reference paths (base towers, adapters bypassed).
  Tensor reference_image_feature(const Matrix& patches) const;
  Tensor reference_text_feature(const std::string& sentence) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static ModelBundle load_checkpoint(const std::filesystem::path& path,
                                     const std::vector<ClassSpec>& classes,
                                     const TemplateSet& templates);

  ExperimentConfig config;
  Tokenizer tokenizer;
  TemplateSet templates;
  VisionEncoder vision;
  TextEncoder text;
  Decoder decoder;
  PromptBank prompts;
  ProjectionHead projection;  // depth 0 when use_llm is false

 private:
  ModelBundle() = default;
  void build_towers(const std::vector<std::string>& vocab);
};

// Corpus the tokenizer vocabulary is built from: class names, template
// renderings and (when present) response texts with their noun phrases.
std::vector<std::string> vocabulary_corpus(const std::vector<ClassSpec>& classes,
                                           const TemplateSet& templates);

}  // namespace llamp
