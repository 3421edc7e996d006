#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "llamp/nn.hpp"
#include "llamp/text_pipeline.hpp"

namespace llamp {

// Frozen per-class knowledge: the last decoder layer's keys/values for the
// class description tokens. Built once, then read-only for the whole run.
struct KnowledgeCache {
  int class_id = -1;
  int template_id = -1;
  int token_length = 0;  // cached positions (bos + tokens + eos)
  KVCacheEntry last_layer_kv;
  std::optional<std::vector<KVCacheEntry>> all_layers;  // debugging aid
};

// Decoder outputs for the learnable prompts plus their projections into the
// text encoder's input space, one projection per prompted text layer.
struct AdaptivePrompts {
  Tensor states;                  // K x d_llm
  std::vector<Tensor> per_layer;  // depth entries, each K x d_text
};

// Per-layer affine maps from decoder space into text-encoder space:
// projected = W_i * state + b_i, with a separate bias row per prompt.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(int depth, int d_text, int d_llm, int k_prompts, Rng& rng);

  AdaptivePrompts project(const Tensor& states) const;
  void set_trainable(bool flag);
  void collect_params(const std::string& prefix, NamedParams& out) const;

  int depth() const { return static_cast<int>(weights.size()); }

  std::vector<Tensor> weights;  // d_text x d_llm
  std::vector<Tensor> biases;   // k x d_text
};

AdaptivePrompts project_prompts(const Tensor& states, const ProjectionHead& head);

// Last-decoder-layer parameter subsets that may be unfrozen during
// training. Everything below the last layer stays frozen regardless.
struct TrainableGroupConfig {
  bool lp = true;   // learnable decoder prompts
  bool qo = true;   // query + output projections
  bool kv = false;  // key + value projections
  bool ffn = false;

  static TrainableGroupConfig parse(const std::string& csv);
  std::string to_string() const;
};

// Decoder-only language model at desk scale: token + learned absolute
// position embeddings and a causal transformer stack.
class Decoder {
 public:
  Decoder() = default;
  Decoder(int width, int ffn_hidden, int n_layers, int n_heads, int vocab,
          int max_positions, Rng& rng);

  // Stage 1: full causal pass over the description tokens; records the last
  // layer's keys/values. Runs detached from any gradient graph.
  KnowledgeCache build_knowledge_cache(const TokenSequence& seq,
                                       bool keep_all_layers = false) const;

  // Stage 2: the K learnable prompts pass through only the last layer,
  // attending to the cached positions plus causally to each other. Returns
  // the K output states.
  Tensor encode_llm_prompts(const KnowledgeCache& cache,
                            const Tensor& llm_prompts) const;

  // Prompt vectors with their position embeddings (positions
  // token_total .. token_total+K-1) — the last layer's input rows for the
  // prompts, shared by the cached route and the full-forward route.
  Tensor prompt_inputs(const Tensor& llm_prompts, int token_total) const;

  // Token embeddings plus positions for a sequence (the model input).
  Tensor embed(const TokenSequence& seq) const;

  void collect_params(const std::string& prefix, NamedParams& out) const;
  int width() const { return layers.empty() ? 0 : layers.front().width(); }
  int n_layers() const { return static_cast<int>(layers.size()); }

  Embedding tokens;
  Embedding positions;
  std::vector<TransformerLayer> layers;
};

// On-disk store of knowledge caches: one LKVC file per (class, template)
// plus a JSON manifest carrying the decoder fingerprint. Loading with a
// different fingerprint is a hard error.
class CacheStore {
 public:
  struct Entry {
    int class_id;
    std::string class_name;
    int template_id;
    int token_length;
    std::string file;
  };

  static void build(const std::filesystem::path& dir, const Decoder& decoder,
                    const Tokenizer& tok, const TemplateSet& templates,
                    const std::vector<ClassSpec>& classes, PriorMode prior,
                    const std::vector<int>& template_ids,
                    const std::string& fingerprint, int jobs = 1);

  static CacheStore open(const std::filesystem::path& dir,
                         const std::string& expected_fingerprint);

  const KnowledgeCache& get(int class_id, int template_id) const;
  bool has(int class_id, int template_id) const;
  const std::vector<int>& template_ids() const { return template_ids_; }
  const std::string& fingerprint() const { return fingerprint_; }
  PriorMode prior() const { return prior_; }

 private:
  std::map<std::pair<int, int>, KnowledgeCache> caches_;
  std::vector<int> template_ids_;
  std::string fingerprint_;
  PriorMode prior_ = PriorMode::none;
};

}  // namespace llamp
