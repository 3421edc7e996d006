#pragma once

#include <optional>
#include <string>
#include <vector>

#include "llamp/llm_bridge.hpp"
#include "llamp/nn.hpp"
#include "llamp/text_pipeline.hpp"

namespace llamp {

// Pre-patched image: one embedding row per patch, already at encoder width.
struct VisionInput {
  Matrix patches;  // M x width, M >= 1
};

// All learnable prompt vectors of the system. Entry i of visual/textual is
// the prompt block re-injected at encoder layer i (deep prompting).
struct PromptBank {
  std::vector<Tensor> visual;   // depth_v entries, V x vision width
  std::vector<Tensor> textual;  // depth_t entries, T x text width
  Tensor llm;                   // K x llm width; undefined without the bridge

  void set_trainable(bool visual_text, bool llm_flag);
  void collect_params(NamedParams& out) const;
};

// Vision transformer with CLS pooling, bidirectional attention, deep visual
// prompting and optional LoRA on the query/value projections of the layers
// past the prompting depth. Prompts are appended after the patch rows and
// carry no position embedding, so attention treats them as an unordered set.
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(int width, int joint_width, int n_layers, int ffn_hidden,
                int n_heads, int max_positions, Rng& rng);

  // prompts == nullptr encodes the plain (base) tower. layer_trace, when
  // given, receives each layer's input matrix.
  Tensor encode(const VisionInput& input, const std::vector<Tensor>* prompts,
                std::vector<Matrix>* layer_trace = nullptr) const;

  void attach_lora(int first_layer, int rank, Rng& rng);
  void collect_params(const std::string& prefix, NamedParams& out) const;
  int width() const { return static_cast<int>(cls_embedding.cols()); }

  Tensor cls_embedding;  // 1 x width
  Embedding positions;   // covers cls + patches
  std::vector<TransformerLayer> layers;
  LayerNorm final_norm;
  LinearMap output_proj;  // joint x width
};

// Text transformer with deep textual prompting and adaptive prompt
// injection. Per prompted layer i the sequence is
//   {bos, textual[i], t_1..t_L, adaptive[i], eos},
// with prompt and adaptive slots overwritten at each prompted layer and
// token slots flowing through. The feature is read at the eos position.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(int width, int joint_width, int n_layers, int ffn_hidden,
              int n_heads, int vocab, int max_positions, MaskMode mode,
              Rng& rng);

  Tensor encode(const TokenSequence& seq, const std::vector<Tensor>* prompts,
                const AdaptivePrompts* adaptive,
                std::vector<Matrix>* layer_trace = nullptr) const;

  void collect_params(const std::string& prefix, NamedParams& out) const;
  int width() const { return layers.empty() ? 0 : layers.front().width(); }

  Embedding tokens;
  Embedding positions;
  std::vector<TransformerLayer> layers;
  LayerNorm final_norm;
  LinearMap output_proj;  // joint x width
};

// Softmax cosine classifier: p_i = exp(f.g_i / tau) / sum_j exp(f.g_j / tau).
Eigen::VectorXd classify(const Eigen::VectorXd& f,
                         const std::vector<Eigen::VectorXd>& class_features,
                         double tau);
// Ties go to the lowest index.
int argmax_lowest(const Eigen::VectorXd& probs);

}  // namespace llamp
