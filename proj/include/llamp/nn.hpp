#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "llamp/autodiff.hpp"
#include "llamp/kv_cache.hpp"
#include "llamp/rng.hpp"

namespace llamp {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// While alive, every LinearMap forward in this thread skips its low-rank
// adapter. Reference-feature passes use this to read the base encoders even
// after the adapters have trained away from zero.
class LoraBypassGuard {
 public:
  LoraBypassGuard();
  ~LoraBypassGuard();
  LoraBypassGuard(const LoraBypassGuard&) = delete;
  LoraBypassGuard& operator=(const LoraBypassGuard&) = delete;
};

bool lora_active();

// Low-rank delta on a frozen weight: delta = up * down, with down drawn
// uniform in [-1/sqrt(r), 1/sqrt(r)] and up zero so a fresh adapter leaves
// the base map untouched.
struct LoRAAdapter {
  Tensor down;  // r x d_in
  Tensor up;    // d_out x r
  int rank = 0;

  LoRAAdapter(int d_out, int d_in, int rank, Rng& rng);
};

// Affine map y = W x + b with an optional low-rank adapter. Inputs are
// sequences with one position per row, so forward computes x * W^T.
class LinearMap {
 public:
  LinearMap() = default;
  LinearMap(std::string name, int d_out, int d_in, bool with_bias, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void attach_lora(int rank, Rng& rng);
  void set_trainable(bool base, bool lora_flag);
  void collect_params(const std::string& prefix, NamedParams& out) const;

  int d_out() const { return static_cast<int>(weight.rows()); }
  int d_in() const { return static_cast<int>(weight.cols()); }

  std::string name;
  Tensor weight;  // d_out x d_in
  Tensor bias;    // 1 x d_out; undefined when the map has no bias
  std::optional<LoRAAdapter> lora;
};

Tensor lora_forward(const Tensor& x, const LinearMap& map);

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int width);
  Tensor forward(const Tensor& x) const { return layer_norm_rows(x, gain, bias); }
  void collect_params(const std::string& prefix, NamedParams& out) const;

  Tensor gain;  // 1 x width
  Tensor bias;  // 1 x width
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(int count, int width, Rng& rng, double stddev = 0.02);
  Tensor lookup(const std::vector<int>& ids) const { return gather_rows(table, ids); }
  Tensor lookup_range(int start, int count) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;

  Tensor table;  // count x width
};

enum class MaskMode { causal, bidirectional };

// Multi-head attention over row-per-position sequences. forward() is plain
// masked self-attention; forward_cached() attends incoming query positions
// to a frozen prefix of cached keys/values plus (causally) to themselves.
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(std::string name, int width, int n_heads, MaskMode mode,
                 Rng& rng);

  Tensor forward(const Tensor& x) const;
  Tensor forward_cached(const KVCacheEntry& cache, const Tensor& queries) const;
  // Key/value projections of x, for cache building / incremental decoding.
  std::pair<Tensor, Tensor> project_kv(const Tensor& x) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;

  int width() const { return n_heads * head_dim; }

  std::string name;
  int n_heads = 0;
  int head_dim = 0;
  MaskMode mask_mode = MaskMode::causal;
  LinearMap q_proj, k_proj, v_proj, o_proj;

 private:
  Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v,
                const Matrix& mask) const;
};

// Pre-norm residual transformer layer: x + attn(norm1(x)), then
// x + ffn(norm2(x)) with a GELU hidden layer.
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::string name, int width, int ffn_hidden, int n_heads,
                   MaskMode mode, Rng& rng);

  // injected: extra hidden states appended to the input sequence before the
  // layer runs (output length = input length + injected length).
  // cache: preceding-position keys/values; inputs then act as queries only.
  Tensor forward(const Tensor& inputs, const Tensor* injected = nullptr,
                 const KVCacheEntry* cache = nullptr) const;
  // Keys/values this layer would compute for `inputs`, i.e. the projections
  // of norm1(inputs). These are what a KV cache stores.
  std::pair<Tensor, Tensor> input_kv(const Tensor& inputs) const;
  void collect_params(const std::string& prefix, NamedParams& out) const;

  int width() const { return attn.width(); }

  std::string name;
  AttentionBlock attn;
  LayerNorm norm1, norm2;
  LinearMap ffn_in, ffn_out;
};

Matrix causal_mask(Eigen::Index n);
// Mask for queries attending to a cached prefix of length `prefix` plus
// causally to themselves: shape n x (prefix + n).
Matrix cached_causal_mask(Eigen::Index prefix, Eigen::Index n);

}  // namespace llamp
