#include "llamp/nn.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace llamp {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
thread_local int g_lora_bypass_depth = 0;
}

LoraBypassGuard::LoraBypassGuard() { ++g_lora_bypass_depth; }
LoraBypassGuard::~LoraBypassGuard() { --g_lora_bypass_depth; }
bool lora_active() { return g_lora_bypass_depth == 0; }

LoRAAdapter::LoRAAdapter(int d_out, int d_in, int rank, Rng& rng)
    : rank(rank) {
  if (rank < 1 || rank > std::min(d_in, d_out))
    throw std::invalid_argument("LoRAAdapter: rank " + std::to_string(rank) +
                                " outside [1, min(" + std::to_string(d_in) +
                                ", " + std::to_string(d_out) + ")]");
  const double s = 1.0 / std::sqrt(static_cast<double>(rank));
  down = Tensor(rng.uniform_matrix(rank, d_in, -s, s));
  up = Tensor(Matrix::Zero(d_out, rank));
}

LinearMap::LinearMap(std::string name_, int d_out, int d_in, bool with_bias,
                     Rng& rng)
    : name(std::move(name_)) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d_in));
  weight = Tensor(rng.normal_matrix(d_out, d_in, s));
  if (with_bias) bias = Tensor(Matrix::Zero(1, d_out));
}

Tensor LinearMap::forward(const Tensor& x) const {
  if (x.cols() != weight.cols())
    throw std::invalid_argument("LinearMap '" + name + "': input width " +
                                std::to_string(x.cols()) +
                                " does not match weight d_in " +
                                std::to_string(weight.cols()));
  Tensor y = matmul(x, transpose(weight));
  if (bias.defined()) y = add_rowwise(y, bias);
  if (lora && lora_active()) {
    if (lora->down.cols() != weight.cols() || lora->up.rows() != weight.rows())
      throw std::invalid_argument("LinearMap '" + name +
                                  "': adapter shape does not match base weight");
    y = y + matmul(matmul(x, transpose(lora->down)), transpose(lora->up));
  }
  return y;
}

void LinearMap::attach_lora(int rank, Rng& rng) {
  lora.emplace(d_out(), d_in(), rank, rng);
}

void LinearMap::set_trainable(bool base, bool lora_flag) {
  weight.set_requires_grad(base);
  if (bias.defined()) bias.set_requires_grad(base);
  if (lora) {
    lora->down.set_requires_grad(lora_flag);
    lora->up.set_requires_grad(lora_flag);
  }
}

void LinearMap::collect_params(const std::string& prefix,
                               NamedParams& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  if (lora) {
    out.emplace_back(prefix + ".lora_down", lora->down);
    out.emplace_back(prefix + ".lora_up", lora->up);
  }
}

Tensor lora_forward(const Tensor& x, const LinearMap& map) {
  return map.forward(x);
}

LayerNorm::LayerNorm(int width)
    : gain(Tensor(Matrix::Ones(1, width))), bias(Tensor(Matrix::Zero(1, width))) {}

void LayerNorm::collect_params(const std::string& prefix,
                               NamedParams& out) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".bias", bias);
}

Embedding::Embedding(int count, int width, Rng& rng, double stddev)
    : table(Tensor(rng.normal_matrix(count, width, stddev))) {}

Tensor Embedding::lookup_range(int start, int count) const {
  std::vector<int> ids(count);
  for (int i = 0; i < count; ++i) ids[i] = start + i;
  return gather_rows(table, ids);
}

void Embedding::collect_params(const std::string& prefix,
                               NamedParams& out) const {
  out.emplace_back(prefix + ".table", table);
}

Matrix causal_mask(Eigen::Index n) {
  Matrix m = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) m(i, j) = kNegInf;
  return m;
}

Matrix cached_causal_mask(Eigen::Index prefix, Eigen::Index n) {
  Matrix m = Matrix::Zero(n, prefix + n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) m(i, prefix + j) = kNegInf;
  return m;
}

AttentionBlock::AttentionBlock(std::string name_, int width, int n_heads_,
                               MaskMode mode, Rng& rng)
    : name(std::move(name_)), n_heads(n_heads_), mask_mode(mode) {
  if (n_heads_ <= 0 || width % n_heads_ != 0)
    throw std::invalid_argument("AttentionBlock '" + name +
                                "': width must be a multiple of n_heads");
  head_dim = width / n_heads_;
  q_proj = LinearMap(name + ".q_proj", width, width, false, rng);
  k_proj = LinearMap(name + ".k_proj", width, width, false, rng);
  v_proj = LinearMap(name + ".v_proj", width, width, false, rng);
  o_proj = LinearMap(name + ".o_proj", width, width, false, rng);
}

Tensor AttentionBlock::attend(const Tensor& q, const Tensor& k,
                              const Tensor& v, const Matrix& mask) const {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Tensor mask_t{Matrix(mask)};
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, static_cast<Eigen::Index>(h) * head_dim, head_dim);
    Tensor kh = slice_cols(k, static_cast<Eigen::Index>(h) * head_dim, head_dim);
    Tensor vh = slice_cols(v, static_cast<Eigen::Index>(h) * head_dim, head_dim);
    Tensor scores = scale * matmul(qh, transpose(kh));
    Tensor probs = softmax_rows(scores + mask_t);
    heads.push_back(ordered_matmul(probs, vh));
  }
  return o_proj.forward(concat_cols(heads));
}

Tensor AttentionBlock::forward(const Tensor& x) const {
  const Matrix mask = mask_mode == MaskMode::causal
                          ? causal_mask(x.rows())
                          : Matrix::Zero(x.rows(), x.rows());
  return attend(q_proj.forward(x), k_proj.forward(x), v_proj.forward(x), mask);
}

Tensor AttentionBlock::forward_cached(const KVCacheEntry& cache,
                                      const Tensor& queries) const {
  if (mask_mode == MaskMode::bidirectional)
    throw std::logic_error("AttentionBlock '" + name +
                           "': cached attention requires causal mask mode");
  if (cache.n_heads() != n_heads || cache.head_dim() != head_dim)
    throw std::invalid_argument(
        "AttentionBlock '" + name + "': cache geometry " +
        std::to_string(cache.n_heads()) + "x" +
        std::to_string(cache.head_dim()) + " does not match block " +
        std::to_string(n_heads) + "x" + std::to_string(head_dim));
  // Cached keys/values are constants: gradients never flow into the prefix.
  Tensor k = concat_rows({Tensor(cache.keys()), k_proj.forward(queries)});
  Tensor v = concat_rows({Tensor(cache.values()), v_proj.forward(queries)});
  const Matrix mask = cached_causal_mask(cache.length(), queries.rows());
  return attend(q_proj.forward(queries), k, v, mask);
}

std::pair<Tensor, Tensor> AttentionBlock::project_kv(const Tensor& x) const {
  return {k_proj.forward(x), v_proj.forward(x)};
}

void AttentionBlock::collect_params(const std::string& prefix,
                                    NamedParams& out) const {
  q_proj.collect_params(prefix + ".q_proj", out);
  k_proj.collect_params(prefix + ".k_proj", out);
  v_proj.collect_params(prefix + ".v_proj", out);
  o_proj.collect_params(prefix + ".o_proj", out);
}

TransformerLayer::TransformerLayer(std::string name_, int width,
                                   int ffn_hidden, int n_heads, MaskMode mode,
                                   Rng& rng)
    : name(std::move(name_)),
      attn(name + ".attn", width, n_heads, mode, rng),
      norm1(width),
      norm2(width),
      ffn_in(name + ".ffn_in", ffn_hidden, width, true, rng),
      ffn_out(name + ".ffn_out", width, ffn_hidden, true, rng) {}

Tensor TransformerLayer::forward(const Tensor& inputs, const Tensor* injected,
                                 const KVCacheEntry* cache) const {
  if (inputs.cols() != width())
    throw std::invalid_argument("TransformerLayer '" + name +
                                "': input width " +
                                std::to_string(inputs.cols()) +
                                " does not match layer width " +
                                std::to_string(width()));
  Tensor x = inputs;
  if (injected) {
    if (injected->cols() != width())
      throw std::invalid_argument("TransformerLayer '" + name +
                                  "': injected width " +
                                  std::to_string(injected->cols()) +
                                  " does not match layer width " +
                                  std::to_string(width()));
    x = concat_rows({x, *injected});
  }
  Tensor normed = norm1.forward(x);
  Tensor a = cache ? attn.forward_cached(*cache, normed) : attn.forward(normed);
  Tensor h = x + a;
  Tensor f = ffn_out.forward(gelu(ffn_in.forward(norm2.forward(h))));
  return h + f;
}

std::pair<Tensor, Tensor> TransformerLayer::input_kv(const Tensor& inputs) const {
  return attn.project_kv(norm1.forward(inputs));
}

void TransformerLayer::collect_params(const std::string& prefix,
                                      NamedParams& out) const {
  attn.collect_params(prefix + ".attn", out);
  norm1.collect_params(prefix + ".norm1", out);
  norm2.collect_params(prefix + ".norm2", out);
  ffn_in.collect_params(prefix + ".ffn_in", out);
  ffn_out.collect_params(prefix + ".ffn_out", out);
}

}  // namespace llamp
