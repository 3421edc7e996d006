#include "llamp/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace llamp {

void PromptBank::set_trainable(bool visual_text, bool llm_flag) {
  for (auto& p : visual) p.set_requires_grad(visual_text);
  for (auto& p : textual) p.set_requires_grad(visual_text);
  if (llm.defined()) llm.set_requires_grad(llm_flag);
}

void PromptBank::collect_params(NamedParams& out) const {
  for (size_t i = 0; i < visual.size(); ++i)
    out.emplace_back("prompts.visual.layer" + std::to_string(i), visual[i]);
  for (size_t i = 0; i < textual.size(); ++i)
    out.emplace_back("prompts.textual.layer" + std::to_string(i), textual[i]);
  if (llm.defined()) out.emplace_back("prompts.llm", llm);
}

VisionEncoder::VisionEncoder(int width, int joint_width, int n_layers,
                             int ffn_hidden, int n_heads, int max_positions,
                             Rng& rng)
    : cls_embedding(Tensor(rng.normal_matrix(1, width, 0.02))),
      positions(max_positions, width, rng),
      final_norm(width),
      output_proj("vision.output_proj", joint_width, width, false, rng) {
  layers.reserve(n_layers);
  for (int i = 0; i < n_layers; ++i)
    layers.emplace_back("vision.layer" + std::to_string(i), width, ffn_hidden,
                        n_heads, MaskMode::bidirectional, rng);
}

void VisionEncoder::attach_lora(int first_layer, int rank, Rng& rng) {
  for (size_t i = static_cast<size_t>(first_layer); i < layers.size(); ++i) {
    layers[i].attn.q_proj.attach_lora(rank, rng);
    layers[i].attn.v_proj.attach_lora(rank, rng);
  }
}

Tensor VisionEncoder::encode(const VisionInput& input,
                             const std::vector<Tensor>* prompts,
                             std::vector<Matrix>* layer_trace) const {
  if (input.patches.rows() < 1)
    throw std::invalid_argument("encode_image: need at least one patch");
  if (input.patches.cols() != width())
    throw std::invalid_argument("encode_image: patch width " +
                                std::to_string(input.patches.cols()) +
                                " does not match encoder width " +
                                std::to_string(width()));
  const size_t depth = prompts ? prompts->size() : 0;
  if (depth > layers.size())
    throw std::invalid_argument("encode_image: prompting depth " +
                                std::to_string(depth) + " exceeds layer count " +
                                std::to_string(layers.size()));

  const Eigen::Index n_tokens = 1 + input.patches.rows();
  Tensor x = concat_rows({cls_embedding, Tensor(input.patches)});
  x = x + positions.lookup_range(0, static_cast<int>(n_tokens));

  for (size_t i = 0; i < layers.size(); ++i) {
    if (i < depth) {
      // Deep prompting: token slots flow through, prompt slots are replaced.
      Tensor token_part = i == 0 ? x : slice_rows(x, 0, n_tokens);
      x = concat_rows({token_part, (*prompts)[i]});
    }
    if (layer_trace) layer_trace->push_back(x.value());
    x = layers[i].forward(x);
  }

  Tensor cls = slice_rows(x, 0, 1);
  return l2_normalize_rows(output_proj.forward(final_norm.forward(cls)));
}

void VisionEncoder::collect_params(const std::string& prefix,
                                   NamedParams& out) const {
  out.emplace_back(prefix + ".cls_embedding", cls_embedding);
  positions.collect_params(prefix + ".positions", out);
  for (const auto& l : layers) l.collect_params(prefix + "." + l.name, out);
  final_norm.collect_params(prefix + ".final_norm", out);
  output_proj.collect_params(prefix + ".output_proj", out);
}

TextEncoder::TextEncoder(int width, int joint_width, int n_layers,
                         int ffn_hidden, int n_heads, int vocab,
                         int max_positions, MaskMode mode, Rng& rng)
    : tokens(vocab, width, rng),
      positions(max_positions, width, rng),
      final_norm(width),
      output_proj("text.output_proj", joint_width, width, false, rng) {
  layers.reserve(n_layers);
  for (int i = 0; i < n_layers; ++i)
    layers.emplace_back("text.layer" + std::to_string(i), width, ffn_hidden,
                        n_heads, mode, rng);
}

Tensor TextEncoder::encode(const TokenSequence& seq,
                           const std::vector<Tensor>* prompts,
                           const AdaptivePrompts* adaptive,
                           std::vector<Matrix>* layer_trace) const {
  const size_t prompt_depth = prompts ? prompts->size() : 0;
  const size_t adaptive_depth = adaptive ? adaptive->per_layer.size() : 0;
  if (prompt_depth && adaptive_depth && prompt_depth != adaptive_depth)
    throw std::invalid_argument(
        "encode_text: textual prompt depth " + std::to_string(prompt_depth) +
        " differs from adaptive prompt depth " + std::to_string(adaptive_depth));
  const size_t depth = std::max(prompt_depth, adaptive_depth);
  if (depth > layers.size())
    throw std::invalid_argument("encode_text: prompting depth " +
                                std::to_string(depth) + " exceeds layer count " +
                                std::to_string(layers.size()));
  if (adaptive)
    for (const auto& a : adaptive->per_layer)
      if (a.cols() != width())
        throw std::invalid_argument("encode_text: adaptive prompt width " +
                                    std::to_string(a.cols()) +
                                    " does not match text width " +
                                    std::to_string(width()));

  const Eigen::Index n_prompt = prompt_depth ? (*prompts)[0].rows() : 0;
  const Eigen::Index inner = seq.length();

  Tensor emb = tokens.lookup(seq.full_ids());
  Tensor bos = slice_rows(emb, 0, 1);
  Tensor body = slice_rows(emb, 1, inner);
  Tensor eos = slice_rows(emb, 1 + inner, 1);

  // Layer 0 input: {bos, prompts, tokens, adaptive, eos} with position
  // embeddings over the whole sequence.
  auto assemble = [&](const Tensor& b, const Tensor& t, const Tensor& e,
                      size_t layer) {
    std::vector<Tensor> parts;
    parts.push_back(b);
    if (layer < prompt_depth) parts.push_back((*prompts)[layer]);
    parts.push_back(t);
    if (layer < adaptive_depth) parts.push_back(adaptive->per_layer[layer]);
    parts.push_back(e);
    return concat_rows(parts);
  };

  Tensor x = assemble(bos, body, eos, 0);
  const Eigen::Index total = x.rows();
  x = x + positions.lookup_range(0, static_cast<int>(total));

  for (size_t i = 0; i < layers.size(); ++i) {
    if (i > 0 && i < depth) {
      // Replace prompt/adaptive slots with this layer's vectors; bos, token
      // and eos states flow through from the previous layer.
      Tensor b = slice_rows(x, 0, 1);
      Tensor t = slice_rows(x, 1 + (prompt_depth > 0 ? n_prompt : 0), inner);
      Tensor e = slice_rows(x, total - 1, 1);
      x = assemble(b, t, e, i);
    }
    if (layer_trace) layer_trace->push_back(x.value());
    x = layers[i].forward(x);
  }

  Tensor pooled = slice_rows(x, total - 1, 1);
  return l2_normalize_rows(output_proj.forward(final_norm.forward(pooled)));
}

void TextEncoder::collect_params(const std::string& prefix,
                                 NamedParams& out) const {
  tokens.collect_params(prefix + ".tokens", out);
  positions.collect_params(prefix + ".positions", out);
  for (const auto& l : layers) l.collect_params(prefix + "." + l.name, out);
  final_norm.collect_params(prefix + ".final_norm", out);
  output_proj.collect_params(prefix + ".output_proj", out);
}

Eigen::VectorXd classify(const Eigen::VectorXd& f,
                         const std::vector<Eigen::VectorXd>& class_features,
                         double tau) {
  if (tau <= 0)
    throw std::invalid_argument("classify: temperature must be positive, got " +
                                std::to_string(tau));
  if (class_features.empty())
    throw std::invalid_argument("classify: need at least one class");
  Eigen::VectorXd logits(class_features.size());
  for (size_t i = 0; i < class_features.size(); ++i) {
    if (class_features[i].size() != f.size())
      throw std::invalid_argument("classify: class feature " +
                                  std::to_string(i) + " has width " +
                                  std::to_string(class_features[i].size()) +
                                  ", expected " + std::to_string(f.size()));
    logits(static_cast<Eigen::Index>(i)) = f.dot(class_features[i]) / tau;
  }
  const double mx = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - mx).exp();
  return p / p.sum();
}

int argmax_lowest(const Eigen::VectorXd& probs) {
  int best = 0;
  for (Eigen::Index i = 1; i < probs.size(); ++i)
    if (probs(i) > probs(best)) best = static_cast<int>(i);
  return best;
}

}  // namespace llamp
