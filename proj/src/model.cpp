#include "llamp/model.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "llamp/serialize.hpp"

namespace llamp {

void ExperimentConfig::resolve_vision_scheme() {
  if (vision_scheme == "hybrid") {
    vision_prompt_depth = std::min(6, vision_layers);
    vision_lora_from = std::min(6, vision_layers);
  } else if (vision_scheme == "prompt9") {
    vision_prompt_depth = std::min(9, vision_layers);
    vision_lora_from = vision_layers;  // no adapters
  } else if (vision_scheme == "lora12") {
    vision_prompt_depth = 0;
    vision_lora_from = 0;
  } else if (vision_scheme == "custom") {
    // keep explicit vision_prompt_depth / vision_lora_from
  } else {
    throw std::invalid_argument("unknown vision scheme '" + vision_scheme +
                                "' (expected hybrid, prompt9, lora12, custom)");
  }
}

std::vector<int> ExperimentConfig::active_template_ids(int available) const {
  std::vector<int> ids;
  const int n = ta2 ? available : 1;
  for (int i = 0; i < n; ++i) ids.push_back(i);
  return ids;
}

void ExperimentConfig::validate() const {
  if (vision_width % n_heads || text_width % n_heads || llm_width % n_heads)
    throw std::invalid_argument("config: widths must be divisible by n_heads");
  if (vision_prompt_depth > vision_layers)
    throw std::invalid_argument("config: vision prompt depth " +
                                std::to_string(vision_prompt_depth) +
                                " exceeds vision layers " +
                                std::to_string(vision_layers));
  if (text_prompt_depth > text_layers)
    throw std::invalid_argument("config: text prompt depth " +
                                std::to_string(text_prompt_depth) +
                                " exceeds text layers " +
                                std::to_string(text_layers));
  if (tau <= 0) throw std::invalid_argument("config: tau must be positive");
  if (k_llm_prompts < 1)
    throw std::invalid_argument("config: k_llm_prompts must be >= 1");
  if (lambda_v < 0 || lambda_t < 0 || lambda_dist < 0)
    throw std::invalid_argument("config: loss weights must be nonnegative");
  if (vision_lora_from < vision_prompt_depth)
    throw std::invalid_argument(
        "config: adapters may only sit on layers past the vision prompting "
        "depth (vision_lora_from " + std::to_string(vision_lora_from) +
        " < vision_prompt_depth " + std::to_string(vision_prompt_depth) + ")");
  if (text_mask_mode != "causal" && text_mask_mode != "bidirectional")
    throw std::invalid_argument("config: text_mask_mode must be causal or bidirectional");
  parse_prior_mode(prior);
}

nlohmann::json ExperimentConfig::to_json() const {
  return nlohmann::json{
      {"vision_width", vision_width},
      {"text_width", text_width},
      {"joint_width", joint_width},
      {"llm_width", llm_width},
      {"n_heads", n_heads},
      {"vision_layers", vision_layers},
      {"text_layers", text_layers},
      {"decoder_layers", decoder_layers},
      {"ffn_multiplier", ffn_multiplier},
      {"max_positions", max_positions},
      {"tau", tau},
      {"text_mask_mode", text_mask_mode},
      {"model_seed", model_seed},
      {"vision_scheme", vision_scheme},
      {"vision_prompt_depth", vision_prompt_depth},
      {"vision_lora_from", vision_lora_from},
      {"text_prompt_depth", text_prompt_depth},
      {"n_visual_prompts", n_visual_prompts},
      {"n_text_prompts", n_text_prompts},
      {"k_llm_prompts", k_llm_prompts},
      {"lora_rank", lora_rank},
      {"use_llm", use_llm},
      {"groups", groups.to_string()},
      {"prior", prior},
      {"ta1", ta1},
      {"ta2", ta2},
      {"kl_teacher_first", kl_teacher_first},
      {"global_lr", global_lr},
      {"lora_lr", lora_lr},
      {"batch_size", batch_size},
      {"epochs", epochs},
      {"optimizer", optimizer},
      {"momentum", momentum},
      {"lambda_v", lambda_v},
      {"lambda_t", lambda_t},
      {"lambda_dist", lambda_dist},
      {"train_seed", train_seed},
      {"shots", shots},
      {"split", split},
      {"split_seed", split_seed},
      {"ensemble", ensemble},
  };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  const nlohmann::json defaults = c.to_json();
  for (const auto& [key, value] : j.items())
    if (!defaults.contains(key))
      throw std::invalid_argument("config: unknown key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("vision_width", c.vision_width);
  get("text_width", c.text_width);
  get("joint_width", c.joint_width);
  get("llm_width", c.llm_width);
  get("n_heads", c.n_heads);
  get("vision_layers", c.vision_layers);
  get("text_layers", c.text_layers);
  get("decoder_layers", c.decoder_layers);
  get("ffn_multiplier", c.ffn_multiplier);
  get("max_positions", c.max_positions);
  get("tau", c.tau);
  get("text_mask_mode", c.text_mask_mode);
  get("model_seed", c.model_seed);
  get("vision_scheme", c.vision_scheme);
  get("vision_prompt_depth", c.vision_prompt_depth);
  get("vision_lora_from", c.vision_lora_from);
  get("text_prompt_depth", c.text_prompt_depth);
  get("n_visual_prompts", c.n_visual_prompts);
  get("n_text_prompts", c.n_text_prompts);
  get("k_llm_prompts", c.k_llm_prompts);
  get("lora_rank", c.lora_rank);
  get("use_llm", c.use_llm);
  if (j.contains("groups"))
    c.groups = TrainableGroupConfig::parse(j.at("groups").get<std::string>());
  get("prior", c.prior);
  get("ta1", c.ta1);
  get("ta2", c.ta2);
  get("kl_teacher_first", c.kl_teacher_first);
  get("global_lr", c.global_lr);
  get("lora_lr", c.lora_lr);
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("optimizer", c.optimizer);
  get("momentum", c.momentum);
  get("lambda_v", c.lambda_v);
  get("lambda_t", c.lambda_t);
  get("lambda_dist", c.lambda_dist);
  get("train_seed", c.train_seed);
  get("shots", c.shots);
  get("split", c.split);
  get("split_seed", c.split_seed);
  get("ensemble", c.ensemble);
  if (c.vision_scheme != "custom") c.resolve_vision_scheme();
  return c;
}

std::vector<std::string> vocabulary_corpus(
    const std::vector<ClassSpec>& classes, const TemplateSet& templates) {
  std::vector<std::string> corpus;
  for (const auto& t : templates.llm_templates)
    corpus.push_back(render_template(t, ""));
  for (const auto& t : templates.clip_templates)
    corpus.push_back(render_template(t, "", ""));
  for (const auto& c : classes) {
    corpus.push_back(c.name);
    for (const auto& r : c.responses) corpus.push_back(r.response_text);
    for (const auto& np : c.noun_phrases) corpus.push_back(np);
  }
  return corpus;
}

void ModelBundle::build_towers(const std::vector<std::string>& vocab_words) {
  config.validate();
  Rng rng(config.model_seed);
  const int vocab = static_cast<int>(vocab_words.size());

  vision = VisionEncoder(config.vision_width, config.joint_width,
                         config.vision_layers,
                         config.ffn_multiplier * config.vision_width,
                         config.n_heads, config.max_positions, rng);
  if (config.vision_lora_from < config.vision_layers)
    vision.attach_lora(config.vision_lora_from, config.lora_rank, rng);

  const MaskMode text_mode = config.text_mask_mode == "bidirectional"
                                 ? MaskMode::bidirectional
                                 : MaskMode::causal;
  text = TextEncoder(config.text_width, config.joint_width, config.text_layers,
                     config.ffn_multiplier * config.text_width, config.n_heads,
                     vocab, config.max_positions, text_mode, rng);

  decoder = Decoder(config.llm_width, config.ffn_multiplier * config.llm_width,
                    config.decoder_layers, config.n_heads, vocab,
                    config.max_positions, rng);

  prompts.visual.clear();
  for (int i = 0; i < config.vision_prompt_depth; ++i)
    prompts.visual.push_back(Tensor(
        rng.normal_matrix(config.n_visual_prompts, config.vision_width, 0.02)));

  prompts.textual.clear();
  for (int i = 0; i < config.text_prompt_depth; ++i)
    prompts.textual.push_back(Tensor(
        rng.normal_matrix(config.n_text_prompts, config.text_width, 0.02)));
  if (config.text_prompt_depth > 0) {
    // First-layer context prompts start at the embedding of "A photo of a".
    const std::vector<int> ids = tokenizer.encode("A photo of a");
    Matrix& first = prompts.textual[0].mutable_value();
    const Eigen::Index n =
        std::min<Eigen::Index>(first.rows(), static_cast<Eigen::Index>(ids.size()));
    for (Eigen::Index i = 0; i < n; ++i)
      first.row(i) = text.tokens.table.value().row(ids[i]);
  }

  if (config.use_llm) {
    prompts.llm =
        Tensor(rng.normal_matrix(config.k_llm_prompts, config.llm_width, 0.02));
    projection = ProjectionHead(config.text_prompt_depth, config.text_width,
                                config.llm_width, config.k_llm_prompts, rng);
  } else {
    prompts.llm = Tensor();
    projection = ProjectionHead();
  }
}

ModelBundle ModelBundle::create(const ExperimentConfig& cfg,
                                const std::vector<ClassSpec>& classes,
                                const TemplateSet& templates) {
  ModelBundle b;
  b.config = cfg;
  b.templates = templates;
  b.tokenizer = Tokenizer::build(vocabulary_corpus(classes, templates));
  b.build_towers(b.tokenizer.vocabulary());
  return b;
}

NamedParams ModelBundle::named_parameters() const {
  NamedParams out;
  vision.collect_params("vision", out);
  text.collect_params("text", out);
  decoder.collect_params("decoder", out);
  prompts.collect_params(out);
  projection.collect_params("projection", out);
  return out;
}

ParamPartition ModelBundle::apply_trainable_groups(
    const TrainableGroupConfig& cfg) {
  // Freeze everything, then open exactly: the selected last-decoder-layer
  // groups, the projection heads, the prompt bank and the vision adapters.
  for (auto& [name, p] : named_parameters()) p.set_requires_grad(false);

  prompts.set_trainable(true, cfg.lp && config.use_llm);
  if (config.use_llm) projection.set_trainable(true);
  for (auto& layer : vision.layers) {
    for (LinearMap* m : {&layer.attn.q_proj, &layer.attn.v_proj})
      if (m->lora) {
        m->lora->down.set_requires_grad(true);
        m->lora->up.set_requires_grad(true);
      }
  }
  if (config.use_llm && !decoder.layers.empty()) {
    TransformerLayer& last = decoder.layers.back();
    if (cfg.qo) {
      last.attn.q_proj.weight.set_requires_grad(true);
      last.attn.o_proj.weight.set_requires_grad(true);
    }
    if (cfg.kv) {
      last.attn.k_proj.weight.set_requires_grad(true);
      last.attn.v_proj.weight.set_requires_grad(true);
    }
    if (cfg.ffn) {
      last.ffn_in.weight.set_requires_grad(true);
      if (last.ffn_in.bias.defined()) last.ffn_in.bias.set_requires_grad(true);
      last.ffn_out.weight.set_requires_grad(true);
      if (last.ffn_out.bias.defined()) last.ffn_out.bias.set_requires_grad(true);
    }
  }

  ParamPartition part;
  for (auto& [name, p] : named_parameters())
    (p.requires_grad() ? part.trainable : part.frozen).emplace_back(name, p);
  return part;
}

std::string ModelBundle::decoder_fingerprint() const {
  // Covers the vocabulary, the embeddings and every decoder layer below the
  // last one: the parts that pin down what a knowledge cache contains and
  // that no training configuration may touch. The last layer is excluded so
  // that optimizing its open groups does not orphan the run's caches (the
  // stage-1 caches stay authoritative for the whole run by design).
  NamedParams params;
  decoder.tokens.collect_params("decoder.tokens", params);
  decoder.positions.collect_params("decoder.positions", params);
  for (size_t i = 0; i + 1 < decoder.layers.size(); ++i)
    decoder.layers[i].collect_params("decoder." + decoder.layers[i].name,
                                     params);
  std::string acc;
  for (const auto& w : tokenizer.vocabulary()) {
    acc += w;
    acc.push_back('\0');
  }
  for (const auto& [name, p] : params) {
    acc += name;
    acc += matrix_sha256(p.value());
  }
  return sha256_hex(acc);
}

std::vector<std::pair<std::string, std::string>> ModelBundle::parameter_hashes()
    const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [name, p] : named_parameters())
    out.emplace_back(name, matrix_sha256(p.value()));
  return out;
}

std::string ModelBundle::model_hash() const {
  std::string acc;
  for (const auto& [name, h] : parameter_hashes()) {
    acc += name;
    acc += h;
  }
  return sha256_hex(acc);
}

Tensor ModelBundle::image_feature(const Matrix& patches) const {
  VisionInput input{patches};
  return vision.encode(input,
                       prompts.visual.empty() ? nullptr : &prompts.visual);
}

AdaptivePrompts ModelBundle::adaptive_prompts(const KnowledgeCache& cache) const {
  if (!config.use_llm)
    throw std::logic_error("adaptive_prompts: bridge disabled (use_llm=false)");
  return projection.project(decoder.encode_llm_prompts(cache, prompts.llm));
}

Tensor ModelBundle::class_feature(const ClassSpec& cls,
                                  const KnowledgeCache* cache) const {
  TokenSequence seq = make_token_sequence(tokenizer, cls.name);
  const std::vector<Tensor>* textual =
      prompts.textual.empty() ? nullptr : &prompts.textual;
  if (config.use_llm && cache) {
    AdaptivePrompts ap = adaptive_prompts(*cache);
    return text.encode(seq, textual, &ap);
  }
  return text.encode(seq, textual, nullptr);
}

Tensor ModelBundle::reference_image_feature(const Matrix& patches) const {
  LoraBypassGuard bypass;
  VisionInput input{patches};
  return vision.encode(input, nullptr);
}

Tensor ModelBundle::reference_text_feature(const std::string& sentence) const {
  TokenSequence seq = make_token_sequence(tokenizer, sentence);
  return text.encode(seq, nullptr, nullptr);
}

void ModelBundle::save_checkpoint(const std::filesystem::path& path) const {
  TensorArchive archive;
  for (const auto& [name, p] : named_parameters())
    archive.tensors.emplace_back(name, p.value());
  nlohmann::json meta;
  meta["config"] = config.to_json();
  meta["vocab"] = tokenizer.vocabulary();
  meta["llm_templates"] = templates.llm_templates;
  meta["clip_templates"] = templates.clip_templates;
  archive.meta_json = meta.dump();
  archive.save(path);
}

ModelBundle ModelBundle::load_checkpoint(const std::filesystem::path& path,
                                         const std::vector<ClassSpec>& classes,
                                         const TemplateSet& templates) {
  TensorArchive archive = TensorArchive::load(path);
  nlohmann::json meta = nlohmann::json::parse(archive.meta_json);

  ModelBundle b = create(ExperimentConfig::from_json(meta.at("config")),
                         classes, templates);
  const std::vector<std::string> vocab =
      meta.at("vocab").get<std::vector<std::string>>();
  if (vocab != b.tokenizer.vocabulary())
    throw std::runtime_error(
        "checkpoint vocabulary does not match the provided class/response "
        "set; evaluate against the world the model was trained with");

  NamedParams params = b.named_parameters();
  if (params.size() != archive.tensors.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != archive.tensors[i].first)
      throw std::runtime_error("checkpoint parameter order mismatch at '" +
                               archive.tensors[i].first + "'");
    if (params[i].second.value().rows() != archive.tensors[i].second.rows() ||
        params[i].second.value().cols() != archive.tensors[i].second.cols())
      throw std::runtime_error("checkpoint parameter shape mismatch at '" +
                               archive.tensors[i].first + "'");
    params[i].second.mutable_value() = archive.tensors[i].second;
  }
  return b;
}

}  // namespace llamp
