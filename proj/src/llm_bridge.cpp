#include "llamp/llm_bridge.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "llamp/serialize.hpp"

namespace llamp {

ProjectionHead::ProjectionHead(int depth, int d_text, int d_llm, int k_prompts,
                               Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d_llm));
  for (int i = 0; i < depth; ++i) {
    weights.push_back(Tensor(rng.normal_matrix(d_text, d_llm, s)));
    biases.push_back(Tensor(Matrix::Zero(k_prompts, d_text)));
  }
}

AdaptivePrompts ProjectionHead::project(const Tensor& states) const {
  AdaptivePrompts out;
  out.states = states;
  out.per_layer.reserve(weights.size());
  for (size_t i = 0; i < weights.size(); ++i) {
    if (states.cols() != weights[i].cols())
      throw std::invalid_argument(
          "ProjectionHead: state width " + std::to_string(states.cols()) +
          " does not match projection d_llm " +
          std::to_string(weights[i].cols()));
    if (states.rows() != biases[i].rows())
      throw std::invalid_argument(
          "ProjectionHead: prompt count " + std::to_string(states.rows()) +
          " does not match bias rows " + std::to_string(biases[i].rows()));
    out.per_layer.push_back(matmul(states, transpose(weights[i])) + biases[i]);
  }
  return out;
}

void ProjectionHead::set_trainable(bool flag) {
  for (auto& w : weights) w.set_requires_grad(flag);
  for (auto& b : biases) b.set_requires_grad(flag);
}

void ProjectionHead::collect_params(const std::string& prefix,
                                    NamedParams& out) const {
  for (size_t i = 0; i < weights.size(); ++i) {
    out.emplace_back(prefix + ".layer" + std::to_string(i) + ".weight",
                     weights[i]);
    out.emplace_back(prefix + ".layer" + std::to_string(i) + ".bias",
                     biases[i]);
  }
}

AdaptivePrompts project_prompts(const Tensor& states,
                                const ProjectionHead& head) {
  return head.project(states);
}

TrainableGroupConfig TrainableGroupConfig::parse(const std::string& csv) {
  TrainableGroupConfig cfg{false, false, false, false};
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::string t;
    for (char c : item)
      if (!std::isspace(static_cast<unsigned char>(c)))
        t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (t.empty()) continue;
    if (t == "lp") cfg.lp = true;
    else if (t == "qo") cfg.qo = true;
    else if (t == "kv") cfg.kv = true;
    else if (t == "ffn") cfg.ffn = true;
    else throw std::invalid_argument("unknown trainable group '" + t +
                                     "' (expected lp, qo, kv, ffn)");
  }
  return cfg;
}

std::string TrainableGroupConfig::to_string() const {
  std::string s;
  auto add = [&s](const char* g) {
    if (!s.empty()) s += ",";
    s += g;
  };
  if (lp) add("lp");
  if (qo) add("qo");
  if (kv) add("kv");
  if (ffn) add("ffn");
  return s;
}

Decoder::Decoder(int width, int ffn_hidden, int n_layers, int n_heads,
                 int vocab, int max_positions, Rng& rng)
    : tokens(vocab, width, rng), positions(max_positions, width, rng) {
  layers.reserve(n_layers);
  for (int i = 0; i < n_layers; ++i)
    layers.emplace_back("decoder.layer" + std::to_string(i), width, ffn_hidden,
                        n_heads, MaskMode::causal, rng);
}

Tensor Decoder::embed(const TokenSequence& seq) const {
  const std::vector<int> ids = seq.full_ids();
  Tensor e = tokens.lookup(ids);
  return e + positions.lookup_range(0, static_cast<int>(ids.size()));
}

KnowledgeCache Decoder::build_knowledge_cache(const TokenSequence& seq,
                                              bool keep_all_layers) const {
  if (seq.length() < 1)
    throw std::invalid_argument("build_knowledge_cache: empty token sequence");
  NoGradGuard ng;  // stage 1 is always a frozen evaluation pass
  KnowledgeCache out;
  out.token_length = seq.total();
  if (keep_all_layers) out.all_layers.emplace();

  Tensor x = embed(seq);
  const int n_heads = layers.front().attn.n_heads;
  const int head_dim = layers.front().attn.head_dim;
  for (size_t i = 0; i < layers.size(); ++i) {
    const bool last = i + 1 == layers.size();
    if (keep_all_layers || last) {
      auto [k, v] = layers[i].input_kv(x);
      KVCacheEntry e(n_heads, head_dim);
      e.append(k.value(), v.value());
      e.freeze();
      if (keep_all_layers) out.all_layers->push_back(e);
      if (last) out.last_layer_kv = std::move(e);
    }
    if (!last) x = layers[i].forward(x);
  }
  return out;
}

Tensor Decoder::prompt_inputs(const Tensor& llm_prompts, int token_total) const {
  if (llm_prompts.cols() != width())
    throw std::invalid_argument("prompt_inputs: prompt width " +
                                std::to_string(llm_prompts.cols()) +
                                " does not match decoder width " +
                                std::to_string(width()));
  const int k = static_cast<int>(llm_prompts.rows());
  if (token_total + k > positions.table.rows())
    throw std::invalid_argument("prompt_inputs: positions " +
                                std::to_string(token_total + k) +
                                " exceed position table size " +
                                std::to_string(positions.table.rows()));
  return llm_prompts + positions.lookup_range(token_total, k);
}

Tensor Decoder::encode_llm_prompts(const KnowledgeCache& cache,
                                   const Tensor& llm_prompts) const {
  if (cache.last_layer_kv.length() != cache.token_length)
    throw std::invalid_argument("encode_llm_prompts: cache length " +
                                std::to_string(cache.last_layer_kv.length()) +
                                " disagrees with token length " +
                                std::to_string(cache.token_length));
  Tensor in = prompt_inputs(llm_prompts, cache.token_length);
  return layers.back().forward(in, nullptr, &cache.last_layer_kv);
}

void Decoder::collect_params(const std::string& prefix,
                             NamedParams& out) const {
  tokens.collect_params(prefix + ".tokens", out);
  positions.collect_params(prefix + ".positions", out);
  for (const auto& l : layers) l.collect_params(prefix + "." + l.name, out);
}

namespace {

std::string cache_file_name(int class_id, int template_id) {
  return "cls" + std::to_string(class_id) + "_t" + std::to_string(template_id) +
         ".lkvc";
}

}  // namespace

void CacheStore::build(const std::filesystem::path& dir, const Decoder& decoder,
                       const Tokenizer& tok, const TemplateSet& templates,
                       const std::vector<ClassSpec>& classes, PriorMode prior,
                       const std::vector<int>& template_ids,
                       const std::string& fingerprint, int jobs) {
  std::filesystem::create_directories(dir);

  struct Task {
    const ClassSpec* cls;
    int template_id;
  };
  std::vector<Task> tasks;
  for (const auto& c : classes)
    for (int t : template_ids) tasks.push_back({&c, t});

  std::vector<int> token_lengths(tasks.size(), 0);
  auto run_task = [&](size_t idx) {
    const Task& task = tasks[idx];
    TokenSequence seq =
        build_llm_input(*task.cls, task.template_id, prior, templates, tok);
    KnowledgeCache cache = decoder.build_knowledge_cache(seq);
    cache.last_layer_kv.save(dir / cache_file_name(task.cls->label_id,
                                                   task.template_id));
    token_lengths[idx] = cache.token_length;
  };

  jobs = std::max(1, jobs);
  if (jobs == 1) {
    for (size_t i = 0; i < tasks.size(); ++i) run_task(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w)
      pool.emplace_back([&] {
        for (size_t i = next++; i < tasks.size(); i = next++) run_task(i);
      });
    for (auto& th : pool) th.join();
  }

  nlohmann::json manifest;
  manifest["fingerprint"] = fingerprint;
  manifest["prior"] = prior_mode_name(prior);
  manifest["template_ids"] = template_ids;
  nlohmann::json entries = nlohmann::json::array();
  for (size_t i = 0; i < tasks.size(); ++i)
    entries.push_back({{"class_id", tasks[i].cls->label_id},
                       {"class_name", tasks[i].cls->name},
                       {"template_id", tasks[i].template_id},
                       {"token_length", token_lengths[i]},
                       {"file", cache_file_name(tasks[i].cls->label_id,
                                                tasks[i].template_id)}});
  manifest["entries"] = entries;
  save_json_file(dir / "manifest.json", manifest);
}

CacheStore CacheStore::open(const std::filesystem::path& dir,
                            const std::string& expected_fingerprint) {
  nlohmann::json manifest = load_json_file(dir / "manifest.json");
  CacheStore store;
  store.fingerprint_ = manifest.at("fingerprint");
  if (store.fingerprint_ != expected_fingerprint)
    throw std::runtime_error(
        "cache store fingerprint mismatch: store was built with decoder " +
        store.fingerprint_.substr(0, 12) + "..., current decoder is " +
        expected_fingerprint.substr(0, 12) + "...");
  store.prior_ = parse_prior_mode(manifest.at("prior"));
  store.template_ids_ = manifest.at("template_ids").get<std::vector<int>>();
  for (const auto& e : manifest.at("entries")) {
    KnowledgeCache cache;
    cache.class_id = e.at("class_id");
    cache.template_id = e.at("template_id");
    cache.token_length = e.at("token_length");
    cache.last_layer_kv =
        KVCacheEntry::load(dir / e.at("file").get<std::string>());
    store.caches_[{cache.class_id, cache.template_id}] = std::move(cache);
  }
  return store;
}

bool CacheStore::has(int class_id, int template_id) const {
  return caches_.count({class_id, template_id}) > 0;
}

const KnowledgeCache& CacheStore::get(int class_id, int template_id) const {
  auto it = caches_.find({class_id, template_id});
  if (it == caches_.end())
    throw std::runtime_error("missing knowledge cache for class " +
                             std::to_string(class_id) + ", template " +
                             std::to_string(template_id));
  return it->second;
}

}  // namespace llamp
