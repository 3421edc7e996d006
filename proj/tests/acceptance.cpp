// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Run through ctest or directly; pass criterion numbers as
// arguments to run a subset.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "llamp/cli.hpp"
#include "llamp/evaluation.hpp"
#include "llamp/gradcheck.hpp"
#include "llamp/serialize.hpp"
#include "llamp/training.hpp"
#include "test_world.hpp"

using namespace llamp;
namespace fs = std::filesystem;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Failure(what);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("llamp_accept_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Failure("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run_cli_vec(std::vector<std::string> args) {
  args.insert(args.begin(), "llamp");
  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

// ---------------------------------------------------------------------------
// 1. Two-stage cache equivalence across random toy decoders.

Matrix full_forward_injected(const Decoder& dec, const TokenSequence& seq,
                             const Matrix& prompts) {
  NoGradGuard ng;
  Tensor x = dec.embed(seq);
  for (size_t i = 0; i + 1 < dec.layers.size(); ++i)
    x = dec.layers[i].forward(x);
  Tensor inject = dec.prompt_inputs(Tensor(prompts), seq.total());
  Tensor out = dec.layers.back().forward(x, &inject);
  return out.value().bottomRows(prompts.rows());
}

std::string criterion_cache_equivalence() {
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(9001 + trial);
    const int widths[] = {16, 32, 64, 128};
    const int width = widths[trial % 4];
    const int layers = 2 + trial % 3;
    const int heads = (trial % 2) ? 4 : 2;
    Decoder dec(width, 2 * width, layers, heads, 24, 64, rng);
    TokenSequence seq{1, {}, 2};
    const int len = 3 + trial % 6;
    for (int i = 0; i < len; ++i)
      seq.inner.push_back(3 + static_cast<int>(rng.uniform_int(0, 20)));
    const int k = 1 + trial % 5;
    Matrix prompts = rng.normal_matrix(k, width, 0.8);

    KnowledgeCache cache = dec.build_knowledge_cache(seq);
    Matrix via_cache = dec.encode_llm_prompts(cache, Tensor(prompts)).value();
    Matrix via_full = full_forward_injected(dec, seq, prompts);
    worst = std::max(worst,
                     (via_cache - via_full).cwiseAbs().maxCoeff());
  }
  require(worst < 1e-6, "max abs diff " + fmt("%.3e", worst) + " >= 1e-6");
  return "20 decoders (2-4 layers, widths 16-128), max abs diff " +
         fmt("%.3e", worst);
}

// ---------------------------------------------------------------------------
// 2. Cache contents are independent of the learnable prompts, bit for bit.

std::string criterion_causal_independence() {
  Rng rng(777);
  Decoder dec(32, 64, 3, 4, 24, 64, rng);
  TokenSequence seq{1, {5, 9, 3, 12, 7}, 2};
  KnowledgeCache absent = dec.build_knowledge_cache(seq);
  for (int draw = 0; draw < 10; ++draw) {
    Matrix prompts = rng.normal_matrix(4, 32, 1.0);
    NoGradGuard ng;
    Tensor emb = dec.embed(seq);
    Tensor with_prompts = concat_rows(
        {emb, dec.prompt_inputs(Tensor(prompts), seq.total())});
    Tensor x = with_prompts;
    for (size_t i = 0; i + 1 < dec.layers.size(); ++i)
      x = dec.layers[i].forward(x);
    auto [k, v] = dec.layers.back().input_kv(x);
    KVCacheEntry present(dec.layers.back().attn.n_heads,
                         dec.layers.back().attn.head_dim);
    present.append(k.value().topRows(seq.total()),
                   v.value().topRows(seq.total()));
    present.freeze();
    require(absent.last_layer_kv.bit_identical(present),
            "draw " + std::to_string(draw) + ": cache bits differ");
  }
  return "10 prompt draws, caches bit-identical with prompts absent/present";
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradient suite over the trainable-group grid.

struct GradRig {
  World world;
  ModelBundle bundle;
  fs::path dir;
  CacheStore caches;
  std::vector<int> class_ids{0, 1};
  std::vector<int> samples;

  explicit GradRig(const std::string& groups)
      : world(fixtures::tiny_world()),
        bundle(ModelBundle::create(
            [&] {
              ExperimentConfig cfg = fixtures::tiny_config();
              cfg.groups = TrainableGroupConfig::parse(groups);
              return cfg;
            }(),
            world.classes, TemplateSet::builtin())),
        dir(fresh_dir("grad_" + groups)) {
    CacheStore::build(dir, bundle.decoder, bundle.tokenizer, bundle.templates,
                      world.classes, PriorMode::np,
                      bundle.config.active_template_ids(8),
                      bundle.decoder_fingerprint(), 1);
    caches = CacheStore::open(dir, bundle.decoder_fingerprint());
    for (size_t i = 0; i < world.train.items.size(); ++i)
      if (world.train.items[i].label_id <= 1)
        samples.push_back(static_cast<int>(i));
  }
  ~GradRig() { fs::remove_all(dir); }
};

std::string criterion_gradient_suite() {
  const std::vector<std::string> grid = {"lp", "lp,qo,kv", "lp,qo,ffn",
                                         "lp,qo,kv,ffn", "lp,qo"};
  double worst = 0;
  long coords = 0;
  for (const auto& groups : grid) {
    GradRig rig(groups);
    Trainer trainer(rig.bundle, &rig.caches, rig.world.train, rig.world.classes,
                    rig.class_ids, rig.samples,
                    rig.caches.template_ids());
    std::vector<Tensor> leaves;
    for (const auto& [name, p] : trainer.trainable()) leaves.push_back(p);
    auto fn = [&] { return trainer.batch_loss({0, 1, 4, 5}, 0).total; };
    GradCheckReport rep = finite_difference_check(fn, leaves, 1e-5);
    worst = std::max(worst, rep.max_rel_error);
    coords += rep.checked;
    require(rep.max_rel_error < 1e-3,
            "groups {" + groups + "}: max rel error " +
                fmt("%.3e", rep.max_rel_error) + " >= 1e-3");

    // Frozen groups show exactly zero analytic gradient.
    for (const auto& [name, p] : trainer.frozen()) p.zero_grad();
    backward(fn());
    const TrainableGroupConfig cfg = TrainableGroupConfig::parse(groups);
    const auto& last = rig.bundle.decoder.layers.back();
    auto zero = [&](const Tensor& t, const char* what) {
      require(t.grad().cwiseAbs().maxCoeff() == 0.0,
              "groups {" + groups + "}: " + what + " gradient not zero");
    };
    if (!cfg.qo) {
      zero(last.attn.q_proj.weight, "query projection");
      zero(last.attn.o_proj.weight, "output projection");
    }
    if (!cfg.kv) {
      zero(last.attn.k_proj.weight, "key projection");
      zero(last.attn.v_proj.weight, "value projection");
    }
    if (!cfg.ffn) {
      zero(last.ffn_in.weight, "ffn input");
      zero(last.ffn_out.weight, "ffn output");
    }
    for (const auto& layer : std::vector<const TransformerLayer*>{
             &rig.bundle.decoder.layers.front()}) {
      zero(layer->attn.q_proj.weight, "pre-final layer q");
      zero(layer->ffn_in.weight, "pre-final layer ffn");
    }
    zero(rig.bundle.decoder.tokens.table, "decoder embeddings");
  }
  return "5 group configs, " + std::to_string(coords) +
         " coordinates, max rel error " + fmt("%.3e", worst) +
         ", frozen groups exactly zero";
}

// ---------------------------------------------------------------------------
// 4. Fresh adapters are exact no-ops.

std::string criterion_lora_neutrality() {
  World world = fixtures::tiny_world();
  ExperimentConfig cfg = fixtures::tiny_config();
  cfg.vision_lora_from = cfg.vision_layers;  // start without adapters
  ModelBundle bundle =
      ModelBundle::create(cfg, world.classes, TemplateSet::builtin());

  std::vector<Matrix> before;
  for (int i = 0; i < 4; ++i)
    before.push_back(bundle.image_feature(world.train.items[i].patches).value());

  Rng rng(4242);
  bundle.vision.attach_lora(0, 2, rng);  // adapters on every layer
  double worst = 0;
  for (int i = 0; i < 4; ++i) {
    Matrix after = bundle.image_feature(world.train.items[i].patches).value();
    worst = std::max(worst, (after - before[i]).cwiseAbs().maxCoeff());
  }

  Rng rng2(11);
  LinearMap map("m", 24, 24, true, rng2);
  Matrix x = rng2.normal_matrix(5, 24, 1.0);
  Matrix base = map.forward(Tensor(x)).value();
  map.attach_lora(6, rng2);
  worst = std::max(worst,
                   (map.forward(Tensor(x)).value() - base).cwiseAbs().maxCoeff());

  require(worst == 0.0, "fresh adapters moved outputs by " + fmt("%.3e", worst));
  return "vision tower + standalone maps, max abs diff 0";
}

// ---------------------------------------------------------------------------
// 5. Metric arithmetic against the published accuracy triples.

struct Triple {
  double base, novel, hm;
};

std::string criterion_metric_arithmetic() {
  // Base-to-novel triples of the published comparison (9 methods x the
  // average plus 11 datasets).
  static const Triple rows[] = {
      {69.34, 74.22, 71.70}, {82.69, 63.22, 71.66}, {80.47, 71.69, 75.83},
      {78.41, 70.52, 74.26}, {81.56, 72.30, 76.65}, {82.28, 75.14, 78.55},
      {81.13, 75.00, 77.78}, {84.26, 76.10, 79.97}, {85.16, 77.71, 81.27},
      {72.43, 68.14, 70.22}, {76.47, 67.88, 71.92}, {75.98, 70.43, 73.10},
      {71.10, 65.20, 68.02}, {76.66, 70.54, 73.47}, {75.40, 70.32, 72.72},
      {76.60, 71.57, 74.00}, {77.60, 70.73, 74.01}, {77.99, 71.27, 74.48},
      {96.84, 94.00, 95.40}, {98.00, 89.81, 93.73}, {97.96, 93.81, 95.84},
      {97.10, 93.53, 95.28}, {97.74, 94.36, 96.02}, {98.27, 93.23, 95.68},
      {97.97, 94.37, 96.03}, {98.10, 94.03, 96.02}, {98.45, 95.85, 97.13},
      {91.17, 97.26, 94.12}, {93.67, 95.29, 94.47}, {95.20, 97.69, 96.43},
      {93.13, 96.53, 94.80}, {95.43, 97.76, 96.58}, {95.43, 97.83, 96.62},
      {94.63, 97.50, 96.05}, {95.33, 97.30, 96.30}, {96.31, 97.74, 97.02},
      {63.37, 74.89, 68.65}, {78.12, 60.40, 68.13}, {70.49, 73.59, 72.01},
      {69.47, 66.20, 67.79}, {72.94, 74.00, 73.47}, {74.70, 71.20, 72.91},
      {73.87, 75.53, 74.69}, {78.27, 74.97, 76.58}, {81.56, 74.54, 77.89},
      {72.08, 77.80, 74.83}, {97.60, 59.67, 74.06}, {94.87, 71.75, 81.71},
      {95.00, 71.20, 81.40}, {95.92, 72.46, 82.56}, {97.70, 68.68, 80.66},
      {94.13, 76.67, 84.50}, {98.07, 76.50, 85.95}, {97.82, 77.40, 86.42},
      {90.10, 91.22, 90.66}, {88.33, 82.26, 85.19}, {90.70, 91.29, 90.99},
      {86.13, 87.06, 86.59}, {90.71, 92.05, 91.38}, {90.30, 88.57, 89.43},
      {90.33, 90.83, 90.58}, {90.67, 91.53, 91.10}, {91.05, 91.93, 91.49},
      {27.19, 36.29, 31.09}, {40.44, 22.30, 28.75}, {33.41, 23.71, 27.74},
      {29.67, 28.73, 29.19}, {37.44, 35.61, 36.50}, {36.90, 34.13, 35.46},
      {37.33, 34.20, 35.70}, {42.73, 37.87, 40.15}, {47.30, 37.61, 41.90},
      {69.36, 75.35, 72.23}, {80.60, 65.89, 72.51}, {79.74, 76.86, 78.27},
      {79.40, 74.33, 76.78}, {80.82, 78.70, 79.75}, {78.47, 76.93, 77.79},
      {80.60, 77.80, 79.18}, {82.67, 78.47, 80.52}, {83.41, 79.90, 81.62},
      {53.24, 59.90, 56.37}, {79.44, 41.18, 54.24}, {77.01, 56.00, 64.85},
      {75.97, 58.30, 65.97}, {80.36, 59.18, 68.16}, {80.67, 56.48, 66.44},
      {76.70, 62.13, 68.61}, {83.37, 62.97, 71.75}, {83.49, 64.49, 72.77},
      {56.48, 64.05, 60.03}, {92.19, 54.74, 68.69}, {87.49, 60.04, 71.21},
      {84.80, 67.57, 75.21}, {94.07, 73.23, 82.35}, {83.90, 66.00, 73.88},
      {86.63, 68.97, 76.79}, {92.90, 73.90, 82.32}, {91.93, 83.66, 87.60},
      {70.53, 77.50, 73.85}, {84.69, 56.05, 67.46}, {82.33, 73.45, 77.64},
      {80.83, 67.10, 73.33}, {83.00, 78.66, 80.77}, {85.23, 71.97, 78.04},
      {83.67, 75.43, 79.34}, {87.10, 78.80, 82.74}, {87.13, 80.66, 83.77},
  };
  // Five published rows are internally inconsistent: their printed HM is
  // not the harmonic mean of their printed accuracies under any rounding.
  // They are pinned here and verified to be source inconsistencies rather
  // than implementation error.
  static const std::set<int> source_errata = {6, 14, 24, 77, 87};

  int consistent = 0;
  for (size_t i = 0; i < std::size(rows); ++i) {
    const double computed = harmonic_mean(rows[i].base, rows[i].novel);
    const double err = std::fabs(computed - rows[i].hm);
    if (source_errata.count(static_cast<int>(i))) {
      require(err > 0.01, "row " + std::to_string(i) +
                              " was pinned as a source erratum but verifies");
      continue;
    }
    require(err <= 0.01, "row " + std::to_string(i) + " (" +
                             fmt("%.2f", rows[i].base) + ", " +
                             fmt("%.2f", rows[i].novel) + "): computed " +
                             fmt("%.4f", computed) + " vs published " +
                             fmt("%.2f", rows[i].hm));
    ++consistent;
  }
  // The two triples named by the exit gate.
  require(std::fabs(harmonic_mean(84.26, 76.10) - 79.97) <= 0.01,
          "(84.26, 76.10) does not give 79.97");
  require(std::fabs(harmonic_mean(69.34, 74.22) - 71.70) <= 0.01,
          "(69.34, 74.22) does not give 71.70");
  return std::to_string(consistent) +
         "/108 published rows reproduced to +/-0.01; 5 rows are internally "
         "inconsistent in the source and pinned as such";
}

// ---------------------------------------------------------------------------
// 6. Loss identities.

std::string criterion_loss_identities() {
  Rng rng(31);
  Matrix f = rng.normal_matrix(4, 8, 1.0);
  Matrix g = rng.normal_matrix(3, 8, 1.0);
  const double l1 =
      loss_l1(Tensor(f), Tensor(Matrix(f)), Tensor(g), Tensor(Matrix(g)),
              LossWeights{10, 25, 2.5})
          .item();
  require(l1 == 0.0, "identical features gave L_l1 " + fmt("%.3e", l1));

  Matrix cos = rng.normal_matrix(4, 3, 1.0);
  const double dist =
      loss_dist(Tensor(cos), Tensor(Matrix(cos)), 2.5, 0.01).item();
  require(dist == 0.0, "identical logits gave L_dist " + fmt("%.3e", dist));

  Matrix fu = Matrix::Zero(3, 6);
  fu.col(0).setOnes();
  Matrix gu = Matrix::Zero(10, 6);
  gu.col(1).setOnes();
  const double ce = loss_ce(Tensor(fu), Tensor(gu), {0, 5, 9}, 0.37).item();
  require(std::fabs(ce - std::log(10.0)) < 1e-9,
          "uniform logits gave " + fmt("%.12f", ce) + " instead of ln 10");

  GradRig rig("lp,qo");
  Trainer trainer(rig.bundle, &rig.caches, rig.world.train, rig.world.classes,
                  rig.class_ids, rig.samples, rig.caches.template_ids());
  Trainer::BatchLoss loss = trainer.batch_loss({0, 1, 4, 5}, 0);
  const double gap = std::fabs(
      loss.total.item() - (loss.ce.item() + loss.l1.item() + loss.dist.item()));
  require(gap <= 1e-9, "total deviates from the sum of parts by " +
                           fmt("%.3e", gap));
  return "L_l1 = L_dist = 0 at the anchor, L_CE = ln C to 1e-9, additivity gap " +
         fmt("%.1e", gap);
}

// ---------------------------------------------------------------------------
// 7. Frozen tensors are bit-identical after 100 training steps.

std::string criterion_frozen_state() {
  GradRig rig("lp,qo");
  Trainer trainer(rig.bundle, &rig.caches, rig.world.train, rig.world.classes,
                  rig.class_ids, rig.samples, rig.caches.template_ids());

  std::map<std::string, std::string> frozen_before;
  for (const auto& [name, p] : trainer.frozen())
    frozen_before[name] = matrix_sha256(p.value());
  const std::string refs_img = matrix_sha256(trainer.references().image_features);
  const std::string refs_cls = matrix_sha256(trainer.references().class_features);
  std::map<std::pair<int, int>, std::string> cache_hashes;
  for (int c : rig.class_ids)
    for (int t : rig.caches.template_ids()) {
      const auto& e = rig.caches.get(c, t).last_layer_kv;
      cache_hashes[{c, t}] =
          matrix_sha256(e.keys()) + matrix_sha256(e.values());
    }

  std::vector<int> batch{0, 1, 4, 5};
  for (int step = 0; step < 100; ++step) trainer.train_step(batch, step);

  for (const auto& [name, p] : trainer.frozen())
    require(frozen_before.at(name) == matrix_sha256(p.value()),
            "frozen tensor changed: " + name);
  require(refs_img == matrix_sha256(trainer.references().image_features),
          "reference image features changed");
  require(refs_cls == matrix_sha256(trainer.references().class_features),
          "reference class features changed");
  for (int c : rig.class_ids)
    for (int t : rig.caches.template_ids()) {
      const auto& e = rig.caches.get(c, t).last_layer_kv;
      require(cache_hashes.at({c, t}) ==
                  matrix_sha256(e.keys()) + matrix_sha256(e.values()),
              "knowledge cache changed");
    }
  return std::to_string(frozen_before.size()) +
         " frozen tensors, references and caches bit-identical after 100 steps";
}

// ---------------------------------------------------------------------------
// 8. Mechanism efficacy at desk scale.

struct ArmResult {
  double novel = 0, hm = 0, base = 0;
};

// Both arms share one desk-scale budget: Adam at 2e-3 (adapters 2e-4) for
// 10 epochs with the distillation weight at zero. Without pretrained
// towers the distillation teacher is a random-init encoder pair, and at
// its stock weight (2.5 versus 1 for the task loss) its KL term makes
// teacher mimicry the optimum, capping both arms at chance. The feature
// anchors stay at their stock weights; the mechanism itself runs at its
// defaults (np priors, lp+qo, hybrid vision, 16 decoder prompts, full
// template set).
ArmResult run_arm(uint64_t seed, bool with_bridge, const fs::path& root) {
  SyntheticWorldConfig wcfg;
  wcfg.n_classes = 16;
  wcfg.n_attributes = 6;
  wcfg.attributes_per_class = 3;
  wcfg.patches = 6;
  wcfg.patch_width = 64;
  wcfg.noise_sigma = 0.3;
  wcfg.samples_per_class = 16;
  wcfg.eval_per_class = 24;
  wcfg.seed = 1000 + seed;
  World world = generate_world(wcfg, TemplateSet::builtin());

  ExperimentConfig cfg;  // mechanism at stock defaults
  cfg.model_seed = 100 + seed;
  cfg.train_seed = 200 + seed;
  cfg.use_llm = with_bridge;
  cfg.epochs = 10;
  cfg.optimizer = "adam";
  cfg.global_lr = 2e-3;
  cfg.lora_lr = 2e-4;
  cfg.lambda_dist = 0.0;
  cfg.resolve_vision_scheme();

  ModelBundle bundle =
      ModelBundle::create(cfg, world.classes, TemplateSet::builtin());

  std::optional<CacheStore> caches;
  const std::vector<int> template_ids = cfg.active_template_ids(
      static_cast<int>(bundle.templates.llm_templates.size()));
  if (with_bridge) {
    const fs::path dir = root / ("caches_" + std::to_string(seed));
    CacheStore::build(dir, bundle.decoder, bundle.tokenizer, bundle.templates,
                      world.classes, parse_prior_mode(cfg.prior), template_ids,
                      bundle.decoder_fingerprint(), 1);
    caches = CacheStore::open(dir, bundle.decoder_fingerprint());
  }

  SplitProtocol split = make_split(world.train.class_names, cfg.split_seed);
  std::vector<int> samples_all =
      few_shot_sample(world.train, cfg.shots, cfg.train_seed);
  std::vector<int> samples;
  for (int idx : samples_all)
    if (std::find(split.base_classes.begin(), split.base_classes.end(),
                  world.train.items[idx].label_id) != split.base_classes.end())
      samples.push_back(idx);

  Trainer trainer(bundle, caches ? &*caches : nullptr, world.train,
                  world.classes, split.base_classes, samples, template_ids);
  trainer.run();

  EvalReport report = run_base_to_novel(bundle, caches ? &*caches : nullptr,
                                        world.test, split, template_ids);
  return {report.novel_acc, report.hm, report.base_acc};
}

std::string criterion_mechanism_efficacy() {
  const fs::path root = fresh_dir("efficacy");
  double mean_novel[2] = {0, 0}, mean_hm[2] = {0, 0}, mean_base[2] = {0, 0};
  int positive_novel = 0, positive_hm = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    // The two arms are independent; overlap them on two threads.
    ArmResult with, without;
    std::thread bridged([&] { with = run_arm(seed, true, root); });
    without = run_arm(seed, false, root);
    bridged.join();
    mean_novel[0] += with.novel / 5;
    mean_novel[1] += without.novel / 5;
    mean_hm[0] += with.hm / 5;
    mean_hm[1] += without.hm / 5;
    mean_base[0] += with.base / 5;
    mean_base[1] += without.base / 5;
    if (with.novel > without.novel) ++positive_novel;
    if (with.hm > without.hm) ++positive_hm;
  }
  fs::remove_all(root);
  std::ostringstream detail;
  detail << "mean over 5 seeds: bridged novel " << fmt("%.2f", mean_novel[0])
         << " vs baseline " << fmt("%.2f", mean_novel[1]) << ", HM "
         << fmt("%.2f", mean_hm[0]) << " vs " << fmt("%.2f", mean_hm[1])
         << " (base " << fmt("%.2f", mean_base[0]) << " vs "
         << fmt("%.2f", mean_base[1]) << "; per-seed gaps positive "
         << positive_novel << "/5 novel, " << positive_hm << "/5 HM)";
  require(mean_novel[0] > mean_novel[1],
          "novel accuracy gap not positive: " + detail.str());
  require(mean_hm[0] > mean_hm[1],
          "harmonic mean gap not positive: " + detail.str());
  return detail.str();
}

// ---------------------------------------------------------------------------
// 9. Ensemble contract.

std::string criterion_ensemble() {
  GradRig rig("lp,qo");
  const std::vector<int> ids{0, 1, 2, 3};
  const std::vector<int> tids = rig.caches.template_ids();

  // Averaged distributions sum to one.
  NoGradGuard ng;
  double worst_sum_gap = 0;
  for (const auto& item : rig.world.test.items) {
    Eigen::VectorXd f =
        rig.bundle.image_feature(item.patches).value().row(0).transpose();
    Eigen::VectorXd avg = Eigen::VectorXd::Zero(4);
    for (int t : tids) {
      std::vector<Eigen::VectorXd> G;
      for (int cid : ids)
        G.push_back(rig.bundle
                        .class_feature(rig.world.classes[cid],
                                       &rig.caches.get(cid, t))
                        .value()
                        .row(0)
                        .transpose());
      avg += classify(f, G, rig.bundle.config.tau);
    }
    avg /= static_cast<double>(tids.size());
    worst_sum_gap = std::max(worst_sum_gap, std::fabs(avg.sum() - 1.0));
  }
  require(worst_sum_gap <= 1e-9,
          "averaged distribution sum off by " + fmt("%.3e", worst_sum_gap));

  // An ensemble of one reproduces single-template accuracy exactly.
  rig.bundle.config.ensemble = 1;
  EvalReport one = run_base_to_novel(rig.bundle, &rig.caches, rig.world.test,
                                     make_split(rig.world.test.class_names, 0),
                                     tids);
  SubsetEvalResult direct = evaluate_classes(
      rig.bundle, &rig.caches, rig.world.test,
      make_split(rig.world.test.class_names, 0).base_classes, {tids[0]});
  require(one.base_acc == direct.accuracy,
          "ensemble-of-one accuracy " + fmt("%.6f", one.base_acc) +
              " differs from single-template " + fmt("%.6f", direct.accuracy));
  return "distribution sums within " + fmt("%.1e", worst_sum_gap) +
         ", ensemble of one exact";
}

// ---------------------------------------------------------------------------
// 10. End-to-end determinism.

std::string criterion_determinism() {
  std::vector<std::string> reports;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path root = fresh_dir("det_" + std::to_string(rep));
    const fs::path world = root / "world";
    const fs::path caches = root / "caches";
    const fs::path run = root / "run";
    const fs::path cfg_path = root / "config.json";
    ExperimentConfig cfg = fixtures::tiny_config();
    cfg.epochs = 2;
    save_json_file(cfg_path, cfg.to_json());

    require(run_cli_vec({"gen-world", "--out", world.string(), "--n-classes",
                         "4", "--n-attributes", "4", "--attrs-per-class", "2",
                         "--patches", "4", "--patch-width", "16",
                         "--samples-per-class", "4", "--eval-per-class", "2",
                         "--seed", "3"}) == 0,
            "gen-world failed");
    require(run_cli_vec({"build-cache", "--world", world.string(), "--out",
                         caches.string(), "--config", cfg_path.string()}) == 0,
            "build-cache failed");
    require(run_cli_vec({"train", "--world", world.string(), "--caches",
                         caches.string(), "--run-dir", run.string(),
                         "--config", cfg_path.string()}) == 0,
            "train failed");
    require(run_cli_vec({"eval", "--world", world.string(), "--caches",
                         caches.string(), "--run-dir", run.string()}) == 0,
            "eval failed");
    reports.push_back(slurp(run / "report_b2n.json"));
    fs::remove_all(root);
  }
  require(reports[0] == reports[1], "report JSON bytes differ between runs");
  return "two full pipelines, report JSON byte-identical (" +
         std::to_string(reports[0].size()) + " bytes)";
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "cache-equivalence oracle", criterion_cache_equivalence},
      {2, "causal independence of the knowledge cache",
       criterion_causal_independence},
      {3, "gradient suite over trainable groups", criterion_gradient_suite},
      {4, "zero-init adapter neutrality", criterion_lora_neutrality},
      {5, "harmonic-mean arithmetic", criterion_metric_arithmetic},
      {6, "loss identities", criterion_loss_identities},
      {7, "frozen-state contract over 100 steps", criterion_frozen_state},
      {8, "mechanism efficacy at desk scale", criterion_mechanism_efficacy},
      {9, "ensemble contract", criterion_ensemble},
      {10, "end-to-end determinism", criterion_determinism},
  };

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    try {
      const std::string detail = c.run();
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
              .count();
      std::printf("[PASS] criterion %2d: %s — %s (%.1fs)\n", c.id, c.name,
                  detail.c_str(), secs);
    } catch (const std::exception& e) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
              .count();
      std::printf("[FAIL] criterion %2d: %s — %s (%.1fs)\n", c.id, c.name,
                  e.what(), secs);
      ++failures;
    }
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/%d criteria passed\n", ran - failures, ran);
  return failures == 0 ? 0 : 1;
}
