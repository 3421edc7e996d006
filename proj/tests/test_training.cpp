#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "llamp/gradcheck.hpp"
#include "llamp/training.hpp"
#include "test_world.hpp"

using namespace llamp;

namespace {

struct Rig {
  World world;
  ModelBundle bundle;
  std::filesystem::path cache_dir;
  CacheStore caches;

  explicit Rig(ExperimentConfig cfg = fixtures::tiny_config(),
               const char* tag = "rig")
      : world(fixtures::tiny_world()),
        bundle(ModelBundle::create(cfg, world.classes, TemplateSet::builtin())),
        cache_dir(std::filesystem::temp_directory_path() /
                  (std::string("llamp_train_") + tag)) {
    std::filesystem::remove_all(cache_dir);
    const std::vector<int> template_ids =
        cfg.active_template_ids(static_cast<int>(
            bundle.templates.llm_templates.size()));
    CacheStore::build(cache_dir, bundle.decoder, bundle.tokenizer,
                      bundle.templates, world.classes,
                      parse_prior_mode(cfg.prior), template_ids,
                      bundle.decoder_fingerprint(), 1);
    caches = CacheStore::open(cache_dir, bundle.decoder_fingerprint());
  }
  ~Rig() { std::filesystem::remove_all(cache_dir); }

  Trainer trainer(std::vector<int> class_ids = {0, 1, 2, 3}) {
    std::vector<int> samples;
    for (size_t i = 0; i < world.train.items.size(); ++i)
      if (std::find(class_ids.begin(), class_ids.end(),
                    world.train.items[i].label_id) != class_ids.end())
        samples.push_back(static_cast<int>(i));
    return Trainer(bundle, &caches, world.train, world.classes, class_ids,
                   samples, caches.template_ids());
  }
};

}  // namespace

TEST_CASE("loss_ce: uniform logits give ln C") {
  Matrix f = Matrix::Zero(3, 4);
  f.col(0).setOnes();
  Matrix g = Matrix::Zero(10, 4);
  g.col(1).setOnes();  // all classes identical -> uniform distribution
  Tensor loss = loss_ce(Tensor(f), Tensor(g), {0, 4, 9}, 0.5);
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("loss_ce: perfectly aligned sample against orthogonal classes") {
  const int C = 5;
  Matrix f = Matrix::Zero(1, C);
  f(0, 0) = 1.0;
  Matrix g = Matrix::Identity(C, C);  // class 0 == f, others orthogonal
  Tensor loss = loss_ce(Tensor(f), Tensor(g), {0}, 1.0);
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + (C - 1)));
  CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("loss_ce: permuting classes together with labels changes nothing") {
  Rng rng(1);
  Matrix f = rng.normal_matrix(4, 6, 1.0);
  Matrix g = rng.normal_matrix(3, 6, 1.0);
  const double a = loss_ce(Tensor(f), Tensor(g), {0, 2, 1, 0}, 0.1).item();
  Matrix gp(3, 6);
  gp.row(0) = g.row(2);
  gp.row(1) = g.row(0);
  gp.row(2) = g.row(1);
  // class k moved to position (k+1) % 3
  const double b = loss_ce(Tensor(f), Tensor(gp), {1, 0, 2, 1}, 0.1).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("loss_ce: label out of range") {
  Matrix f = Matrix::Ones(1, 2);
  Matrix g = Matrix::Ones(3, 2);
  CHECK_THROWS_AS(loss_ce(Tensor(f), Tensor(g), {3}, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(loss_ce(Tensor(f), Tensor(g), {-1}, 1.0),
                  std::invalid_argument);
}

TEST_CASE("loss_l1: zero at the anchor, hand value, linear in lambda") {
  LossWeights w{10.0, 25.0, 0.0};
  Matrix f(1, 2), fr(1, 2);
  f << 0.6, 0.8;
  fr = f;
  Matrix g = Matrix::Ones(2, 2), gr = Matrix::Ones(2, 2);
  CHECK(loss_l1(Tensor(f), Tensor(fr), Tensor(g), Tensor(gr), w).item() ==
        doctest::Approx(0.0));

  // |delta| = (0.1, 0.3) over 2 dims, lambda_v = 10, text term zero:
  // 10 * mean(0.1, 0.3) = 2.0
  Matrix f2(1, 2);
  f2 << 0.7, 1.1;
  const double v =
      loss_l1(Tensor(f2), Tensor(fr), Tensor(g), Tensor(gr), w).item();
  CHECK(v == doctest::Approx(2.0).epsilon(1e-12));

  LossWeights w2{20.0, 25.0, 0.0};
  CHECK(loss_l1(Tensor(f2), Tensor(fr), Tensor(g), Tensor(gr), w2).item() ==
        doctest::Approx(2.0 * v).epsilon(1e-12));
}

TEST_CASE("loss_dist: zero for identical rows, hand KL, nonnegative") {
  Matrix s(2, 3);
  s << 1.0, -0.5, 0.2, 0.0, 0.3, -0.1;
  CHECK(loss_dist(Tensor(s), Tensor(Matrix(s)), 2.5, 0.07).item() ==
        doctest::Approx(0.0));

  // P_s = (0.5, 0.5), P_t = (0.9, 0.1) at tau = 1 via log-probabilities.
  Matrix ls(1, 2), lt(1, 2);
  ls << std::log(0.5), std::log(0.5);
  lt << std::log(0.9), std::log(0.1);
  const double kl = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(loss_dist(Tensor(ls), Tensor(lt), 1.0, 1.0).item() ==
        doctest::Approx(kl).epsilon(1e-9));
  CHECK(kl == doctest::Approx(0.5108).epsilon(1e-3));
  CHECK(loss_dist(Tensor(ls), Tensor(lt), 2.5, 1.0).item() ==
        doctest::Approx(2.5 * kl).epsilon(1e-9));

  // Swapped argument order computes KL(P_t || P_s).
  const double kl_tf = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  CHECK(loss_dist(Tensor(ls), Tensor(lt), 1.0, 1.0, true).item() ==
        doctest::Approx(kl_tf).epsilon(1e-9));

  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    Matrix a = rng.normal_matrix(3, 4, 1.0);
    Matrix b = rng.normal_matrix(3, 4, 1.0);
    CHECK(loss_dist(Tensor(a), Tensor(b), 1.0, 0.5).item() >= -1e-12);
  }
}

TEST_CASE("loss_dist: non-finite logits are a numeric error") {
  Matrix s(1, 2);
  s << 1.0, std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(loss_dist(Tensor(s), Tensor(Matrix::Zero(1, 2)), 1.0, 1.0),
                  std::runtime_error);
}

TEST_CASE("sample_template_id: pure, in range, varies") {
  bool varied = false;
  for (int step = 0; step < 20; ++step) {
    const int a = sample_template_id(42, step, 8);
    const int b = sample_template_id(42, step, 8);
    CHECK(a == b);
    CHECK(a >= 0);
    CHECK(a < 8);
    if (a != sample_template_id(42, 0, 8)) varied = true;
  }
  CHECK(varied);
  CHECK(sample_template_id(42, 3, 1) == 0);
}

TEST_CASE("cosine_decay endpoints") {
  CHECK(cosine_decay(0, 100) == doctest::Approx(1.0));
  CHECK(cosine_decay(100, 100) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cosine_decay(50, 100) == doctest::Approx(0.5));
}

TEST_CASE("optimizer: rate groups and plain update rule") {
  Tensor w(Matrix::Ones(1, 2), true);
  Tensor lora(Matrix::Ones(1, 2), true);
  NamedParams params{{"layer.weight", w}, {"layer.lora_down", lora}};
  OptimizerConfig cfg;
  cfg.global_lr = 0.5;
  cfg.lora_lr = 0.1;
  Optimizer opt(params, cfg);
  w.grad();  // allocate
  lora.grad();
  w.node()->grad.setConstant(2.0);
  lora.node()->grad.setConstant(2.0);
  opt.step(1.0);
  CHECK(w.value()(0, 0) == doctest::Approx(1.0 - 0.5 * 2.0));
  CHECK(lora.value()(0, 0) == doctest::Approx(1.0 - 0.1 * 2.0));
  opt.zero_grad();
  CHECK(w.grad().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("reference features: plain towers, one and two caption averaging") {
  ExperimentConfig cfg = fixtures::tiny_config();
  cfg.vision_prompt_depth = 0;
  cfg.text_prompt_depth = 0;
  cfg.vision_lora_from = cfg.vision_layers;
  cfg.use_llm = false;
  cfg.ta1 = false;  // plain captions only
  World world = fixtures::tiny_world();
  ModelBundle bundle =
      ModelBundle::create(cfg, world.classes, TemplateSet::builtin());

  std::vector<int> samples{0, 1};
  std::vector<int> class_ids{0, 1};
  ReferenceFeatures refs = compute_reference_features(
      bundle, world.train, samples, world.classes, class_ids);

  // Without prompts or adapters the reference path equals the live path.
  Matrix live = bundle.image_feature(world.train.items[0].patches).value();
  CHECK((refs.image_features.row(0) - live.row(0)).cwiseAbs().maxCoeff() ==
        0.0);

  // Plain caption set has exactly one template, so g_ref is its encoding.
  Matrix enc = bundle
                   .reference_text_feature(render_template(
                       "A photo of [STH]", world.classes[0].name))
                   .value();
  CHECK((refs.class_features.row(0) - enc.row(0)).cwiseAbs().maxCoeff() ==
        0.0);

  // Two captions average in feature space, then renormalize.
  cfg.ta1 = true;
  cfg.prior = "np";
  ModelBundle bundle2 =
      ModelBundle::create(cfg, world.classes, TemplateSet::builtin());
  std::vector<ClassSpec> one_np = world.classes;
  one_np[0].noun_phrases = {one_np[0].noun_phrases.front()};
  ReferenceFeatures refs2 = compute_reference_features(
      bundle2, world.train, samples, one_np, {0});
  const auto captions = augment_clip_templates(one_np[0], bundle2.templates);
  REQUIRE(captions.size() == 2);
  Eigen::RowVectorXd mean =
      (bundle2.reference_text_feature(captions[0]).value().row(0) +
       bundle2.reference_text_feature(captions[1]).value().row(0)) /
      2.0;
  mean /= mean.norm();
  CHECK((refs2.class_features.row(0) - mean).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("train_step: deterministic, additive, frozen params untouched") {
  std::vector<BatchOutcome> outcomes;
  std::vector<std::pair<std::string, std::string>> hashes_before, hashes_after;
  for (int rep = 0; rep < 2; ++rep) {
    Rig rig(fixtures::tiny_config(), rep == 0 ? "det_a" : "det_b");
    Trainer trainer = rig.trainer();
    if (rep == 0) hashes_before = rig.bundle.parameter_hashes();
    BatchOutcome out = trainer.train_step({0, 1, 4, 5}, 0);
    outcomes.push_back(out);
    if (rep == 0) hashes_after = rig.bundle.parameter_hashes();

    if (rep == 0) {
      // Frozen tensors are bit-identical after the step.
      std::set<std::string> frozen_names;
      for (const auto& [name, p] : trainer.frozen()) frozen_names.insert(name);
      int changed_trainable = 0;
      for (size_t i = 0; i < hashes_before.size(); ++i) {
        REQUIRE(hashes_before[i].first == hashes_after[i].first);
        if (frozen_names.count(hashes_before[i].first)) {
          CHECK(hashes_before[i].second == hashes_after[i].second);
        } else if (hashes_before[i].second != hashes_after[i].second) {
          ++changed_trainable;
        }
      }
      CHECK(changed_trainable > 0);
    }
  }
  CHECK(outcomes[0].loss_total == outcomes[1].loss_total);
  CHECK(outcomes[0].loss_ce == outcomes[1].loss_ce);
  CHECK(outcomes[0].template_id == outcomes[1].template_id);
  CHECK(outcomes[0].loss_total ==
        doctest::Approx(outcomes[0].loss_ce + outcomes[0].loss_l1 +
                        outcomes[0].loss_dist)
            .epsilon(1e-9));
}

TEST_CASE("train_step: component recomputation oracle") {
  Rig rig(fixtures::tiny_config(), "recompute");
  Trainer trainer = rig.trainer();
  Trainer::BatchLoss loss = trainer.batch_loss({0, 1, 2}, 0);
  // Recompute the pieces from the stored logits and the reference data.
  CHECK(loss.total.item() == doctest::Approx(loss.ce.item() + loss.l1.item() +
                                             loss.dist.item())
                                 .epsilon(1e-12));
  CHECK(loss.logits.rows() == 3);
  CHECK(loss.logits.cols() == 4);
}

TEST_CASE("train_step: zero rates and zero weights change nothing") {
  ExperimentConfig cfg = fixtures::tiny_config();
  cfg.global_lr = 0.0;
  cfg.lora_lr = 0.0;
  cfg.lambda_v = 0.0;
  cfg.lambda_t = 0.0;
  cfg.lambda_dist = 0.0;
  Rig rig(cfg, "zero");
  const std::string before = rig.bundle.model_hash();
  Trainer trainer = rig.trainer();
  trainer.train_step({0, 1}, 0);
  CHECK(rig.bundle.model_hash() == before);
}

TEST_CASE("train_step: missing cache names the class and template") {
  Rig rig(fixtures::tiny_config(), "missing");
  std::vector<int> class_ids{0, 1, 2, 3};
  std::vector<int> samples{0, 1};
  Trainer trainer(rig.bundle, &rig.caches, rig.world.train, rig.world.classes,
                  class_ids, samples, {99});
  CHECK_THROWS_WITH_AS(trainer.train_step({0}, 0),
                       doctest::Contains("template 99"), std::runtime_error);
  CHECK_THROWS_WITH_AS(trainer.train_step({0}, 0),
                       doctest::Contains(rig.world.classes[0].name.c_str()),
                       std::runtime_error);
}

TEST_CASE("gradients: frozen decoder groups get exactly zero, open ones flow") {
  Rig rig(fixtures::tiny_config(), "flow");
  Trainer trainer = rig.trainer();
  Trainer::BatchLoss loss = trainer.batch_loss({0, 1, 4}, 0);
  backward(loss.total);

  const auto& last = rig.bundle.decoder.layers.back();
  const auto& first = rig.bundle.decoder.layers.front();
  // Default groups: query/output open, key/value frozen; everything in
  // earlier layers frozen; prompts and projections flowing.
  CHECK(last.attn.q_proj.weight.grad().cwiseAbs().maxCoeff() > 0.0);
  CHECK(last.attn.o_proj.weight.grad().cwiseAbs().maxCoeff() > 0.0);
  CHECK(last.attn.k_proj.weight.grad().cwiseAbs().maxCoeff() == 0.0);
  CHECK(last.attn.v_proj.weight.grad().cwiseAbs().maxCoeff() == 0.0);
  CHECK(first.attn.q_proj.weight.grad().cwiseAbs().maxCoeff() == 0.0);
  CHECK(rig.bundle.prompts.llm.grad().cwiseAbs().maxCoeff() > 0.0);
  CHECK(rig.bundle.projection.weights[0].grad().cwiseAbs().maxCoeff() > 0.0);
  // Zero-initialized up-matrix means the down-matrix gets no gradient on the
  // very first step; the up-matrix does.
  CHECK(rig.bundle.vision.layers.back()
            .attn.q_proj.lora->up.grad()
            .cwiseAbs()
            .maxCoeff() > 0.0);
  CHECK(rig.bundle.vision.layers.back()
            .attn.q_proj.lora->down.grad()
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("gradients: full objective passes finite differences at toy dims") {
  Rig rig(fixtures::tiny_config(), "fd");
  Trainer trainer = rig.trainer({0, 1});
  std::vector<Tensor> leaves;
  for (const auto& [name, p] : trainer.trainable()) leaves.push_back(p);
  auto fn = [&] { return trainer.batch_loss({0, 1, 4, 5}, 0).total; };
  GradCheckReport rep = finite_difference_check(fn, leaves, 1e-4);  // module contract: eps 1e-4
  CHECK(rep.checked > 1000);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("config: stock defaults, JSON round trip, unknown keys rejected") {
  ExperimentConfig cfg;
  CHECK(cfg.global_lr == 2e-4);
  CHECK(cfg.lora_lr == 2e-5);
  CHECK(cfg.batch_size == 8);
  CHECK(cfg.lambda_t == 25.0);
  CHECK(cfg.lambda_v == 10.0);
  CHECK(cfg.lambda_dist == 2.5);
  CHECK(cfg.tau == 0.01);
  CHECK(cfg.text_prompt_depth == 9);
  CHECK(cfg.vision_prompt_depth == 6);
  CHECK(cfg.vision_lora_from == 6);
  CHECK(cfg.k_llm_prompts == 16);
  CHECK(cfg.groups.lp);
  CHECK(cfg.groups.qo);
  CHECK_FALSE(cfg.groups.kv);
  CHECK_FALSE(cfg.groups.ffn);
  CHECK(cfg.prior == "np");

  ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());

  nlohmann::json j = cfg.to_json();
  j["no_such_knob"] = 1;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), std::invalid_argument);

  ExperimentConfig bad;
  bad.lambda_dist = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("first-layer context prompts start at the phrase embedding") {
  World world = fixtures::tiny_world();
  ExperimentConfig cfg = fixtures::tiny_config();
  cfg.n_text_prompts = 4;
  ModelBundle bundle =
      ModelBundle::create(cfg, world.classes, TemplateSet::builtin());
  const std::vector<int> ids = bundle.tokenizer.encode("A photo of a");
  REQUIRE(ids.size() == 4);
  const Matrix& table = bundle.text.tokens.table.value();
  const Matrix& first = bundle.prompts.textual[0].value();
  for (int i = 0; i < 4; ++i)
    CHECK((first.row(i) - table.row(ids[i])).cwiseAbs().maxCoeff() == 0.0);
  // Deeper layers are freshly initialized, not copies of the phrase.
  CHECK((bundle.prompts.textual[1].value() - first).cwiseAbs().maxCoeff() >
        1e-6);
}

TEST_CASE("trainer: full run writes a CSV and steps the schedule") {
  Rig rig(fixtures::tiny_config(), "run");
  Trainer trainer = rig.trainer();
  std::ostringstream csv;
  int steps_seen = 0;
  trainer.run(&csv, [&](int, const BatchOutcome&) { ++steps_seen; });
  CHECK(steps_seen == trainer.total_steps());
  const std::string text = csv.str();
  CHECK(text.find("loss_total") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') ==
        trainer.total_steps() + 1);
}
