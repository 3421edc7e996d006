#include "llamp/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "llamp/data_io.hpp"
#include "llamp/evaluation.hpp"
#include "llamp/model.hpp"
#include "llamp/serialize.hpp"
#include "llamp/training.hpp"

namespace llamp {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

std::string join_args(int argc, const char* const* argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

fs::path default_run_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("LLAMP_RUN_DIR")) return env;
  throw UsageError("no run directory: pass --run-dir or set LLAMP_RUN_DIR");
}

TemplateSet load_templates(const std::string& override_path) {
  return override_path.empty() ? TemplateSet::builtin()
                               : TemplateSet::from_json_file(override_path);
}

std::string normalize_vision_scheme(std::string s) {
  if (s == "hybrid6+6") s = "hybrid";
  if (s != "hybrid" && s != "prompt9" && s != "lora12" && s != "custom")
    throw UsageError("unknown vision scheme '" + s +
                     "' (expected hybrid6+6, prompt9, lora12)");
  return s;
}

// Configuration assembly shared by build-cache / train / eval: built-in
// defaults, then the config file, then explicitly passed flags.
struct ConfigFlags {
  CLI::App* cmd = nullptr;
  std::string config_path;
  uint64_t model_seed = 17;
  uint64_t train_seed = 1;
  int epochs = 20;
  double lr = 2e-4;
  double lora_lr = 2e-5;
  int batch_size = 8;
  bool no_llm = false;
  std::string groups = "lp,qo";
  std::string prior = "np";
  std::string vision = "hybrid";
  int k_prompts = 16;
  bool ta1 = true;
  bool ta2 = true;
  bool kl_teacher_first = false;
  std::string optimizer = "sgd";
  double momentum = 0.0;
  int shots = 16;
  std::string split = "sorted";
  uint64_t split_seed = 0;
  int ensemble = 0;

  void attach(CLI::App* sub) {
    cmd = sub;
    sub->add_option("--config", config_path, "experiment config JSON file");
    sub->add_option("--model-seed", model_seed, "model initialization seed");
    sub->add_option("--seed", train_seed, "training seed");
    sub->add_option("--epochs", epochs, "training epochs");
    sub->add_option("--lr", lr, "global learning rate");
    sub->add_option("--lora-lr", lora_lr, "adapter learning rate");
    sub->add_option("--batch-size", batch_size, "batch size");
    sub->add_flag("--no-llm", no_llm, "disable the language-model bridge");
    sub->add_option("--groups", groups,
                    "trainable last-decoder-layer groups (csv of lp,qo,kv,ffn)");
    sub->add_option("--prior", prior, "textual prior mode: none|plain|np");
    sub->add_option("--vision", vision,
                    "vision tuning scheme: hybrid6+6|prompt9|lora12");
    sub->add_option("--k-prompts", k_prompts, "number of decoder prompts");
    sub->add_flag("--ta1,!--no-ta1", ta1,
                  "noun-phrase-augmented caption templates");
    sub->add_flag("--ta2,!--no-ta2", ta2, "use the full query-template set");
    sub->add_flag("--kl-teacher-first", kl_teacher_first,
                  "swap the KL argument order in the distillation loss");
    sub->add_option("--optimizer", optimizer, "sgd|adam");
    sub->add_option("--momentum", momentum, "sgd momentum");
    sub->add_option("--shots", shots, "shots per class");
    sub->add_option("--split", split, "base/novel split rule: sorted|random");
    sub->add_option("--split-seed", split_seed, "seed for the random split");
    sub->add_option("--ensemble", ensemble,
                    "templates in the inference ensemble (0 = all)");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    if (!config_path.empty())
      cfg = ExperimentConfig::from_json(load_json_file(config_path));
    auto set = [&](const char* flag, auto& field, const auto& value) {
      if (cmd->count(flag) > 0) field = value;
    };
    set("--model-seed", cfg.model_seed, model_seed);
    set("--seed", cfg.train_seed, train_seed);
    set("--epochs", cfg.epochs, epochs);
    set("--lr", cfg.global_lr, lr);
    set("--lora-lr", cfg.lora_lr, lora_lr);
    set("--batch-size", cfg.batch_size, batch_size);
    if (cmd->count("--no-llm") > 0) cfg.use_llm = !no_llm;
    if (cmd->count("--groups") > 0)
      cfg.groups = TrainableGroupConfig::parse(groups);
    set("--prior", cfg.prior, prior);
    if (cmd->count("--vision") > 0) {
      cfg.vision_scheme = normalize_vision_scheme(vision);
      cfg.resolve_vision_scheme();
    }
    set("--k-prompts", cfg.k_llm_prompts, k_prompts);
    if (cmd->count("--ta1") > 0 || cmd->count("--no-ta1") > 0) cfg.ta1 = ta1;
    if (cmd->count("--ta2") > 0 || cmd->count("--no-ta2") > 0) cfg.ta2 = ta2;
    if (cmd->count("--kl-teacher-first") > 0)
      cfg.kl_teacher_first = kl_teacher_first;
    set("--optimizer", cfg.optimizer, optimizer);
    set("--momentum", cfg.momentum, momentum);
    set("--shots", cfg.shots, shots);
    set("--split", cfg.split, split);
    set("--split-seed", cfg.split_seed, split_seed);
    set("--ensemble", cfg.ensemble, ensemble);
    parse_prior_mode(cfg.prior);
    if (cfg.split != "sorted" && cfg.split != "random")
      throw UsageError("--split must be sorted or random");
    return cfg;
  }
};

World load_world_with_overrides(const std::string& world_path,
                                const std::string& responses_override) {
  World world = load_world(world_path);
  if (!responses_override.empty()) {
    world.responses = load_response_store(responses_override);
    attach_responses(world.classes, world.responses);
  }
  return world;
}

int cmd_gen_world(const std::string& out, const SyntheticWorldConfig& cfg,
                  const std::string& templates_path, bool force) {
  if (cfg.n_classes < 2)
    throw UsageError("--n-classes must be >= 2 (the split protocols need "
                     "both a base and a novel side)");
  const fs::path root = out;
  if (!force && fs::exists(root / "manifest.json")) {
    std::cout << "world already exists at " << root
              << " (use --force to regenerate)\n";
    return 0;
  }
  TemplateSet templates = load_templates(templates_path);
  World world = generate_world(cfg, templates);
  save_world(world, root);
  std::cout << "wrote world with " << cfg.n_classes << " classes to " << root
            << "\n";
  return 0;
}

int cmd_gen_responses(const std::string& world_path,
                      const std::string& templates_path, bool force) {
  const fs::path root = world_path;
  const fs::path store = root / "responses.jsonl";
  if (!force && fs::exists(store)) {
    std::cout << "response store already exists at " << store
              << " (use --force to regenerate)\n";
    return 0;
  }
  nlohmann::json manifest = load_json_file(root / "manifest.json");
  std::vector<std::string> names;
  std::vector<std::vector<int>> attrs;
  for (const auto& c : manifest.at("classes")) {
    names.push_back(c.at("name"));
    attrs.push_back(c.at("attributes").get<std::vector<int>>());
  }
  const auto attribute_names =
      manifest.at("attribute_names").get<std::vector<std::string>>();
  TemplateSet templates = load_templates(templates_path);
  RuleBasedExtractor extractor;
  save_response_store(store, generate_stub_responses(names, attrs,
                                                     attribute_names, templates,
                                                     extractor));
  std::cout << "wrote response store to " << store << "\n";
  return 0;
}

int cmd_build_cache(const std::string& world_path, const std::string& out,
                    const ConfigFlags& flags, const std::string& templates_path,
                    const std::string& responses_path, int jobs, bool force) {
  const fs::path dir = out;
  if (!force && fs::exists(dir / "manifest.json")) {
    std::cout << "cache store already exists at " << dir
              << " (use --force to rebuild)\n";
    return 0;
  }
  ExperimentConfig cfg = flags.resolve();
  TemplateSet templates = load_templates(templates_path);
  World world = load_world_with_overrides(world_path, responses_path);
  ModelBundle bundle = ModelBundle::create(cfg, world.classes, templates);
  const std::vector<int> template_ids = cfg.active_template_ids(
      static_cast<int>(templates.llm_templates.size()));
  CacheStore::build(dir, bundle.decoder, bundle.tokenizer, templates,
                    world.classes, parse_prior_mode(cfg.prior), template_ids,
                    bundle.decoder_fingerprint(), jobs);
  std::cout << "wrote " << world.classes.size() * template_ids.size()
            << " knowledge caches to " << dir << "\n";
  return 0;
}

int cmd_train(const std::string& world_path, const std::string& caches_path,
              const std::string& run_dir_flag, const ConfigFlags& flags,
              const std::string& templates_path,
              const std::string& responses_path, const std::string& protocol,
              bool force, const std::string& command_line) {
  if (protocol != "b2n" && protocol != "fewshot")
    throw UsageError("--protocol must be b2n or fewshot");
  const fs::path run_dir = default_run_dir(run_dir_flag);
  fs::create_directories(run_dir);
  const fs::path ckpt = run_dir / "checkpoint.ltar";
  if (!force && fs::exists(ckpt)) {
    std::cout << "checkpoint already exists at " << ckpt
              << " (use --force to retrain)\n";
    return 0;
  }

  ExperimentConfig cfg = flags.resolve();
  TemplateSet templates = load_templates(templates_path);
  World world = load_world_with_overrides(world_path, responses_path);
  ModelBundle bundle = ModelBundle::create(cfg, world.classes, templates);

  std::optional<CacheStore> caches;
  if (cfg.use_llm) {
    if (caches_path.empty())
      throw UsageError("--caches is required unless --no-llm is set");
    caches = CacheStore::open(caches_path, bundle.decoder_fingerprint());
  }

  std::vector<int> class_ids;
  if (protocol == "b2n") {
    SplitProtocol split = make_split(world.train.class_names, cfg.split_seed,
                                     cfg.split == "random");
    class_ids = split.base_classes;
  } else {
    for (size_t i = 0; i < world.train.class_names.size(); ++i)
      class_ids.push_back(static_cast<int>(i));
  }

  std::vector<int> shots_all =
      few_shot_sample(world.train, cfg.shots, cfg.train_seed);
  std::vector<int> sample_indices;
  for (int idx : shots_all) {
    const int label = world.train.items[idx].label_id;
    if (std::find(class_ids.begin(), class_ids.end(), label) != class_ids.end())
      sample_indices.push_back(idx);
  }

  const std::vector<int> template_ids = cfg.active_template_ids(
      static_cast<int>(templates.llm_templates.size()));

  // The manifest is written before the first step and not touched again.
  nlohmann::json manifest;
  manifest["config"] = cfg.to_json();
  manifest["command_line"] = command_line;
  manifest["timestamp"] = timestamp_utc();
  manifest["world"] = world_path;
  manifest["caches"] = caches_path;
  manifest["protocol"] = protocol;
  manifest["trained_class_ids"] = class_ids;
  manifest["n_train_samples"] = sample_indices.size();
  manifest["model_init_hash"] = bundle.model_hash();
  manifest["decoder_fingerprint"] = bundle.decoder_fingerprint();
  manifest["template_ids"] = template_ids;
  save_json_file(run_dir / "manifest.json", manifest);

  Trainer trainer(bundle, caches ? &*caches : nullptr, world.train,
                  world.classes, class_ids, sample_indices, template_ids);
  std::ofstream csv(run_dir / "losses.csv");
  trainer.run(&csv);
  csv.close();

  bundle.save_checkpoint(ckpt);
  std::cout << "trained " << trainer.total_steps() << " steps over "
            << sample_indices.size() << " samples; checkpoint at " << ckpt
            << "\n";
  return 0;
}

int cmd_eval(const std::string& world_path, const std::string& caches_path,
             const std::string& run_dir_flag, const std::string& checkpoint,
             const ConfigFlags& flags, const std::string& templates_path,
             const std::string& responses_path, const std::string& protocol,
             const std::string& out_path, bool force) {
  if (protocol != "b2n" && protocol != "fewshot")
    throw UsageError("--protocol must be b2n or fewshot");
  const fs::path run_dir = default_run_dir(
      run_dir_flag.empty() && !checkpoint.empty() ? "." : run_dir_flag);
  const fs::path ckpt =
      checkpoint.empty() ? run_dir / "checkpoint.ltar" : fs::path(checkpoint);
  const fs::path report_path =
      out_path.empty() ? run_dir / ("report_" + protocol + ".json")
                       : fs::path(out_path);
  if (!force && fs::exists(report_path)) {
    std::cout << "report already exists at " << report_path
              << " (use --force to re-evaluate)\n";
    return 0;
  }

  TemplateSet templates = load_templates(templates_path);
  World world = load_world_with_overrides(world_path, responses_path);
  ModelBundle bundle =
      ModelBundle::load_checkpoint(ckpt, world.classes, templates);

  // Evaluation-time knobs may override what the checkpoint carries.
  if (flags.cmd->count("--ensemble") > 0) bundle.config.ensemble = flags.ensemble;
  if (flags.cmd->count("--split") > 0) bundle.config.split = flags.split;
  if (flags.cmd->count("--split-seed") > 0)
    bundle.config.split_seed = flags.split_seed;

  std::optional<CacheStore> caches;
  if (bundle.config.use_llm)
    caches = CacheStore::open(caches_path, bundle.decoder_fingerprint());

  const std::vector<int> template_ids = bundle.config.active_template_ids(
      static_cast<int>(templates.llm_templates.size()));

  EvalReport report;
  if (protocol == "b2n") {
    SplitProtocol split =
        make_split(world.test.class_names, bundle.config.split_seed,
                   bundle.config.split == "random");
    report = run_base_to_novel(bundle, caches ? &*caches : nullptr, world.test,
                               split, template_ids);
  } else {
    report = run_few_shot_eval(bundle, caches ? &*caches : nullptr, world.test,
                               template_ids);
  }

  std::ofstream os(report_path);
  if (!os)
    throw std::runtime_error("cannot write report: " + report_path.string());
  os << report.to_json().dump(2) << "\n";
  os.close();
  std::cout << report.render_table();
  std::cout << "report written to " << report_path << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& paths) {
  if (paths.empty()) throw UsageError("report: need at least one report file");
  std::vector<std::pair<std::string, EvalReport>> reports;
  for (const auto& p : paths)
    reports.emplace_back(p, EvalReport::from_json(load_json_file(p)));

  std::cout << std::left;
  std::printf("%-40s %8s %8s %8s\n", "run", "Base", "Novel", "HM");
  for (const auto& [path, r] : reports)
    std::printf("%-40s %8.2f %8.2f %8.2f\n", path.c_str(), round2(r.base_acc),
                round2(r.novel_acc), round2(r.hm));
  if (reports.size() > 1) {
    const EvalReport& first = reports.front().second;
    for (size_t i = 1; i < reports.size(); ++i) {
      const EvalReport& r = reports[i].second;
      std::printf("%-40s %+8.2f %+8.2f %+8.2f\n",
                  ("delta vs " + reports.front().first).c_str(),
                  round2(r.base_acc - first.base_acc),
                  round2(r.novel_acc - first.novel_acc),
                  round2(r.hm - first.hm));
    }
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"llamp: language-model-guided prompt learning for a dual "
               "encoder, at desk scale"};
  app.require_subcommand(1);
  const std::string command_line = join_args(argc, argv);

  // gen-world
  auto* gen = app.add_subcommand("gen-world", "generate a synthetic world");
  std::string gen_out;
  SyntheticWorldConfig wcfg;
  std::string gen_templates;
  bool gen_force = false;
  gen->add_option("--out", gen_out, "world directory")->required();
  gen->add_option("--n-classes", wcfg.n_classes, "number of classes");
  gen->add_option("--n-attributes", wcfg.n_attributes, "attribute pool size");
  gen->add_option("--attrs-per-class", wcfg.attributes_per_class,
                  "attributes per class");
  gen->add_option("--patches", wcfg.patches, "patches per image");
  gen->add_option("--patch-width", wcfg.patch_width, "patch embedding width");
  gen->add_option("--noise-sigma", wcfg.noise_sigma, "patch noise sigma");
  gen->add_option("--samples-per-class", wcfg.samples_per_class,
                  "training images per class");
  gen->add_option("--eval-per-class", wcfg.eval_per_class,
                  "held-out images per class");
  gen->add_option("--seed", wcfg.seed, "world seed");
  gen->add_option("--templates", gen_templates, "template override JSON");
  gen->add_flag("--force", gen_force, "overwrite an existing world");

  // gen-responses
  auto* genr = app.add_subcommand("gen-responses",
                                  "regenerate the stub response store");
  std::string genr_world, genr_templates;
  bool genr_force = false;
  genr->add_option("--world", genr_world, "world directory")->required();
  genr->add_option("--templates", genr_templates, "template override JSON");
  genr->add_flag("--force", genr_force, "overwrite an existing store");

  // build-cache
  auto* bc = app.add_subcommand("build-cache",
                                "build knowledge caches for every "
                                "(class, template) pair");
  std::string bc_world, bc_out, bc_templates, bc_responses;
  int bc_jobs = 1;
  bool bc_force = false;
  ConfigFlags bc_flags;
  bc->add_option("--world", bc_world, "world directory")->required();
  bc->add_option("--out", bc_out, "cache directory")->required();
  bc->add_option("--templates", bc_templates, "template override JSON");
  bc->add_option("--responses", bc_responses, "response store override");
  bc->add_option("--jobs", bc_jobs, "parallel cache workers");
  bc->add_flag("--force", bc_force, "rebuild an existing store");
  bc_flags.attach(bc);

  // train
  auto* tr = app.add_subcommand("train", "train on the base classes");
  std::string tr_world, tr_caches, tr_run, tr_templates, tr_responses;
  std::string tr_protocol = "b2n";
  bool tr_force = false;
  ConfigFlags tr_flags;
  tr->add_option("--world", tr_world, "world directory")->required();
  tr->add_option("--caches", tr_caches, "cache directory");
  tr->add_option("--run-dir", tr_run, "run directory (or LLAMP_RUN_DIR)");
  tr->add_option("--templates", tr_templates, "template override JSON");
  tr->add_option("--responses", tr_responses, "response store override");
  tr->add_option("--protocol", tr_protocol, "b2n|fewshot");
  tr->add_flag("--force", tr_force, "retrain over an existing checkpoint");
  tr_flags.attach(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_world, ev_caches, ev_run, ev_ckpt, ev_templates, ev_responses,
      ev_out;
  std::string ev_protocol = "b2n";
  bool ev_force = false;
  ConfigFlags ev_flags;
  ev->add_option("--world", ev_world, "world directory")->required();
  ev->add_option("--caches", ev_caches, "cache directory");
  ev->add_option("--run-dir", ev_run, "run directory (or LLAMP_RUN_DIR)");
  ev->add_option("--checkpoint", ev_ckpt, "explicit checkpoint path");
  ev->add_option("--templates", ev_templates, "template override JSON");
  ev->add_option("--responses", ev_responses, "response store override");
  ev->add_option("--protocol", ev_protocol, "b2n|fewshot");
  ev->add_option("--out", ev_out, "report output path");
  ev->add_flag("--force", ev_force, "re-evaluate over an existing report");
  ev_flags.attach(ev);

  // report
  auto* rp = app.add_subcommand("report", "compare evaluation reports");
  std::vector<std::string> rp_paths;
  rp->add_option("reports", rp_paths, "report JSON files")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return cmd_gen_world(gen_out, wcfg, gen_templates, gen_force);
    if (genr->parsed())
      return cmd_gen_responses(genr_world, genr_templates, genr_force);
    if (bc->parsed())
      return cmd_build_cache(bc_world, bc_out, bc_flags, bc_templates,
                             bc_responses, bc_jobs, bc_force);
    if (tr->parsed())
      return cmd_train(tr_world, tr_caches, tr_run, tr_flags, tr_templates,
                       tr_responses, tr_protocol, tr_force, command_line);
    if (ev->parsed())
      return cmd_eval(ev_world, ev_caches, ev_run, ev_ckpt, ev_flags,
                      ev_templates, ev_responses, ev_protocol, ev_out,
                      ev_force);
    if (rp->parsed()) return cmd_report(rp_paths);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace llamp
