#include "llamp/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "llamp/encoders.hpp"
#include "llamp/rng.hpp"

namespace llamp {

SplitProtocol make_split(const std::vector<std::string>& class_names,
                         uint64_t seed, bool randomized) {
  if (class_names.size() < 2)
    throw std::invalid_argument("make_split: need at least 2 classes, got " +
                                std::to_string(class_names.size()));
  std::vector<int> order(class_names.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return class_names[a] < class_names[b];
  });
  if (randomized) {
    std::mt19937_64 gen(seed);
    std::shuffle(order.begin(), order.end(), gen);
  }
  SplitProtocol split;
  split.seed = seed;
  const size_t n_base = (order.size() + 1) / 2;
  split.base_classes.assign(order.begin(),
                            order.begin() + static_cast<long>(n_base));
  split.novel_classes.assign(order.begin() + static_cast<long>(n_base),
                             order.end());
  return split;
}

std::vector<int> few_shot_sample(const Dataset& data, int shots,
                                 uint64_t seed) {
  if (shots < 1)
    throw std::invalid_argument("few_shot_sample: shots must be >= 1");
  std::vector<int> out;
  for (size_t label = 0; label < data.class_names.size(); ++label) {
    std::vector<int> pool = data.indices_of_class(static_cast<int>(label));
    if (pool.empty())
      throw std::runtime_error("few_shot_sample: class \"" +
                               data.class_names[label] + "\" has no samples");
    std::mt19937_64 gen(derive_seed(seed, 0xF5u + label));
    std::shuffle(pool.begin(), pool.end(), gen);
    if (static_cast<int>(pool.size()) < shots)
      std::cerr << "warning: class " << data.class_names[label] << " has only "
                << pool.size() << " samples for " << shots << " shots\n";
    const size_t take =
        std::min<size_t>(pool.size(), static_cast<size_t>(shots));
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<long>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

double harmonic_mean(double base, double novel) {
  if (base < 0 || base > 100 || novel < 0 || novel > 100)
    throw std::invalid_argument(
        "harmonic_mean: accuracies must be percentages in [0, 100]");
  if (base + novel == 0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

nlohmann::json EvalReport::to_json() const {
  return nlohmann::json{{"protocol", protocol},
                        {"base_acc", base_acc},
                        {"novel_acc", novel_acc},
                        {"hm", hm},
                        {"per_class_acc", per_class_acc},
                        {"n_eval", n_eval},
                        {"ensemble_size", ensemble_size}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.protocol = j.at("protocol");
  r.base_acc = j.at("base_acc");
  r.novel_acc = j.at("novel_acc");
  r.hm = j.at("hm");
  r.per_class_acc = j.at("per_class_acc").get<std::map<std::string, double>>();
  r.n_eval = j.at("n_eval");
  r.ensemble_size = j.at("ensemble_size");
  return r;
}

std::string EvalReport::render_table() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  if (protocol == "b2n") {
    os << "protocol: base-to-novel\n";
    os << "  base  : " << base_acc << "\n";
    os << "  novel : " << novel_acc << "\n";
    os << "  HM    : " << hm << "\n";
  } else {
    os << "protocol: few-shot\n";
    os << "  accuracy: " << base_acc << "\n";
  }
  os << "  evaluated " << n_eval << " samples, ensemble of " << ensemble_size
     << "\n";
  os << "  per-class:\n";
  for (const auto& [name, acc] : per_class_acc)
    os << "    " << name << ": " << acc << "\n";
  return os.str();
}

SubsetEvalResult evaluate_classes(const ModelBundle& bundle,
                                  const CacheStore* caches,
                                  const Dataset& data,
                                  const std::vector<int>& class_ids,
                                  const std::vector<int>& template_ids) {
  if (class_ids.empty())
    throw std::invalid_argument("evaluate_classes: empty class set");
  if (template_ids.empty())
    throw std::invalid_argument("evaluate_classes: empty template set");
  NoGradGuard ng;

  // Class features per ensemble slot. Without the bridge the text feature
  // does not depend on the query template, so one slot covers everything.
  const bool bridged = bundle.config.use_llm;
  const size_t n_slots = bridged ? template_ids.size() : 1;
  std::vector<std::vector<Eigen::VectorXd>> features(
      n_slots, std::vector<Eigen::VectorXd>(class_ids.size()));
  for (size_t t = 0; t < n_slots; ++t) {
    for (size_t k = 0; k < class_ids.size(); ++k) {
      const int cid = class_ids[k];
      ClassSpec cls;
      cls.label_id = cid;
      cls.name = data.class_names.at(cid);
      const KnowledgeCache* cache = nullptr;
      if (bridged) {
        if (!caches || !caches->has(cid, template_ids[t]))
          throw std::runtime_error("missing knowledge cache for class \"" +
                                   cls.name + "\" (id " + std::to_string(cid) +
                                   "), template " +
                                   std::to_string(template_ids[t]));
        cache = &caches->get(cid, template_ids[t]);
      }
      features[t][k] =
          bundle.class_feature(cls, cache).value().row(0).transpose();
    }
  }

  std::map<int, int> correct, seen;
  SubsetEvalResult result;
  for (const auto& item : data.items) {
    const auto it =
        std::find(class_ids.begin(), class_ids.end(), item.label_id);
    if (it == class_ids.end()) continue;
    const int truth = static_cast<int>(it - class_ids.begin());
    const Eigen::VectorXd f =
        bundle.image_feature(item.patches).value().row(0).transpose();
    Eigen::VectorXd averaged =
        Eigen::VectorXd::Zero(static_cast<Eigen::Index>(class_ids.size()));
    for (size_t t = 0; t < n_slots; ++t)
      averaged += classify(f, features[t], bundle.config.tau);
    averaged /= static_cast<double>(n_slots);
    const int pred = argmax_lowest(averaged);
    ++seen[item.label_id];
    if (pred == truth) ++correct[item.label_id];
    ++result.n;
  }
  if (result.n == 0)
    throw std::runtime_error("evaluate_classes: no samples match the class set");

  int total_correct = 0;
  for (int cid : class_ids) {
    const int s = seen.count(cid) ? seen[cid] : 0;
    const int c = correct.count(cid) ? correct[cid] : 0;
    total_correct += c;
    if (s > 0)
      result.per_class_acc[data.class_names.at(cid)] =
          100.0 * static_cast<double>(c) / static_cast<double>(s);
  }
  result.accuracy =
      100.0 * static_cast<double>(total_correct) / static_cast<double>(result.n);
  return result;
}

namespace {

std::vector<int> ensemble_subset(const ExperimentConfig& cfg,
                                 const std::vector<int>& template_ids) {
  if (cfg.ensemble <= 0 ||
      cfg.ensemble >= static_cast<int>(template_ids.size()))
    return template_ids;
  return std::vector<int>(template_ids.begin(),
                          template_ids.begin() + cfg.ensemble);
}

}  // namespace

EvalReport run_base_to_novel(const ModelBundle& bundle, const CacheStore* caches,
                             const Dataset& test_data,
                             const SplitProtocol& split,
                             const std::vector<int>& template_ids) {
  const std::vector<int> active = ensemble_subset(bundle.config, template_ids);
  SubsetEvalResult base =
      evaluate_classes(bundle, caches, test_data, split.base_classes, active);
  SubsetEvalResult novel =
      evaluate_classes(bundle, caches, test_data, split.novel_classes, active);
  EvalReport report;
  report.protocol = "b2n";
  report.base_acc = base.accuracy;
  report.novel_acc = novel.accuracy;
  report.hm = harmonic_mean(report.base_acc, report.novel_acc);
  report.per_class_acc = base.per_class_acc;
  report.per_class_acc.insert(novel.per_class_acc.begin(),
                              novel.per_class_acc.end());
  report.n_eval = base.n + novel.n;
  report.ensemble_size =
      bundle.config.use_llm ? static_cast<int>(active.size()) : 1;
  return report;
}

EvalReport run_few_shot_eval(const ModelBundle& bundle, const CacheStore* caches,
                             const Dataset& test_data,
                             const std::vector<int>& template_ids) {
  const std::vector<int> active = ensemble_subset(bundle.config, template_ids);
  std::vector<int> all_ids(test_data.class_names.size());
  for (size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = static_cast<int>(i);
  SubsetEvalResult r =
      evaluate_classes(bundle, caches, test_data, all_ids, active);
  EvalReport report;
  report.protocol = "fewshot";
  report.base_acc = r.accuracy;
  report.novel_acc = 0;
  report.hm = 0;
  report.per_class_acc = r.per_class_acc;
  report.n_eval = r.n;
  report.ensemble_size =
      bundle.config.use_llm ? static_cast<int>(active.size()) : 1;
  return report;
}

}  // namespace llamp
