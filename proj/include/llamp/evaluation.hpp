#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "llamp/data_io.hpp"
#include "llamp/model.hpp"

namespace llamp {

// Disjoint base/novel class partition. The default rule sorts class names
// and takes the first ceil(C/2) as base; the randomized variant shuffles
// under the seed first.
struct SplitProtocol {
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  uint64_t seed = 0;
};

SplitProtocol make_split(const std::vector<std::string>& class_names,
                         uint64_t seed, bool randomized = false);

// Exactly `shots` item indices per class, seeded, without replacement.
// Classes with fewer items contribute everything they have (with a warning
// on stderr).
std::vector<int> few_shot_sample(const Dataset& data, int shots, uint64_t seed);

// 2bn/(b+n) on percentages; (0, 0) maps to 0.
double harmonic_mean(double base, double novel);
double round2(double v);

struct EvalReport {
  std::string protocol;  // "b2n" | "fewshot"
  double base_acc = 0;
  double novel_acc = 0;
  double hm = 0;
  std::map<std::string, double> per_class_acc;
  int n_eval = 0;
  int ensemble_size = 1;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  std::string render_table() const;
};

struct SubsetEvalResult {
  double accuracy = 0;
  std::map<std::string, double> per_class_acc;
  int n = 0;
};

// Classifies every dataset item whose label is in class_ids against that
// class set. Per template, class probability distributions are computed
// with the softmax cosine classifier; distributions (not logits) are then
// averaged across templates and the argmax taken.
SubsetEvalResult evaluate_classes(const ModelBundle& bundle,
                                  const CacheStore* caches,
                                  const Dataset& data,
                                  const std::vector<int>& class_ids,
                                  const std::vector<int>& template_ids);

EvalReport run_base_to_novel(const ModelBundle& bundle, const CacheStore* caches,
                             const Dataset& test_data, const SplitProtocol& split,
                             const std::vector<int>& template_ids);

EvalReport run_few_shot_eval(const ModelBundle& bundle, const CacheStore* caches,
                             const Dataset& test_data,
                             const std::vector<int>& template_ids);

}  // namespace llamp
