#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "llamp/data_io.hpp"
#include "llamp/model.hpp"

namespace llamp {

struct LossWeights {
  double lambda_v = 10.0;
  double lambda_t = 25.0;
  double lambda_dist = 2.5;
};

// Frozen prompt-free encoder outputs used as the regularization anchor and
// distillation teacher. Computed once before training; constants afterwards.
struct ReferenceFeatures {
  Matrix image_features;  // one row per referenced dataset item
  Matrix class_features;  // one row per class in the training label space
  std::vector<int> image_rows;  // dataset index -> row (-1 when absent)
};

struct OptimizerConfig {
  double global_lr = 2e-4;
  double lora_lr = 2e-5;
  int batch_size = 8;
  int epochs = 20;
  double momentum = 0.0;
  std::string method = "sgd";  // sgd | adam
  uint64_t seed = 1;
};

struct BatchOutcome {
  double loss_total = 0;
  double loss_ce = 0;
  double loss_l1 = 0;
  double loss_dist = 0;
  Matrix logits;  // batch x classes, already divided by tau
  int template_id = 0;
};

// Mean over samples of -log softmax cosine probability of the true class.
Tensor loss_ce(const Tensor& image_feats, const Tensor& class_feats,
               const std::vector<int>& labels, double tau);
// Mean-absolute deviation from the frozen reference features, weighted per
// modality: lambda_v * mean|f - f_ref| + lambda_t * mean|g - g_ref|.
Tensor loss_l1(const Tensor& image_feats, const Tensor& image_ref,
               const Tensor& class_feats, const Tensor& class_ref,
               const LossWeights& weights);
// lambda_dist * mean KL between the tempered softmax rows of the two cosine
// matrices. Written argument order puts the adapted model first;
// teacher_first swaps it. The teacher matrix must be a detached constant.
Tensor loss_dist(const Tensor& student_cos, const Tensor& teacher_cos,
                 double lambda_dist, double tau, bool teacher_first = false);

// The query template drawn for a batch, a pure function of run seed and
// step index.
int sample_template_id(uint64_t seed, int step, int n_templates);

// SGD (optional momentum) or Adam over two rate groups: low-rank adapter
// tensors use lora_lr, everything else global_lr. The schedule multiplier
// scales both (cosine decay over the run).
class Optimizer {
 public:
  Optimizer(const NamedParams& trainable, const OptimizerConfig& cfg);
  void step(double schedule_scale);
  void zero_grad();
  int n_params() const { return static_cast<int>(params_.size()); }

 private:
  struct Slot {
    Tensor param;
    double lr;
    Matrix velocity;  // momentum / adam first moment
    Matrix second;    // adam second moment
  };
  std::vector<Slot> params_;
  OptimizerConfig cfg_;
  long t_ = 0;
};

double cosine_decay(int step, int total_steps);

ReferenceFeatures compute_reference_features(
    const ModelBundle& bundle, const Dataset& data,
    const std::vector<int>& sample_indices, const std::vector<ClassSpec>& classes,
    const std::vector<int>& class_ids);

// Drives training on a fixed label space (base classes for the
// base-to-novel protocol, all classes for few-shot).
class Trainer {
 public:
  Trainer(ModelBundle& bundle, const CacheStore* caches, const Dataset& data,
          const std::vector<ClassSpec>& classes, std::vector<int> class_ids,
          std::vector<int> sample_indices, std::vector<int> template_ids);

  struct BatchLoss {
    Tensor total, ce, l1, dist;
    Matrix logits;
    int template_id = 0;
  };
  // Builds the full objective graph for one batch without touching the
  // optimizer; train_step consumes it.
  BatchLoss batch_loss(const std::vector<int>& batch_indices, int step);

  BatchOutcome train_step(const std::vector<int>& batch_indices, int step);
  // Full loop; optional CSV sink receives one line per step.
  void run(std::ostream* loss_csv = nullptr,
           const std::function<void(int, const BatchOutcome&)>& hook = {});

  const ReferenceFeatures& references() const { return refs_; }
  const NamedParams& trainable() const { return partition_.trainable; }
  const NamedParams& frozen() const { return partition_.frozen; }
  int total_steps() const;

 private:
  const KnowledgeCache* cache_for(int class_id, int template_id) const;

  ModelBundle& bundle_;
  const CacheStore* caches_;
  const Dataset& data_;
  const std::vector<ClassSpec>& classes_;
  std::vector<int> class_ids_;
  std::vector<int> sample_indices_;
  std::vector<int> template_ids_;
  ParamPartition partition_;
  ReferenceFeatures refs_;
  std::optional<Optimizer> optimizer_;
  LossWeights weights_;
};

}  // namespace llamp
