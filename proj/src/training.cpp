#include "llamp/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <stdexcept>

#include "llamp/rng.hpp"

namespace llamp {

Tensor loss_ce(const Tensor& image_feats, const Tensor& class_feats,
               const std::vector<int>& labels, double tau) {
  if (tau <= 0) throw std::invalid_argument("loss_ce: tau must be positive");
  const Eigen::Index n = image_feats.rows();
  const Eigen::Index c = class_feats.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw std::invalid_argument("loss_ce: got " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " samples");
  Matrix onehot = Matrix::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      throw std::invalid_argument("loss_ce: label " +
                                  std::to_string(labels[i]) +
                                  " outside [0, " + std::to_string(c) + ")");
    onehot(i, labels[i]) = 1.0;
  }
  Tensor logits = (1.0 / tau) * matmul(image_feats, transpose(class_feats));
  Tensor logp = log_softmax_rows(logits);
  return (-1.0 / static_cast<double>(n)) * sum_all(mul(Tensor(onehot), logp));
}

Tensor loss_l1(const Tensor& image_feats, const Tensor& image_ref,
               const Tensor& class_feats, const Tensor& class_ref,
               const LossWeights& weights) {
  if (image_feats.rows() != image_ref.rows() ||
      image_feats.cols() != image_ref.cols())
    throw std::invalid_argument("loss_l1: image feature shape mismatch");
  if (class_feats.rows() != class_ref.rows() ||
      class_feats.cols() != class_ref.cols())
    throw std::invalid_argument("loss_l1: class feature shape mismatch");
  Tensor vision_term = mean_all(abs(image_feats - image_ref));
  Tensor text_term = mean_all(abs(class_feats - class_ref));
  return weights.lambda_v * vision_term + weights.lambda_t * text_term;
}

Tensor loss_dist(const Tensor& student_cos, const Tensor& teacher_cos,
                 double lambda_dist, double tau, bool teacher_first) {
  if (student_cos.rows() != teacher_cos.rows() ||
      student_cos.cols() != teacher_cos.cols())
    throw std::invalid_argument("loss_dist: logit shape mismatch");
  if (!student_cos.value().allFinite() || !teacher_cos.value().allFinite())
    throw std::runtime_error("loss_dist: non-finite logits");
  if (tau <= 0) throw std::invalid_argument("loss_dist: tau must be positive");
  const double n = static_cast<double>(student_cos.rows());
  Tensor ls = log_softmax_rows((1.0 / tau) * student_cos);
  Tensor lt = log_softmax_rows((1.0 / tau) * teacher_cos);
  Tensor kl;
  if (teacher_first) {
    Tensor pt = softmax_rows((1.0 / tau) * teacher_cos);
    kl = sum_all(mul(pt, lt - ls));
  } else {
    Tensor ps = softmax_rows((1.0 / tau) * student_cos);
    kl = sum_all(mul(ps, ls - lt));
  }
  return (lambda_dist / n) * kl;
}

int sample_template_id(uint64_t seed, int step, int n_templates) {
  if (n_templates < 1)
    throw std::invalid_argument("sample_template_id: no templates");
  std::mt19937_64 gen(derive_seed(seed, 0x7E41000ULL + static_cast<uint64_t>(step)));
  std::uniform_int_distribution<int> d(0, n_templates - 1);
  return d(gen);
}

double cosine_decay(int step, int total_steps) {
  if (total_steps <= 1) return 1.0;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * (1.0 + std::cos(M_PI * t));
}

namespace {

bool is_lora_param(const std::string& name) {
  return name.find(".lora_") != std::string::npos;
}

}  // namespace

Optimizer::Optimizer(const NamedParams& trainable, const OptimizerConfig& cfg)
    : cfg_(cfg) {
  for (const auto& [name, p] : trainable) {
    Slot s;
    s.param = p;
    s.lr = is_lora_param(name) ? cfg.lora_lr : cfg.global_lr;
    if (cfg.momentum > 0 || cfg.method == "adam")
      s.velocity = Matrix::Zero(p.rows(), p.cols());
    if (cfg.method == "adam") s.second = Matrix::Zero(p.rows(), p.cols());
    params_.push_back(std::move(s));
  }
  if (cfg.method != "sgd" && cfg.method != "adam")
    throw std::invalid_argument("Optimizer: unknown method '" + cfg.method + "'");
}

void Optimizer::step(double schedule_scale) {
  ++t_;
  for (auto& s : params_) {
    const Matrix& g = s.param.grad();
    const double lr = s.lr * schedule_scale;
    if (cfg_.method == "adam") {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      s.velocity = b1 * s.velocity + (1 - b1) * g;
      s.second = b2 * s.second.array().matrix() +
                 (1 - b2) * g.cwiseProduct(g);
      const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
      Matrix mhat = s.velocity / c1;
      Matrix vhat = s.second / c2;
      s.param.mutable_value() -=
          lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps).matrix());
    } else if (cfg_.momentum > 0) {
      s.velocity = cfg_.momentum * s.velocity + g;
      s.param.mutable_value() -= lr * s.velocity;
    } else {
      s.param.mutable_value() -= lr * g;
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& s : params_) s.param.zero_grad();
}

ReferenceFeatures compute_reference_features(
    const ModelBundle& bundle, const Dataset& data,
    const std::vector<int>& sample_indices,
    const std::vector<ClassSpec>& classes, const std::vector<int>& class_ids) {
  NoGradGuard ng;
  ReferenceFeatures refs;
  refs.image_rows.assign(data.items.size(), -1);
  refs.image_features.resize(static_cast<Eigen::Index>(sample_indices.size()),
                             bundle.config.joint_width);
  for (size_t i = 0; i < sample_indices.size(); ++i) {
    const int idx = sample_indices[i];
    refs.image_rows[idx] = static_cast<int>(i);
    refs.image_features.row(static_cast<Eigen::Index>(i)) =
        bundle.reference_image_feature(data.items[idx].patches).value().row(0);
  }

  refs.class_features.resize(static_cast<Eigen::Index>(class_ids.size()),
                             bundle.config.joint_width);
  const bool np_templates = bundle.config.ta1 && bundle.config.prior != "none";
  for (size_t ci = 0; ci < class_ids.size(); ++ci) {
    const ClassSpec& cls = classes.at(class_ids[ci]);
    std::vector<std::string> captions;
    if (np_templates && !cls.noun_phrases.empty()) {
      captions = augment_clip_templates(cls, bundle.templates);
    } else {
      for (const auto& t : bundle.templates.clip_templates)
        if (t.find("[NP]") == std::string::npos)
          captions.push_back(render_template(t, cls.name));
    }
    if (captions.empty())
      throw std::runtime_error("compute_reference_features: no caption "
                               "templates for class " + cls.name);
    Eigen::RowVectorXd mean =
        Eigen::RowVectorXd::Zero(bundle.config.joint_width);
    for (const auto& caption : captions)
      mean += bundle.reference_text_feature(caption).value().row(0);
    if (captions.size() > 1) {
      mean /= static_cast<double>(captions.size());
      mean /= mean.norm();
    }
    refs.class_features.row(static_cast<Eigen::Index>(ci)) = mean;
  }
  return refs;
}

Trainer::Trainer(ModelBundle& bundle, const CacheStore* caches,
                 const Dataset& data, const std::vector<ClassSpec>& classes,
                 std::vector<int> class_ids, std::vector<int> sample_indices,
                 std::vector<int> template_ids)
    : bundle_(bundle),
      caches_(caches),
      data_(data),
      classes_(classes),
      class_ids_(std::move(class_ids)),
      sample_indices_(std::move(sample_indices)),
      template_ids_(std::move(template_ids)) {
  if (bundle_.config.use_llm && !caches_)
    throw std::invalid_argument("Trainer: the bridge is enabled but no cache "
                                "store was provided");
  if (template_ids_.empty())
    throw std::invalid_argument("Trainer: no active query templates");
  weights_ = LossWeights{bundle_.config.lambda_v, bundle_.config.lambda_t,
                         bundle_.config.lambda_dist};
  partition_ = bundle_.apply_trainable_groups();
  refs_ = compute_reference_features(bundle_, data_, sample_indices_, classes_,
                                     class_ids_);
  OptimizerConfig ocfg;
  ocfg.global_lr = bundle_.config.global_lr;
  ocfg.lora_lr = bundle_.config.lora_lr;
  ocfg.batch_size = bundle_.config.batch_size;
  ocfg.epochs = bundle_.config.epochs;
  ocfg.momentum = bundle_.config.momentum;
  ocfg.method = bundle_.config.optimizer;
  ocfg.seed = bundle_.config.train_seed;
  optimizer_.emplace(partition_.trainable, ocfg);
}

const KnowledgeCache* Trainer::cache_for(int class_id, int template_id) const {
  if (!bundle_.config.use_llm) return nullptr;
  if (!caches_->has(class_id, template_id))
    throw std::runtime_error("missing knowledge cache for class \"" +
                             classes_.at(class_id).name + "\" (id " +
                             std::to_string(class_id) + "), template " +
                             std::to_string(template_id));
  return &caches_->get(class_id, template_id);
}

int Trainer::total_steps() const {
  const int n = static_cast<int>(sample_indices_.size());
  const int per_epoch =
      (n + bundle_.config.batch_size - 1) / bundle_.config.batch_size;
  return per_epoch * bundle_.config.epochs;
}

Trainer::BatchLoss Trainer::batch_loss(const std::vector<int>& batch_indices,
                                       int step) {
  const int template_id =
      template_ids_[sample_template_id(bundle_.config.train_seed, step,
                                       static_cast<int>(template_ids_.size()))];

  std::vector<Tensor> class_rows;
  class_rows.reserve(class_ids_.size());
  for (int cid : class_ids_)
    class_rows.push_back(
        bundle_.class_feature(classes_.at(cid), cache_for(cid, template_id)));
  Tensor class_feats = concat_rows(class_rows);

  std::vector<Tensor> image_rows;
  std::vector<int> labels;
  Matrix image_ref(static_cast<Eigen::Index>(batch_indices.size()),
                   bundle_.config.joint_width);
  for (size_t i = 0; i < batch_indices.size(); ++i) {
    const int idx = batch_indices[i];
    image_rows.push_back(bundle_.image_feature(data_.items[idx].patches));
    const int row = refs_.image_rows.at(idx);
    if (row < 0)
      throw std::runtime_error("train_step: sample " + std::to_string(idx) +
                               " has no reference features");
    image_ref.row(static_cast<Eigen::Index>(i)) = refs_.image_features.row(row);
    const auto it = std::find(class_ids_.begin(), class_ids_.end(),
                              data_.items[idx].label_id);
    if (it == class_ids_.end())
      throw std::runtime_error("train_step: sample label " +
                               std::to_string(data_.items[idx].label_id) +
                               " is outside the training label space");
    labels.push_back(static_cast<int>(it - class_ids_.begin()));
  }
  Tensor image_feats = concat_rows(image_rows);

  const Tensor image_ref_t{image_ref};
  const Tensor class_ref_t{refs_.class_features};
  Tensor student_cos = matmul(image_feats, transpose(class_feats));
  Tensor teacher_cos{Matrix(image_ref * refs_.class_features.transpose())};

  BatchLoss loss;
  loss.ce = loss_ce(image_feats, class_feats, labels, bundle_.config.tau);
  loss.l1 = loss_l1(image_feats, image_ref_t, class_feats, class_ref_t,
                    weights_);
  loss.dist = loss_dist(student_cos, teacher_cos, weights_.lambda_dist,
                        bundle_.config.tau, bundle_.config.kl_teacher_first);
  loss.total = loss.ce + loss.l1 + loss.dist;
  loss.logits = student_cos.value() / bundle_.config.tau;
  loss.template_id = template_id;
  return loss;
}

BatchOutcome Trainer::train_step(const std::vector<int>& batch_indices,
                                 int step) {
  BatchLoss loss = batch_loss(batch_indices, step);

  optimizer_->zero_grad();
  backward(loss.total);
  optimizer_->step(cosine_decay(step, total_steps()));

  BatchOutcome out;
  out.loss_total = loss.total.item();
  out.loss_ce = loss.ce.item();
  out.loss_l1 = loss.l1.item();
  out.loss_dist = loss.dist.item();
  out.logits = std::move(loss.logits);
  out.template_id = loss.template_id;
  return out;
}

void Trainer::run(std::ostream* loss_csv,
                  const std::function<void(int, const BatchOutcome&)>& hook) {
  if (loss_csv)
    *loss_csv << "step,template_id,lr_scale,loss_total,loss_ce,loss_l1,loss_dist\n";
  std::vector<int> order = sample_indices_;
  std::mt19937_64 shuffle_gen(derive_seed(bundle_.config.train_seed, 0x5AFFull));
  int step = 0;
  for (int epoch = 0; epoch < bundle_.config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_gen);
    for (size_t off = 0; off < order.size();
         off += static_cast<size_t>(bundle_.config.batch_size)) {
      const size_t end = std::min(order.size(),
                                  off + static_cast<size_t>(bundle_.config.batch_size));
      std::vector<int> batch(order.begin() + static_cast<long>(off),
                             order.begin() + static_cast<long>(end));
      BatchOutcome outcome = train_step(batch, step);
      if (loss_csv)
        *loss_csv << step << ',' << outcome.template_id << ','
                  << cosine_decay(step, total_steps()) << ','
                  << outcome.loss_total << ',' << outcome.loss_ce << ','
                  << outcome.loss_l1 << ',' << outcome.loss_dist << '\n';
      if (hook) hook(step, outcome);
      ++step;
    }
  }
}

}  // namespace llamp
