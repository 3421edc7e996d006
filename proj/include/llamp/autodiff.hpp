#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace llamp {

using Matrix = Eigen::MatrixXd;

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;  // empty until backward() touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Matrix& ensure_grad() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }

  ~Node();
};

}  // namespace detail

// Disables graph recording in the current thread while alive. Forward passes
// under the guard produce plain values (no parents, no backward functions).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Matrix-valued node in a dynamically built computation graph. Value
// semantics: copies share the underlying node, so a parameter Tensor handed
// to several forward passes accumulates gradients in one place.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  // Copies share the node, so node mutators are callable through const
  // handles, shared_ptr style.
  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Direct in-place update of the stored value (optimizer steps, finite
  // difference probes). Any previously built graph through this node is
  // stale after a mutation.
  Matrix& mutable_value() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) const { node_->requires_grad = b; }

  const Matrix& grad() const;
  void zero_grad() const;

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Runs reverse-mode accumulation from a 1x1 root. Gradients add into every
// reachable node with requires_grad; call zero_grad on leaves between steps.
// The traversed graph is dismantled afterwards (one backward per graph).
void backward(const Tensor& root);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(double c, const Tensor& a);
Tensor add_rowwise(const Tensor& m, const Tensor& row);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor matmul(const Tensor& a, const Tensor& b);
// Matmul with a fixed, shape-independent accumulation order (ascending
// inner index). Attention mixes use it so that appending fully masked
// positions leaves earlier outputs bit-identical.
Tensor ordered_matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, const std::vector<int>& ids);
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

}  // namespace llamp
