#include "llamp/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace llamp {

namespace detail {

// Iterative teardown so that dropping a deep graph does not recurse.
Node::~Node() {
  std::vector<std::shared_ptr<Node>> stack;
  stack.swap(parents);
  while (!stack.empty()) {
    std::shared_ptr<Node> n = std::move(stack.back());
    stack.pop_back();
    if (n.use_count() == 1) {
      for (auto& p : n->parents) stack.push_back(std::move(p));
      n->parents.clear();
    }
  }
}

namespace {
thread_local int g_no_grad_depth = 0;
}

}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }

bool grad_enabled() { return detail::g_no_grad_depth == 0; }

Tensor::Tensor(Matrix value, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m), requires_grad);
}

const Matrix& Tensor::grad() const {
  return node_->ensure_grad();
}

void Tensor::zero_grad() const {
  if (node_->grad.size() != 0) node_->grad.setZero();
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1)
    throw std::invalid_argument("Tensor::item: tensor is not 1x1");
  return node_->value(0, 0);
}

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

// Builds a result node. When grad is off or no parent needs gradients the
// parents/backward_fn are dropped and the node is a detached constant.
Tensor make_result(Matrix value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(value), false);
  bool need = grad_enabled();
  if (need) {
    bool any = false;
    for (const auto& p : parents) any = any || p.node()->requires_grad;
    need = any;
  }
  if (need) {
    out.node()->requires_grad = true;
    out.node()->parents.reserve(parents.size());
    for (auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
}

}  // namespace

void backward(const Tensor& root) {
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward: root must be a 1x1 scalar");
  if (!std::isfinite(root.value()(0, 0)))
    throw std::runtime_error("backward: non-finite loss value");

  // Iterative post-order topological sort over nodes that need gradients.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<NodePtr, size_t>> stack;
  if (root.node()->requires_grad) stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx == 0 && visited.count(n.get())) {
      stack.pop_back();
      continue;
    }
    if (idx < n->parents.size()) {
      NodePtr next = n->parents[idx++];
      if (next->requires_grad && !visited.count(next.get()))
        stack.emplace_back(std::move(next), 0);
    } else {
      visited.insert(n.get());
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.backward_fn) {
      n.ensure_grad();
      n.backward_fn(n);
      // Consume the graph: free intermediate state and flatten teardown.
      n.backward_fn = nullptr;
      n.parents.clear();
      n.grad.resize(0, 0);
    }
  }
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  return make_result(a.value() + b.value(), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->ensure_grad() += self.grad;
    if (bn->requires_grad) bn->ensure_grad() += self.grad;
  });
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  return make_result(a.value() - b.value(), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->ensure_grad() += self.grad;
    if (bn->requires_grad) bn->ensure_grad() -= self.grad;
  });
}

Tensor operator-(const Tensor& a) {
  auto an = a.node();
  return make_result(-a.value(), {a}, [an](Node& self) {
    if (an->requires_grad) an->ensure_grad() -= self.grad;
  });
}

Tensor operator*(double c, const Tensor& a) {
  auto an = a.node();
  return make_result(c * a.value(), {a}, [an, c](Node& self) {
    if (an->requires_grad) an->ensure_grad() += c * self.grad;
  });
}

Tensor add_rowwise(const Tensor& m, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != m.cols())
    throw std::invalid_argument("add_rowwise: row must be 1x" +
                                std::to_string(m.cols()) + ", got " +
                                std::to_string(row.rows()) + "x" +
                                std::to_string(row.cols()));
  auto mn = m.node(), rn = row.node();
  Matrix out = m.value();
  out.rowwise() += row.value().row(0);
  return make_result(std::move(out), {m, row}, [mn, rn](Node& self) {
    if (mn->requires_grad) mn->ensure_grad() += self.grad;
    if (rn->requires_grad) rn->ensure_grad() += self.grad.colwise().sum();
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  return make_result(a.value().cwiseProduct(b.value()), {a, b},
                     [an, bn](Node& self) {
                       if (an->requires_grad)
                         an->ensure_grad() += self.grad.cwiseProduct(bn->value);
                       if (bn->requires_grad)
                         bn->ensure_grad() += self.grad.cwiseProduct(an->value);
                     });
}

// Products use lazyProduct: each coefficient is reduced in ascending inner
// order regardless of the outer dimensions, so appending rows to a sequence
// leaves existing rows bit-identical (blocked GEMM kernels do not guarantee
// that). Inner dimensions here are small enough that this is also not a
// performance concern.
Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument(
        "matmul: inner dimensions disagree, " + std::to_string(a.rows()) +
        "x" + std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
        "x" + std::to_string(b.cols()));
  auto an = a.node(), bn = b.node();
  return make_result(a.value().lazyProduct(b.value()), {a, b},
                     [an, bn](Node& self) {
                       if (an->requires_grad)
                         an->ensure_grad() +=
                             self.grad.lazyProduct(bn->value.transpose());
                       if (bn->requires_grad)
                         bn->ensure_grad() +=
                             an->value.transpose().lazyProduct(self.grad);
                     });
}

Tensor ordered_matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument(
        "ordered_matmul: inner dimensions disagree, " +
        std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " * " +
        std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  auto an = a.node(), bn = b.node();
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    out.noalias() += a.value().col(j) * b.value().row(j);
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad)
      an->ensure_grad() += self.grad.lazyProduct(bn->value.transpose());
    if (bn->requires_grad)
      bn->ensure_grad() += an->value.transpose().lazyProduct(self.grad);
  });
}

Tensor transpose(const Tensor& a) {
  auto an = a.node();
  return make_result(a.value().transpose(), {a}, [an](Node& self) {
    if (an->requires_grad) an->ensure_grad() += self.grad.transpose();
  });
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) +
                                ", " + std::to_string(start + count) +
                                ") out of bounds for " +
                                std::to_string(a.rows()) + " rows");
  auto an = a.node();
  return make_result(a.value().middleRows(start, count), {a},
                     [an, start, count](Node& self) {
                       if (an->requires_grad)
                         an->ensure_grad().middleRows(start, count) += self.grad;
                     });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw std::invalid_argument("slice_cols: range [" + std::to_string(start) +
                                ", " + std::to_string(start + count) +
                                ") out of bounds for " +
                                std::to_string(a.cols()) + " cols");
  auto an = a.node();
  return make_result(a.value().middleCols(start, count), {a},
                     [an, start, count](Node& self) {
                       if (an->requires_grad)
                         an->ensure_grad().middleCols(start, count) += self.grad;
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols)
      throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  std::vector<NodePtr> nodes;
  std::vector<Eigen::Index> offsets, counts;
  for (const auto& p : parts) nodes.push_back(p.node());
  off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    counts.push_back(p.rows());
    off += p.rows();
  }
  return make_result(std::move(out), parts,
                     [nodes, offsets, counts](Node& self) {
                       for (size_t i = 0; i < nodes.size(); ++i)
                         if (nodes[i]->requires_grad)
                           nodes[i]->ensure_grad() +=
                               self.grad.middleRows(offsets[i], counts[i]);
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  std::vector<NodePtr> nodes;
  std::vector<Eigen::Index> offsets, counts;
  for (const auto& p : parts) nodes.push_back(p.node());
  off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    counts.push_back(p.cols());
    off += p.cols();
  }
  return make_result(std::move(out), parts,
                     [nodes, offsets, counts](Node& self) {
                       for (size_t i = 0; i < nodes.size(); ++i)
                         if (nodes[i]->requires_grad)
                           nodes[i]->ensure_grad() +=
                               self.grad.middleCols(offsets[i], counts[i]);
                     });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), a.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= a.rows())
      throw std::invalid_argument("gather_rows: index " +
                                  std::to_string(ids[i]) +
                                  " out of bounds for " +
                                  std::to_string(a.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(ids[i]);
  }
  auto an = a.node();
  return make_result(std::move(out), {a}, [an, ids](Node& self) {
    if (!an->requires_grad) return;
    Matrix& g = an->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      g.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

namespace {

// Left-to-right sum: appending exactly-zero terms (fully masked positions)
// cannot change the result, which Eigen's length-dependent vectorized
// reductions do not guarantee.
double sequential_sum(const Eigen::RowVectorXd& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v(i);
  return s;
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mx = a.value().row(i).maxCoeff();
    Eigen::RowVectorXd e = (a.value().row(i).array() - mx).exp();
    out.row(i) = e / sequential_sum(e);
  }
  auto an = a.node();
  Tensor res = make_result(std::move(out), {a}, nullptr);
  if (res.node()->requires_grad) {
    Matrix y = res.value();
    res.node()->backward_fn = [an, y](Node& self) {
      if (!an->requires_grad) return;
      Matrix& g = an->ensure_grad();
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double dot = self.grad.row(i).dot(y.row(i));
        g.row(i) +=
            y.row(i).cwiseProduct((self.grad.row(i).array() - dot).matrix());
      }
    };
  }
  return res;
}

Tensor log_softmax_rows(const Tensor& a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mx = a.value().row(i).maxCoeff();
    const Eigen::RowVectorXd e = (a.value().row(i).array() - mx).exp();
    const double lse = std::log(sequential_sum(e));
    out.row(i) = a.value().row(i).array() - mx - lse;
  }
  auto an = a.node();
  Tensor res = make_result(std::move(out), {a}, nullptr);
  if (res.node()->requires_grad) {
    Matrix y = res.value();
    res.node()->backward_fn = [an, y](Node& self) {
      if (!an->requires_grad) return;
      Matrix& g = an->ensure_grad();
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double gsum = self.grad.row(i).sum();
        g.row(i) += self.grad.row(i) - gsum * y.row(i).array().exp().matrix();
      }
    };
  }
  return res;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a) {
  Matrix out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  auto an = a.node();
  return make_result(std::move(out), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    Matrix d = an->value.unaryExpr([](double x) {
      const double phi = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      const double Phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      return Phi + x * phi;
    });
    an->ensure_grad() += self.grad.cwiseProduct(d);
  });
}

Tensor abs(const Tensor& a) {
  auto an = a.node();
  return make_result(a.value().cwiseAbs(), {a}, [an](Node& self) {
    if (!an->requires_grad) return;
    Matrix s = an->value.unaryExpr(
        [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    an->ensure_grad() += self.grad.cwiseProduct(s);
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  const Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 ||
      bias.cols() != d)
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1x" +
                                std::to_string(d));
  Matrix xhat(x.rows(), d);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * is;
    inv_std(i) = is;
  }
  Matrix out = xhat;
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    out.row(i) = out.row(i).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result(
      std::move(out), {x, gain, bias}, [xn, gn, bn, xhat, inv_std, d](Node& self) {
        if (gn->requires_grad) {
          Matrix& gg = gn->ensure_grad();
          for (Eigen::Index i = 0; i < xhat.rows(); ++i)
            gg.row(0) += self.grad.row(i).cwiseProduct(xhat.row(i));
        }
        if (bn->requires_grad) bn->ensure_grad().row(0) += self.grad.colwise().sum();
        if (xn->requires_grad) {
          Matrix& gx = xn->ensure_grad();
          for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
            Eigen::RowVectorXd gy = self.grad.row(i).cwiseProduct(gn->value.row(0));
            const double m1 = gy.mean();
            const double m2 = gy.cwiseProduct(xhat.row(i)).mean();
            gx.row(i) += inv_std(i) *
                         (gy.array() - m1 - xhat.row(i).array() * m2).matrix();
          }
        }
      });
}

Tensor l2_normalize_rows(const Tensor& x) {
  Matrix out(x.rows(), x.cols());
  Eigen::VectorXd norms(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double r = x.value().row(i).norm();
    if (r == 0.0)
      throw std::runtime_error("l2_normalize_rows: zero-norm row " +
                               std::to_string(i));
    out.row(i) = x.value().row(i) / r;
    norms(i) = r;
  }
  auto xn = x.node();
  Tensor res = make_result(std::move(out), {x}, nullptr);
  if (res.node()->requires_grad) {
    Matrix y = res.value();
    res.node()->backward_fn = [xn, y, norms](Node& self) {
      if (!xn->requires_grad) return;
      Matrix& g = xn->ensure_grad();
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double dot = self.grad.row(i).dot(y.row(i));
        g.row(i) += (self.grad.row(i) - dot * y.row(i)) / norms(i);
      }
    };
  }
  return res;
}

Tensor sum_all(const Tensor& a) {
  auto an = a.node();
  return make_result(Matrix::Constant(1, 1, a.value().sum()), {a},
                     [an](Node& self) {
                       if (an->requires_grad)
                         an->ensure_grad().array() += self.grad(0, 0);
                     });
}

Tensor mean_all(const Tensor& a) {
  const double n = static_cast<double>(a.rows() * a.cols());
  auto an = a.node();
  return make_result(Matrix::Constant(1, 1, a.value().sum() / n), {a},
                     [an, n](Node& self) {
                       if (an->requires_grad)
                         an->ensure_grad().array() += self.grad(0, 0) / n;
                     });
}

}  // namespace llamp
