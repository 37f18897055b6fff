#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "tiedgnn/common.hpp"

namespace tiedgnn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// A named, trainable dense array. Gradients accumulate across backward passes
// until the optimizer clears them.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

class Tape;

// Handle onto a tape node. Cheap to copy; valid while its tape is alive.
class Tensor {
 public:
  Tensor() = default;

  Eigen::Index rows() const;
  Eigen::Index cols() const;
  Eigen::Index size() const { return rows() * cols(); }
  const Matrix& value() const;
  const Matrix& grad() const;
  bool requires_grad() const;
  double scalar() const;
  bool defined() const { return tape_ != nullptr; }

  Tape* tape() const { return tape_; }
  int id() const { return node_; }

 private:
  friend class Tape;
  Tensor(Tape* t, int n) : tape_(t), node_(n) {}
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Records forward ops in execution order; reverse traversal of that order is
// a valid topological order for backpropagation.
class Tape {
 public:
  using Pull = std::function<void(Tape&, const Matrix&)>;

  struct Node {
    Matrix value;
    Matrix grad;  // allocated on first accumulation
    bool requires_grad = false;
    Pull pull;
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix v) { return make(std::move(v), false, nullptr); }
  Tensor scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  // Copies the parameter value in; backward flushes into p.grad.
  Tensor leaf(Parameter& p);
  // Read-only view of a parameter (inference mode, no gradient tracking).
  Tensor leaf_const(const Parameter& p) { return constant(p.value); }

  Tensor make(Matrix v, bool requires_grad, Pull pull);

  void backward(const Tensor& loss);

  int next_index() const { return static_cast<int>(nodes_.size()); }
  const Matrix& value_of(int i) const { return nodes_[static_cast<std::size_t>(i)].value; }
  bool node_requires_grad(int i) const {
    return nodes_[static_cast<std::size_t>(i)].requires_grad;
  }
  std::size_t num_nodes() const { return nodes_.size(); }

  template <class Expr>
  void accumulate(int idx, const Expr& e) {
    Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.grad += e;
  }

  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {
Tape& same_tape(const Tensor& a, const Tensor& b);
void check_shapes_match(const char* op, const Tensor& a, const Tensor& b);
[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b);
std::string shape_str(Eigen::Index r, Eigen::Index c);
}  // namespace detail

// ---- elementwise / scalar ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor sigmoid(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor log_t(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- products ----
Tensor matmul(const Tensor& a, const Tensor& b);     // A * B
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // A * B^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // A^T * B
Tensor dot(const Tensor& a, const Tensor& b);        // column vectors -> 1x1
Tensor rowwise_dot(const Tensor& a, const Tensor& b);  // [n x d] x [n x d] -> [n x 1]
Tensor mul_scalar_t(const Tensor& a, const Tensor& s);  // a * s, s a 1x1 tensor

// ---- broadcasts over rows (v given as column vector) ----
Tensor mul_rowwise(const Tensor& a, const Tensor& v);
Tensor add_rowwise(const Tensor& a, const Tensor& v);

// ---- structure ----
Tensor concat_rows(const std::vector<Tensor>& parts);  // vertical stack
Tensor concat_cols(const std::vector<Tensor>& parts);  // horizontal stack
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index len);
Tensor col_block(const Tensor& a, Eigen::Index start, Eigen::Index len);
Tensor row_as_col(const Tensor& a, Eigen::Index r);
Tensor gather_rows(const Tensor& a, std::vector<int> idx);
Tensor stack_rows(const std::vector<Tensor>& colvecs);  // n column vectors -> [n x d]
Tensor stack_scalars(const std::vector<Tensor>& scalars);  // -> [n x 1]
Tensor pick(const Tensor& v, Eigen::Index i);              // column vector entry -> 1x1
Tensor permute_rc(const Tensor& a, std::vector<int> row_perm, std::vector<int> col_perm);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor colwise_mean(const Tensor& a);  // [n x d] -> [d x 1]
Tensor average(const std::vector<Tensor>& parts);

// ---- normalizations ----
Tensor softmax_vec(const Tensor& a);                      // column vector
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);  // column vector
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);  // each row

// Central finite differences against tape gradients. `build_loss` must
// construct the scalar loss from the current parameter values; it is invoked
// once per perturbed coordinate, so keep the function small.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Eigen::Index worst_row = 0, worst_col = 0;
  double analytic = 0.0, numeric = 0.0;
};

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& build_loss,
                           const std::vector<Parameter*>& params, double h = 1e-6);

}  // namespace tiedgnn
