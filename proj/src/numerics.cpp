#include "tiedgnn/numerics.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace tiedgnn {

Eigen::Index Tensor::rows() const { return tape_->value_of(node_).rows(); }
Eigen::Index Tensor::cols() const { return tape_->value_of(node_).cols(); }
const Matrix& Tensor::value() const { return tape_->value_of(node_); }
const Matrix& Tensor::grad() const { return tape_->node(node_).grad; }
bool Tensor::requires_grad() const { return tape_->node_requires_grad(node_); }

double Tensor::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    throw DataError("Tensor::scalar on a " + detail::shape_str(v.rows(), v.cols()) +
                    " tensor");
  }
  return v(0, 0);
}

Tensor Tape::make(Matrix v, bool requires_grad, Pull pull) {
#ifdef TIEDGNN_FINITE_CHECKS
  if (!v.allFinite()) throw DataError("non-finite value produced by a forward op");
#endif
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  n.pull = requires_grad ? std::move(pull) : nullptr;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::leaf(Parameter& p) {
  Parameter* pp = &p;
  return make(p.value, true, [pp](Tape&, const Matrix& g) { pp->grad += g; });
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_) {
    throw DataError("Tape::backward called twice without re-recording");
  }
  if (loss.tape() != this) throw DataError("backward: loss from a different tape");
  if (loss.size() != 1) {
    throw DataError("backward: loss must be scalar, got " +
                    detail::shape_str(loss.rows(), loss.cols()));
  }
  backward_done_ = true;
  if (nodes_.empty()) throw DataError("backward on an empty tape");
  accumulate(loss.id(), Matrix::Ones(1, 1));
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.requires_grad && n.grad.size() != 0 && n.pull) n.pull(*this, n.grad);
  }
}

namespace detail {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << "[" << r << " x " << c << "]";
  return os.str();
}

Tape& same_tape(const Tensor& a, const Tensor& b) {
  if (a.tape() != b.tape()) throw DataError("operands recorded on different tapes");
  return *a.tape();
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DataError(std::string(op) + ": incompatible shapes " +
                  shape_str(a.rows(), a.cols()) + " and " +
                  shape_str(b.rows(), b.cols()));
}

void check_shapes_match(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

}  // namespace detail

using detail::check_shapes_match;
using detail::same_tape;
using detail::shape_error;

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  check_shapes_match("add", a, b);
  int ai = a.id(), bi = b.id();
  return t.make(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, g);
                  tp.accumulate(bi, g);
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  check_shapes_match("sub", a, b);
  int ai = a.id(), bi = b.id();
  return t.make(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, g);
                  tp.accumulate(bi, -g);
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  check_shapes_match("mul", a, b);
  int ai = a.id(), bi = b.id();
  return t.make(a.value().cwiseProduct(b.value()),
                a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, g.cwiseProduct(tp.value_of(bi)));
                  tp.accumulate(bi, g.cwiseProduct(tp.value_of(ai)));
                });
}

Tensor neg(const Tensor& a) {
  int ai = a.id();
  return a.tape()->make(-a.value(), a.requires_grad(),
                        [ai](Tape& tp, const Matrix& g) { tp.accumulate(ai, -g); });
}

Tensor scale(const Tensor& a, double c) {
  int ai = a.id();
  return a.tape()->make(a.value() * c, a.requires_grad(),
                        [ai, c](Tape& tp, const Matrix& g) { tp.accumulate(ai, g * c); });
}

Tensor add_scalar(const Tensor& a, double c) {
  int ai = a.id();
  return a.tape()->make(a.value().array() + c, a.requires_grad(),
                        [ai](Tape& tp, const Matrix& g) { tp.accumulate(ai, g); });
}

Tensor sigmoid(const Tensor& a) {
  Tape& t = *a.tape();
  int ai = a.id();
  int yi = t.next_index();
  Matrix y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return t.make(std::move(y), a.requires_grad(), [ai, yi](Tape& tp, const Matrix& g) {
    const auto y = tp.value_of(yi).array();
    tp.accumulate(ai, (g.array() * y * (1.0 - y)).matrix());
  });
}

Tensor tanh_t(const Tensor& a) {
  Tape& t = *a.tape();
  int ai = a.id();
  int yi = t.next_index();
  return t.make(a.value().array().tanh().matrix(), a.requires_grad(),
                [ai, yi](Tape& tp, const Matrix& g) {
                  const auto y = tp.value_of(yi).array();
                  tp.accumulate(ai, (g.array() * (1.0 - y * y)).matrix());
                });
}

Tensor relu(const Tensor& a) {
  int ai = a.id();
  return a.tape()->make(a.value().cwiseMax(0.0), a.requires_grad(),
                        [ai](Tape& tp, const Matrix& g) {
                          const auto x = tp.value_of(ai).array();
                          tp.accumulate(ai,
                                        (g.array() * (x > 0.0).cast<double>()).matrix());
                        });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  int ai = a.id();
  Matrix y = a.value().unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
  return a.tape()->make(std::move(y), a.requires_grad(),
                        [ai, slope](Tape& tp, const Matrix& g) {
                          const auto x = tp.value_of(ai).array();
                          tp.accumulate(
                              ai, (g.array() * (x > 0.0).select(
                                                   Eigen::ArrayXXd::Constant(
                                                       x.rows(), x.cols(), 1.0),
                                                   slope))
                                      .matrix());
                        });
}

Tensor log_t(const Tensor& a) {
  int ai = a.id();
  return a.tape()->make(a.value().array().log().matrix(), a.requires_grad(),
                        [ai](Tape& tp, const Matrix& g) {
                          tp.accumulate(
                              ai, (g.array() / tp.value_of(ai).array()).matrix());
                        });
}

Tensor softplus(const Tensor& a) {
  int ai = a.id();
  Matrix y = a.value().unaryExpr(
      [](double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); });
  return a.tape()->make(std::move(y), a.requires_grad(),
                        [ai](Tape& tp, const Matrix& g) {
                          const auto x = tp.value_of(ai).array();
                          tp.accumulate(ai,
                                        (g.array() / (1.0 + (-x).exp())).matrix());
                        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  int ai = a.id();
  return a.tape()->make(a.value().cwiseMax(lo).cwiseMin(hi), a.requires_grad(),
                        [ai, lo, hi](Tape& tp, const Matrix& g) {
                          const auto x = tp.value_of(ai).array();
                          tp.accumulate(ai, (g.array() * (x > lo && x < hi).cast<double>())
                                                .matrix());
                        });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  int ai = a.id(), bi = b.id();
  return t.make(a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, g * tp.value_of(bi).transpose());
                  tp.accumulate(bi, tp.value_of(ai).transpose() * g);
                });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
  int ai = a.id(), bi = b.id();
  return t.make(a.value() * b.value().transpose(),
                a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, g * tp.value_of(bi));
                  tp.accumulate(bi, g.transpose() * tp.value_of(ai));
                });
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  if (a.rows() != b.rows()) shape_error("matmul_tn", a, b);
  int ai = a.id(), bi = b.id();
  return t.make(a.value().transpose() * b.value(),
                a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, tp.value_of(bi) * g.transpose());
                  tp.accumulate(bi, tp.value_of(ai) * g);
                });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != 1 || b.cols() != 1 || a.rows() != b.rows()) {
    shape_error("dot", a, b);
  }
  int ai = a.id(), bi = b.id();
  return t.make(Matrix::Constant(1, 1, a.value().col(0).dot(b.value().col(0))),
                a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, tp.value_of(bi) * g(0, 0));
                  tp.accumulate(bi, tp.value_of(ai) * g(0, 0));
                });
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b);
  check_shapes_match("rowwise_dot", a, b);
  int ai = a.id(), bi = b.id();
  Matrix y = a.value().cwiseProduct(b.value()).rowwise().sum();
  return t.make(std::move(y), a.requires_grad() || b.requires_grad(),
                [ai, bi](Tape& tp, const Matrix& g) {
                  const auto gcol = g.col(0).array();
                  tp.accumulate(ai,
                                (tp.value_of(bi).array().colwise() * gcol).matrix());
                  tp.accumulate(bi,
                                (tp.value_of(ai).array().colwise() * gcol).matrix());
                });
}

Tensor mul_scalar_t(const Tensor& a, const Tensor& s) {
  Tape& t = same_tape(a, s);
  if (s.rows() != 1 || s.cols() != 1) shape_error("mul_scalar_t", a, s);
  int ai = a.id(), si = s.id();
  return t.make(a.value() * s.value()(0, 0), a.requires_grad() || s.requires_grad(),
                [ai, si](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, g * tp.value_of(si)(0, 0));
                  tp.accumulate(si, Matrix::Constant(
                                        1, 1, tp.value_of(ai).cwiseProduct(g).sum()));
                });
}

Tensor mul_rowwise(const Tensor& a, const Tensor& v) {
  Tape& t = same_tape(a, v);
  if (v.cols() != 1 || v.rows() != a.cols()) shape_error("mul_rowwise", a, v);
  int ai = a.id(), vi = v.id();
  Matrix y = a.value().array().rowwise() * v.value().col(0).transpose().array();
  return t.make(std::move(y), a.requires_grad() || v.requires_grad(),
                [ai, vi](Tape& tp, const Matrix& g) {
                  const auto vrow = tp.value_of(vi).col(0).transpose().array();
                  tp.accumulate(ai, (g.array().rowwise() * vrow).matrix());
                  tp.accumulate(
                      vi, tp.value_of(ai).cwiseProduct(g).colwise().sum().transpose());
                });
}

Tensor add_rowwise(const Tensor& a, const Tensor& v) {
  Tape& t = same_tape(a, v);
  if (v.cols() != 1 || v.rows() != a.cols()) shape_error("add_rowwise", a, v);
  int ai = a.id(), vi = v.id();
  Matrix y = a.value().array().rowwise() + v.value().col(0).transpose().array();
  return t.make(std::move(y), a.requires_grad() || v.requires_grad(),
                [ai, vi](Tape& tp, const Matrix& g) {
                  tp.accumulate(ai, g);
                  tp.accumulate(vi, g.colwise().sum().transpose());
                });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DataError("concat_rows: empty input");
  Tape& t = *parts[0].tape();
  Eigen::Index cols = parts[0].cols(), rows = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> lens;
  ids.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.tape() != &t) throw DataError("concat_rows: mixed tapes");
    if (p.cols() != cols) shape_error("concat_rows", parts[0], p);
    rows += p.rows();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
    lens.push_back(p.rows());
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.make(std::move(y), rg,
                [ids = std::move(ids), lens = std::move(lens)](Tape& tp, const Matrix& g) {
                  Eigen::Index at = 0;
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    tp.accumulate(ids[i], g.middleRows(at, lens[i]));
                    at += lens[i];
                  }
                });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DataError("concat_cols: empty input");
  Tape& t = *parts[0].tape();
  Eigen::Index rows = parts[0].rows(), cols = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> lens;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw DataError("concat_cols: mixed tapes");
    if (p.rows() != rows) shape_error("concat_cols", parts[0], p);
    cols += p.cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
    lens.push_back(p.cols());
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.make(std::move(y), rg,
                [ids = std::move(ids), lens = std::move(lens)](Tape& tp, const Matrix& g) {
                  Eigen::Index at = 0;
                  for (std::size_t i = 0; i < ids.size(); ++i) {
                    tp.accumulate(ids[i], g.middleCols(at, lens[i]));
                    at += lens[i];
                  }
                });
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index len) {
  if (start < 0 || len < 0 || start + len > a.rows()) {
    throw DataError("slice_rows: range [" + std::to_string(start) + ", " +
                    std::to_string(start + len) + ") out of " +
                    std::to_string(a.rows()) + " rows");
  }
  int ai = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape()->make(a.value().middleRows(start, len), a.requires_grad(),
                        [ai, start, len, rows, cols](Tape& tp, const Matrix& g) {
                          Matrix full = Matrix::Zero(rows, cols);
                          full.middleRows(start, len) = g;
                          tp.accumulate(ai, full);
                        });
}

Tensor col_block(const Tensor& a, Eigen::Index start, Eigen::Index len) {
  if (start < 0 || len < 0 || start + len > a.cols()) {
    throw DataError("col_block: range out of " + std::to_string(a.cols()) + " cols");
  }
  int ai = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape()->make(a.value().middleCols(start, len), a.requires_grad(),
                        [ai, start, len, rows, cols](Tape& tp, const Matrix& g) {
                          Matrix full = Matrix::Zero(rows, cols);
                          full.middleCols(start, len) = g;
                          tp.accumulate(ai, full);
                        });
}

Tensor row_as_col(const Tensor& a, Eigen::Index r) {
  if (r < 0 || r >= a.rows()) throw DataError("row_as_col: row out of range");
  int ai = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape()->make(a.value().row(r).transpose(), a.requires_grad(),
                        [ai, r, rows, cols](Tape& tp, const Matrix& g) {
                          Matrix full = Matrix::Zero(rows, cols);
                          full.row(r) = g.transpose();
                          tp.accumulate(ai, full);
                        });
}

Tensor gather_rows(const Tensor& a, std::vector<int> idx) {
  int ai = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix y(static_cast<Eigen::Index>(idx.size()), cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw DataError("gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  return a.tape()->make(std::move(y), a.requires_grad(),
                        [ai, idx = std::move(idx), rows, cols](Tape& tp, const Matrix& g) {
                          Matrix full = Matrix::Zero(rows, cols);
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                          }
                          tp.accumulate(ai, full);
                        });
}

Tensor stack_rows(const std::vector<Tensor>& colvecs) {
  if (colvecs.empty()) throw DataError("stack_rows: empty input");
  Tape& t = *colvecs[0].tape();
  Eigen::Index d = colvecs[0].rows();
  bool rg = false;
  std::vector<int> ids;
  Matrix y(static_cast<Eigen::Index>(colvecs.size()), d);
  for (std::size_t i = 0; i < colvecs.size(); ++i) {
    const Tensor& v = colvecs[i];
    if (v.tape() != &t) throw DataError("stack_rows: mixed tapes");
    if (v.cols() != 1 || v.rows() != d) shape_error("stack_rows", colvecs[0], v);
    y.row(static_cast<Eigen::Index>(i)) = v.value().col(0).transpose();
    rg = rg || v.requires_grad();
    ids.push_back(v.id());
  }
  return t.make(std::move(y), rg, [ids = std::move(ids)](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      tp.accumulate(ids[i], g.row(static_cast<Eigen::Index>(i)).transpose());
    }
  });
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw DataError("stack_scalars: empty input");
  Tape& t = *scalars[0].tape();
  bool rg = false;
  std::vector<int> ids;
  Matrix y(static_cast<Eigen::Index>(scalars.size()), 1);
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const Tensor& s = scalars[i];
    if (s.tape() != &t) throw DataError("stack_scalars: mixed tapes");
    if (s.size() != 1) throw DataError("stack_scalars: non-scalar input");
    y(static_cast<Eigen::Index>(i), 0) = s.value()(0, 0);
    rg = rg || s.requires_grad();
    ids.push_back(s.id());
  }
  return t.make(std::move(y), rg, [ids = std::move(ids)](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      tp.accumulate(ids[i], g.block(static_cast<Eigen::Index>(i), 0, 1, 1));
    }
  });
}

Tensor pick(const Tensor& v, Eigen::Index i) {
  if (v.cols() != 1 || i < 0 || i >= v.rows()) {
    throw DataError("pick: index " + std::to_string(i) + " out of column vector " +
                    detail::shape_str(v.rows(), v.cols()));
  }
  int vi = v.id();
  Eigen::Index rows = v.rows();
  return v.tape()->make(v.value().block(i, 0, 1, 1), v.requires_grad(),
                        [vi, i, rows](Tape& tp, const Matrix& g) {
                          Matrix full = Matrix::Zero(rows, 1);
                          full(i, 0) = g(0, 0);
                          tp.accumulate(vi, full);
                        });
}

Tensor permute_rc(const Tensor& a, std::vector<int> row_perm, std::vector<int> col_perm) {
  if (static_cast<Eigen::Index>(row_perm.size()) != a.rows() ||
      static_cast<Eigen::Index>(col_perm.size()) != a.cols()) {
    throw DataError("permute_rc: permutation sizes do not match tensor shape");
  }
  int ai = a.id();
  Matrix y(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      y(i, j) = a.value()(row_perm[static_cast<std::size_t>(i)],
                          col_perm[static_cast<std::size_t>(j)]);
    }
  }
  return a.tape()->make(std::move(y), a.requires_grad(),
                        [ai, row_perm = std::move(row_perm),
                         col_perm = std::move(col_perm)](Tape& tp, const Matrix& g) {
                          Matrix full = Matrix::Zero(g.rows(), g.cols());
                          for (Eigen::Index i = 0; i < g.rows(); ++i) {
                            for (Eigen::Index j = 0; j < g.cols(); ++j) {
                              full(row_perm[static_cast<std::size_t>(i)],
                                   col_perm[static_cast<std::size_t>(j)]) += g(i, j);
                            }
                          }
                          tp.accumulate(ai, full);
                        });
}

Tensor sum_all(const Tensor& a) {
  int ai = a.id();
  return a.tape()->make(Matrix::Constant(1, 1, a.value().sum()), a.requires_grad(),
                        [ai](Tape& tp, const Matrix& g) {
                          const Matrix& v = tp.value_of(ai);
                          tp.accumulate(ai,
                                        Matrix::Constant(v.rows(), v.cols(), g(0, 0)));
                        });
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / double(a.size())); }

Tensor colwise_mean(const Tensor& a) {
  int ai = a.id();
  double inv = 1.0 / double(a.rows());
  return a.tape()->make(a.value().colwise().mean().transpose(), a.requires_grad(),
                        [ai, inv](Tape& tp, const Matrix& g) {
                          const Matrix& v = tp.value_of(ai);
                          tp.accumulate(ai, Matrix::Ones(v.rows(), 1) *
                                                (g.transpose() * inv));
                        });
}

Tensor average(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DataError("average: empty input");
  Tensor acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / double(parts.size()));
}

Tensor softmax_vec(const Tensor& a) {
  if (a.cols() != 1) {
    throw DataError("softmax_vec: expected column vector, got " +
                    detail::shape_str(a.rows(), a.cols()));
  }
  Tape& t = *a.tape();
  int ai = a.id();
  int yi = t.next_index();
  Eigen::ArrayXd e = (a.value().col(0).array() - a.value().col(0).maxCoeff()).exp();
  Matrix y = (e / e.sum()).matrix();
  return t.make(std::move(y), a.requires_grad(), [ai, yi](Tape& tp, const Matrix& g) {
    const auto y = tp.value_of(yi).col(0).array();
    double gy = (g.col(0).array() * y).sum();
    tp.accumulate(ai, (y * (g.col(0).array() - gy)).matrix());
  });
}

Tensor l2_normalize(const Tensor& a, double eps) {
  if (a.cols() != 1) {
    throw DataError("l2_normalize: expected column vector, got " +
                    detail::shape_str(a.rows(), a.cols()));
  }
  Tape& t = *a.tape();
  int ai = a.id();
  double n = a.value().col(0).norm();
  if (n < eps) {
    // eps-guarded linear branch for (near-)zero inputs
    return t.make(a.value() / eps, a.requires_grad(),
                  [ai, eps](Tape& tp, const Matrix& g) { tp.accumulate(ai, g / eps); });
  }
  int yi = t.next_index();
  return t.make(a.value() / n, a.requires_grad(), [ai, yi, n](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value_of(yi);
    double gy = y.col(0).dot(g.col(0));
    tp.accumulate(ai, (g - y * gy) / n);
  });
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  Tape& t = *a.tape();
  int ai = a.id();
  int yi = t.next_index();
  Matrix y = a.value();
  std::vector<double> norms(std::size_t(a.rows()));
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    double n = y.row(r).norm();
    norms[std::size_t(r)] = n;
    y.row(r) /= (n < eps) ? eps : n;
  }
  return t.make(std::move(y), a.requires_grad(),
                [ai, yi, eps, norms](Tape& tp, const Matrix& g) {
                  const Matrix& y = tp.value_of(yi);
                  Matrix da(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    double n = norms[std::size_t(r)];
                    if (n < eps) {
                      da.row(r) = g.row(r) / eps;
                    } else {
                      double gy = y.row(r).dot(g.row(r));
                      da.row(r) = (g.row(r) - y.row(r) * gy) / n;
                    }
                  }
                  tp.accumulate(ai, da);
                });
}

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& build_loss,
                           const std::vector<Parameter*>& params, double h) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Tensor loss = build_loss(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    return build_loss(tape).scalar();
  };
  GradCheckReport rep;
  for (Parameter* p : params) {
    for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        double saved = p->value(r, c);
        p->value(r, c) = saved + h;
        double fp = eval();
        p->value(r, c) = saved - h;
        double fm = eval();
        p->value(r, c) = saved;
        double fd = (fp - fm) / (2.0 * h);
        double an = p->grad(r, c);
        double err = std::fabs(fd - an) / std::fmax(1.0, std::fmax(std::fabs(fd), std::fabs(an)));
        if (err > rep.max_rel_err) {
          rep.max_rel_err = err;
          rep.worst_param = p->name;
          rep.worst_row = r;
          rep.worst_col = c;
          rep.analytic = an;
          rep.numeric = fd;
        }
      }
    }
  }
  return rep;
}

}  // namespace tiedgnn
