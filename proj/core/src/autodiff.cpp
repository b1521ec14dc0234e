#include "bilbo/autodiff.hpp"

#include <cmath>
#include <string>

namespace bilbo {

namespace {

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

ArrayMap arr(Tensor& t) { return {t.data().data(), static_cast<Eigen::Index>(t.size())}; }
ConstArrayMap arr(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

Tensor like(const Tensor& t) { return Tensor(t.shape()); }

void same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw ContractError(std::string(op) + ": operands must live on the same tape");
  }
}

void require_same(Var a, Var b, const char* op) {
  same_tape(a, b, op);
  require_same_shape(a.value(), b.value(), op);
}

// Broadcast operand checks: `row` must have a.cols() elements, `col` a.rows().
void require_row(Var a, Var row, const char* op) {
  same_tape(a, row, op);
  if (a.value().rank() != 2 || row.value().size() != a.cols() ||
      (row.value().rank() == 2 && row.value().rows() != 1)) {
    throw DimensionError(std::string(op) + ": row operand " + row.value().shape_string() +
                         " does not broadcast over " + a.value().shape_string());
  }
}

void require_col(Var a, Var col, const char* op) {
  same_tape(a, col, op);
  if (a.value().rank() != 2 || col.value().size() != a.rows() ||
      (col.value().rank() == 2 && col.value().cols() != 1)) {
    throw DimensionError(std::string(op) + ": column operand " + col.value().shape_string() +
                         " does not broadcast over " + a.value().shape_string());
  }
}

Eigen::Map<const Eigen::RowVectorXd> row_view(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}
Eigen::Map<const Eigen::VectorXd> col_view(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

template <typename F>
Var unary(Var a, Tensor out, F&& local_grad) {
  return a.tape().record(std::move(out), {a},
                         [a, local_grad](Tape& tape, const Tensor& g) {
                           Tensor ga = like(g);
                           arr(ga) = arr(g) * local_grad(arr(a.value()));
                           tape.accumulate(a, ga);
                         });
}

}  // namespace

// --- Var -------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// --- Tape ------------------------------------------------------------------

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (&p.tape() != this) throw ContractError("record: parent belongs to another tape");
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.grad.size() == n.value.size() ? n.grad : empty_grad_;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id()].requires_grad) return;
  Tensor& buf = grad_buffer(v);
  if (buf.size() != g.size()) {
    throw DimensionError("gradient of size " + std::to_string(g.size()) +
                         " for node of shape " + buf.shape_string());
  }
  arr(buf) += arr(g);
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (nodes_[loss.id()].value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        nodes_[loss.id()].value.shape_string());
  }
  for (Node& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() != n.value.size()) continue;
    n.backward(*this, n.grad);
  }
  // Parameters that the loss does not reach still report a zero gradient.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.requires_grad && !n.backward && n.grad.size() != n.value.size()) {
      n.grad = Tensor(n.value.shape());
    }
  }
}

// --- operations ------------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  Tensor out = matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga = like(a.value());
      ga.mat().noalias() = g.mat() * b.value().mat().transpose();
      tape.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = like(b.value());
      gb.mat().noalias() = a.value().mat().transpose() * g.mat();
      tape.accumulate(b, gb);
    }
  });
}

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor out = like(a.value());
  arr(out) = arr(a.value()) + arr(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor out = like(a.value());
  arr(out) = arr(a.value()) - arr(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    tape.accumulate(a, g);
    if (b.requires_grad()) {
      Tensor gb = like(g);
      arr(gb) = -arr(g);
      tape.accumulate(b, gb);
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor out = like(a.value());
  arr(out) = arr(a.value()) * arr(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga = like(g);
      arr(ga) = arr(g) * arr(b.value());
      tape.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = like(g);
      arr(gb) = arr(g) * arr(a.value());
      tape.accumulate(b, gb);
    }
  });
}

Var div(Var a, Var b) {
  require_same(a, b, "div");
  Tensor out = like(a.value());
  arr(out) = arr(a.value()) / arr(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga = like(g);
      arr(ga) = arr(g) / arr(b.value());
      tape.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb = like(g);
      arr(gb) = -arr(g) * arr(a.value()) / arr(b.value()).square();
      tape.accumulate(b, gb);
    }
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  Tensor out = like(a.value());
  arr(out) = c * arr(a.value());
  return a.tape().record(std::move(out), {a}, [a, c](Tape& tape, const Tensor& g) {
    Tensor ga = like(g);
    arr(ga) = c * arr(g);
    tape.accumulate(a, ga);
  });
}

Var shift(Var a, double c) {
  Tensor out = like(a.value());
  arr(out) = arr(a.value()) + c;
  return a.tape().record(std::move(out), {a},
                         [a](Tape& tape, const Tensor& g) { tape.accumulate(a, g); });
}

Var add_rowwise(Var a, Var row) {
  require_row(a, row, "add_rowwise");
  Tensor out = a.value();
  out.mat().rowwise() += row_view(row.value());
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& tape, const Tensor& g) {
    tape.accumulate(a, g);
    if (row.requires_grad()) {
      Tensor gr = like(row.value());
      Eigen::Map<Eigen::RowVectorXd>(gr.data().data(), static_cast<Eigen::Index>(gr.size())) =
          g.mat().colwise().sum();
      tape.accumulate(row, gr);
    }
  });
}

Var mul_rowwise(Var a, Var row) {
  require_row(a, row, "mul_rowwise");
  Tensor out = like(a.value());
  out.mat() = a.value().mat().array().rowwise() * row_view(row.value()).array();
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& tape, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga = like(g);
      ga.mat() = g.mat().array().rowwise() * row_view(row.value()).array();
      tape.accumulate(a, ga);
    }
    if (row.requires_grad()) {
      Tensor gr = like(row.value());
      Eigen::Map<Eigen::RowVectorXd>(gr.data().data(), static_cast<Eigen::Index>(gr.size())) =
          (g.mat().array() * a.value().mat().array()).colwise().sum();
      tape.accumulate(row, gr);
    }
  });
}

Var div_rowwise(Var a, Var row) {
  require_row(a, row, "div_rowwise");
  Tensor out = like(a.value());
  out.mat() = a.value().mat().array().rowwise() / row_view(row.value()).array();
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& tape, const Tensor& g) {
    const auto r = row_view(row.value()).array();
    if (a.requires_grad()) {
      Tensor ga = like(g);
      ga.mat() = g.mat().array().rowwise() / r;
      tape.accumulate(a, ga);
    }
    if (row.requires_grad()) {
      Tensor gr = like(row.value());
      Eigen::Map<Eigen::RowVectorXd>(gr.data().data(), static_cast<Eigen::Index>(gr.size())) =
          -(g.mat().array() * a.value().mat().array()).colwise().sum() / r.square();
      tape.accumulate(row, gr);
    }
  });
}

Var mul_colwise(Var a, Var col) {
  require_col(a, col, "mul_colwise");
  Tensor out = like(a.value());
  out.mat() = a.value().mat().array().colwise() * col_view(col.value()).array();
  return a.tape().record(std::move(out), {a, col}, [a, col](Tape& tape, const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga = like(g);
      ga.mat() = g.mat().array().colwise() * col_view(col.value()).array();
      tape.accumulate(a, ga);
    }
    if (col.requires_grad()) {
      Tensor gc = like(col.value());
      Eigen::Map<Eigen::VectorXd>(gc.data().data(), static_cast<Eigen::Index>(gc.size())) =
          (g.mat().array() * a.value().mat().array()).rowwise().sum();
      tape.accumulate(col, gc);
    }
  });
}

Var div_colwise(Var a, Var col) {
  require_col(a, col, "div_colwise");
  Tensor out = like(a.value());
  out.mat() = a.value().mat().array().colwise() / col_view(col.value()).array();
  return a.tape().record(std::move(out), {a, col}, [a, col](Tape& tape, const Tensor& g) {
    const auto c = col_view(col.value()).array();
    if (a.requires_grad()) {
      Tensor ga = like(g);
      ga.mat() = g.mat().array().colwise() / c;
      tape.accumulate(a, ga);
    }
    if (col.requires_grad()) {
      Tensor gc = like(col.value());
      Eigen::Map<Eigen::VectorXd>(gc.data().data(), static_cast<Eigen::Index>(gc.size())) =
          -(g.mat().array() * a.value().mat().array()).rowwise().sum() / c.square();
      tape.accumulate(col, gc);
    }
  });
}

Var relu(Var a) {
  Tensor out = like(a.value());
  arr(out) = arr(a.value()).max(0.0);
  // Subgradient at 0 is 0.
  return unary(a, std::move(out), [](const ConstArrayMap& x) {
    return (x > 0.0).cast<double>().eval();
  });
}

double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double log_sigmoid(double x) { return -softplus(-x); }

Var softplus(Var a) {
  Tensor out = like(a.value());
  arr(out) = arr(a.value()).unaryExpr([](double x) { return softplus(x); });
  return unary(a, std::move(out), [](const ConstArrayMap& x) {
    return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }).eval();
  });
}

Var exp(Var a) {
  Tensor out = like(a.value());
  arr(out) = arr(a.value()).exp();
  return unary(a, std::move(out), [](const ConstArrayMap& x) { return x.exp().eval(); });
}

Var log(Var a) {
  Tensor out = like(a.value());
  arr(out) = arr(a.value()).log();
  return unary(a, std::move(out), [](const ConstArrayMap& x) { return x.inverse().eval(); });
}

Var square(Var a) {
  Tensor out = like(a.value());
  arr(out) = arr(a.value()).square();
  return unary(a, std::move(out), [](const ConstArrayMap& x) { return (2.0 * x).eval(); });
}

Var sqrt(Var a) {
  Tensor out = like(a.value());
  arr(out) = arr(a.value()).sqrt();
  return unary(a, std::move(out),
               [](const ConstArrayMap& x) { return (0.5 * x.rsqrt()).eval(); });
}

Var clamp_min(Var a, double floor, std::size_t* events) {
  Tensor out = like(a.value());
  const auto x = arr(a.value());
  arr(out) = x.max(floor);
  if (events) *events += static_cast<std::size_t>((x < floor).count());
  return unary(a, std::move(out), [floor](const ConstArrayMap& v) {
    return (v >= floor).cast<double>().eval();
  });
}

Var stop_gradient(Var a) { return a.tape().constant(a.value()); }

Var sum(Var a) {
  Tensor out = Tensor::scalar(arr(a.value()).sum());
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& g) {
    Tensor ga = like(a.value());
    ga.fill(g[0]);
    tape.accumulate(a, ga);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sums(Var a) {
  if (a.value().rank() != 2) throw DimensionError("row_sums: expected a matrix");
  Tensor out = Tensor::matrix(a.rows(), 1);
  out.mat() = a.value().mat().rowwise().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Tensor& g) {
    Tensor ga = like(a.value());
    ga.mat() = col_view(g).replicate(1, static_cast<Eigen::Index>(a.cols()));
    tape.accumulate(a, ga);
  });
}

Var column_means(Var a) {
  if (a.value().rank() != 2) throw DimensionError("column_means: expected a matrix");
  const double inv_rows = 1.0 / static_cast<double>(a.rows());
  Tensor out = Tensor::matrix(1, a.cols());
  out.mat() = a.value().mat().colwise().sum() * inv_rows;
  return a.tape().record(std::move(out), {a}, [a, inv_rows](Tape& tape, const Tensor& g) {
    Tensor ga = like(a.value());
    ga.mat() = (row_view(g) * inv_rows).replicate(static_cast<Eigen::Index>(a.rows()), 1);
    tape.accumulate(a, ga);
  });
}

}  // namespace bilbo
