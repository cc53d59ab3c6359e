#include "npattack/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "npattack/error.hpp"
#include "npattack/kernels.hpp"

namespace npattack::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Affine: return "affine";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::AddRow: return "add_row";
    case Op::Scale: return "scale";
    case Op::ConcatCols: return "concat_cols";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::Attention: return "attention";
    case Op::MeanRows: return "mean_rows";
    case Op::Sum: return "sum";
    case Op::GaussianLogDensity: return "gaussian_log_density";
    case Op::DiagGaussianKl: return "diag_gaussian_kl";
  }
  return "?";
}

const Tensor& Var::value() const {
  NPATTACK_REQUIRE(tape_ != nullptr, "variable is not attached to a tape");
  return tape_->value(index_);
}

Var Tape::leaf(Tensor& param) {
  if (auto it = leaf_index_.find(&param); it != leaf_index_.end()) return Var(this, it->second);
  Node n;
  n.op = Op::Leaf;
  n.leaf = &param;
  Var v = push(std::move(n));
  leaf_index_.emplace(&param, v.index());
  return v;
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::push(Node node) {
  NPATTACK_REQUIRE(!backward_done_, "cannot record onto a tape after backward()");
  for (std::size_t p = 0; p < node.parent_count; ++p)
    NPATTACK_REQUIRE(node.parents[p] < nodes_.size(), "tape parents must precede their children");
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::vector<double>& Tape::adjoint(std::size_t i) {
  Node& n = nodes_[i];
  if (n.adjoint.empty()) n.adjoint.assign(value(i).size(), 0.0);
  return n.adjoint;
}

void Tape::backward(Var loss) {
  NPATTACK_REQUIRE(loss.tape() == this && loss.index() < nodes_.size(), "backward: loss is not on this tape");
  NPATTACK_REQUIRE(value(loss.index()).size() == 1, "backward: loss must be a scalar");
  NPATTACK_REQUIRE(!backward_done_, "backward: tape already consumed");
  backward_done_ = true;
  for (Node& n : nodes_) n.adjoint.clear();
  adjoint(loss.index())[0] = 1.0;
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    if (nodes_[i].adjoint.empty() || nodes_[i].parent_count == 0) continue;
    propagate(i);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op != Op::Leaf) continue;
    if (n.adjoint.empty()) n.adjoint.assign(n.leaf->size(), 0.0);
    if (sink_ == GradientSink::Parameters) {
      if (!n.leaf->has_grad()) n.leaf->zero_grad();
      auto g = n.leaf->grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.adjoint[j];
    }
  }
}

std::span<const double> Tape::leaf_gradient(const Tensor& param) const {
  auto it = leaf_index_.find(&param);
  NPATTACK_REQUIRE(it != leaf_index_.end(), "leaf_gradient: tensor is not a leaf of this tape");
  NPATTACK_REQUIRE(backward_done_, "leaf_gradient: backward() has not run");
  return nodes_[it->second].adjoint;
}

// Builds nodes for the free-function primitives.
class Recorder {
 public:
  static Var make(Op op, Tensor value, std::initializer_list<Var> parents, double param = 0.0,
                  std::vector<double> saved = {}) {
    Tape* tape = nullptr;
    Tape::Node n;
    n.op = op;
    n.value = std::move(value);
    n.param = param;
    n.saved = std::move(saved);
    NPATTACK_REQUIRE(parents.size() <= n.parents.size(), "too many operands");
    for (const Var& p : parents) {
      NPATTACK_REQUIRE(p.tape() != nullptr, "operand is not attached to a tape");
      NPATTACK_REQUIRE(tape == nullptr || tape == p.tape(), "operands live on different tapes");
      tape = p.tape();
      n.parents[n.parent_count++] = p.index();
    }
    return tape->push(std::move(n));
  }
  static Tape::Node& node(Tape& t, std::size_t i) { return t.nodes_[i]; }
  static std::vector<double>& adjoint(Tape& t, std::size_t i) { return t.adjoint(i); }
};

namespace {

Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  NPATTACK_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), std::string(what) + ": shape mismatch");
}

double sigmoid_of(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_of(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  NPATTACK_REQUIRE(A.cols() == B.rows(), "matmul: inner dimensions disagree");
  Tensor out = matrix(A.rows(), B.cols());
  kernels::matmul(A.view(), B.view(), out.view());
  return Recorder::make(Op::MatMul, std::move(out), {a, b});
}

Var affine(Var x, Var w, Var b) {
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  const Tensor& B = b.value();
  NPATTACK_REQUIRE(X.cols() == W.rows(), "affine: input width does not match weight rows");
  NPATTACK_REQUIRE(B.size() == W.cols(), "affine: bias width does not match weight columns");
  Tensor out = matrix(X.rows(), W.cols());
  const std::size_t m = W.cols();
  for (std::size_t i = 0; i < X.rows(); ++i) std::copy(B.values().begin(), B.values().end(), out.values().begin() + i * m);
  kernels::matmul(X.view(), W.view(), out.view(), /*accumulate=*/true);
  return Recorder::make(Op::Affine, std::move(out), {x, w, b});
}

Var relu(Var x) {
  Tensor out = x.value();
  out.drop_grad();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return Recorder::make(Op::Relu, std::move(out), {x});
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  out.drop_grad();
  for (double& v : out.values()) v = sigmoid_of(v);
  return Recorder::make(Op::Sigmoid, std::move(out), {x});
}

Var softplus(Var x) {
  Tensor out = x.value();
  out.drop_grad();
  for (double& v : out.values()) v = softplus_of(v);
  return Recorder::make(Op::Softplus, std::move(out), {x});
}

Var log_softmax_rows(Var x) {
  const Tensor& X = x.value();
  Tensor out = matrix(X.rows(), X.cols());
  const std::size_t m = X.cols();
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const double* xi = X.values().data() + i * m;
    double* oi = out.values().data() + i * m;
    const double peak = *std::max_element(xi, xi + m);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(xi[j] - peak);
    const double lse = peak + std::log(total);
    for (std::size_t j = 0; j < m; ++j) oi[j] = xi[j] - lse;
  }
  return Recorder::make(Op::LogSoftmax, std::move(out), {x});
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = matrix(a.rows(), a.cols());
  auto A = a.value().values(), B = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  return Recorder::make(Op::Add, std::move(out), {a, b});
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = matrix(a.rows(), a.cols());
  auto A = a.value().values(), B = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return Recorder::make(Op::Sub, std::move(out), {a, b});
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = matrix(a.rows(), a.cols());
  auto A = a.value().values(), B = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return Recorder::make(Op::Mul, std::move(out), {a, b});
}

Var add_row(Var x, Var row) {
  const Tensor& X = x.value();
  const Tensor& R = row.value();
  NPATTACK_REQUIRE(R.size() == X.cols(), "add_row: row width does not match");
  Tensor out = matrix(X.rows(), X.cols());
  const std::size_t m = X.cols();
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = X[i * m + j] + R[j];
  return Recorder::make(Op::AddRow, std::move(out), {x, row});
}

Var scale(Var x, double factor) {
  Tensor out = matrix(x.rows(), x.cols());
  auto X = x.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * factor;
  return Recorder::make(Op::Scale, std::move(out), {x}, factor);
}

Var concat_cols(std::span<const Var> parts) {
  NPATTACK_REQUIRE(!parts.empty() && parts.size() <= 4, "concat_cols: expects 1 to 4 parts");
  const std::size_t n = parts[0].rows();
  std::size_t width = 0;
  for (const Var& p : parts) {
    NPATTACK_REQUIRE(p.rows() == n, "concat_cols: row counts disagree");
    width += p.cols();
  }
  Tensor out = matrix(n, width);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    const std::size_t w = P.cols();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(P.values().begin() + i * w, w, out.values().begin() + i * width + offset);
    offset += w;
  }
  Var v;
  switch (parts.size()) {
    case 1: v = Recorder::make(Op::ConcatCols, std::move(out), {parts[0]}); break;
    case 2: v = Recorder::make(Op::ConcatCols, std::move(out), {parts[0], parts[1]}); break;
    case 3: v = Recorder::make(Op::ConcatCols, std::move(out), {parts[0], parts[1], parts[2]}); break;
    default: v = Recorder::make(Op::ConcatCols, std::move(out), {parts[0], parts[1], parts[2], parts[3]});
  }
  return v;
}

Var broadcast_rows(Var row, std::size_t n) {
  NPATTACK_REQUIRE(n >= 1, "broadcast_rows: need at least one row");
  const Tensor& R = row.value();
  const std::size_t m = R.size();
  Tensor out = matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) std::copy(R.values().begin(), R.values().end(), out.values().begin() + i * m);
  return Recorder::make(Op::BroadcastRows, std::move(out), {row});
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& X = x.value();
  NPATTACK_REQUIRE(count >= 1 && start + count <= X.cols(), "slice_cols: range out of bounds");
  Tensor out = matrix(X.rows(), count);
  for (std::size_t i = 0; i < X.rows(); ++i)
    std::copy_n(X.values().begin() + i * X.cols() + start, count, out.values().begin() + i * count);
  return Recorder::make(Op::SliceCols, std::move(out), {x}, static_cast<double>(start));
}

Var scaled_dot_attention(Var queries, Var keys, Var values) {
  const Tensor& Q = queries.value();
  const Tensor& K = keys.value();
  const Tensor& V = values.value();
  NPATTACK_REQUIRE(Q.cols() == K.cols(), "attention: query/key widths disagree");
  NPATTACK_REQUIRE(K.rows() == V.rows(), "attention: key/value counts disagree");
  Tensor out = matrix(Q.rows(), V.cols());
  std::vector<double> weights(Q.rows() * K.rows());
  kernels::attention(Q.view(), K.view(), V.view(), out.view(), {weights, Q.rows(), K.rows()});
  return Recorder::make(Op::Attention, std::move(out), {queries, keys, values}, 0.0, std::move(weights));
}

Var mean_rows(Var x) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), m = X.cols();
  Tensor out = matrix(1, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += X[i * m + j];
  for (double& v : out.values()) v /= static_cast<double>(n);
  return Recorder::make(Op::MeanRows, std::move(out), {x});
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return Recorder::make(Op::Sum, Tensor::scalar(s), {x});
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var gaussian_log_density(Var mean_var, const Tensor& observed, double sigma) {
  NPATTACK_REQUIRE(sigma > 0.0, "gaussian_log_density: sigma must be positive");
  const Tensor& M = mean_var.value();
  NPATTACK_REQUIRE(M.size() == observed.size(), "gaussian_log_density: shape mismatch");
  const double norm = -std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  for (std::size_t i = 0; i < M.size(); ++i) {
    const double z = (observed[i] - M[i]) / sigma;
    total += -0.5 * z * z + norm;
  }
  std::vector<double> saved(observed.values().begin(), observed.values().end());
  return Recorder::make(Op::GaussianLogDensity, Tensor::scalar(total), {mean_var}, sigma, std::move(saved));
}

Var diag_gaussian_kl(Var mu_q, Var sigma_q, Var mu_p, Var sigma_p) {
  const Tensor& mq = mu_q.value();
  const Tensor& sq = sigma_q.value();
  const Tensor& mp = mu_p.value();
  const Tensor& sp = sigma_p.value();
  const std::size_t d = mq.size();
  NPATTACK_REQUIRE(sq.size() == d && mp.size() == d && sp.size() == d, "diag_gaussian_kl: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    NPATTACK_REQUIRE(sq[i] > 0.0 && sp[i] > 0.0, "diag_gaussian_kl: sigma must be positive");
    const double diff = mq[i] - mp[i];
    total += std::log(sp[i] / sq[i]) + (sq[i] * sq[i] + diff * diff) / (2.0 * sp[i] * sp[i]) - 0.5;
  }
  return Recorder::make(Op::DiagGaussianKl, Tensor::scalar(total), {mu_q, sigma_q, mu_p, sigma_p});
}

// ---- adjoint rules ---------------------------------------------------------

void Tape::propagate(std::size_t i) {
  Node& n = nodes_[i];
  const std::vector<double> g = n.adjoint;  // copy: parent adjoint() may reallocate nodes' storage
  const Tensor& out = value(i);
  auto parent = [&](std::size_t k) -> const Tensor& { return value(n.parents[k]); };
  auto grad_of = [&](std::size_t k) -> std::vector<double>& { return adjoint(n.parents[k]); };
  kernels::ConstMatrix G{g, out.rows(), out.cols()};

  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      break;
    case Op::MatMul:
    case Op::Affine: {
      const Tensor& A = parent(0);
      const Tensor& B = parent(1);
      auto& ga = grad_of(0);
      kernels::matmul_nt(G, B.view(), {ga, A.rows(), A.cols()}, true);
      auto& gb = grad_of(1);
      kernels::matmul_tn(A.view(), G, {gb, B.rows(), B.cols()}, true);
      if (n.op == Op::Affine) {
        auto& gbias = grad_of(2);
        const std::size_t m = out.cols();
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t j = 0; j < m; ++j) gbias[j] += g[r * m + j];
      }
      break;
    }
    case Op::Relu: {
      auto& gx = grad_of(0);
      for (std::size_t j = 0; j < g.size(); ++j)
        if (out[j] > 0.0) gx[j] += g[j];
      break;
    }
    case Op::Sigmoid: {
      auto& gx = grad_of(0);
      for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] * out[j] * (1.0 - out[j]);
      break;
    }
    case Op::Softplus: {
      const Tensor& X = parent(0);
      auto& gx = grad_of(0);
      for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] * sigmoid_of(X[j]);
      break;
    }
    case Op::LogSoftmax: {
      auto& gx = grad_of(0);
      const std::size_t m = out.cols();
      for (std::size_t r = 0; r < out.rows(); ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) total += g[r * m + j];
        for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += g[r * m + j] - std::exp(out[r * m + j]) * total;
      }
      break;
    }
    case Op::Add: {
      for (std::size_t k = 0; k < 2; ++k) {
        auto& gp = grad_of(k);
        for (std::size_t j = 0; j < g.size(); ++j) gp[j] += g[j];
      }
      break;
    }
    case Op::Sub: {
      auto& ga = grad_of(0);
      for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
      auto& gb = grad_of(1);
      for (std::size_t j = 0; j < g.size(); ++j) gb[j] -= g[j];
      break;
    }
    case Op::Mul: {
      const Tensor& A = parent(0);
      const Tensor& B = parent(1);
      auto& ga = grad_of(0);
      for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j] * B[j];
      auto& gb = grad_of(1);
      for (std::size_t j = 0; j < g.size(); ++j) gb[j] += g[j] * A[j];
      break;
    }
    case Op::AddRow: {
      auto& gx = grad_of(0);
      for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j];
      auto& gr = grad_of(1);
      const std::size_t m = out.cols();
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t j = 0; j < m; ++j) gr[j] += g[r * m + j];
      break;
    }
    case Op::Scale: {
      auto& gx = grad_of(0);
      for (std::size_t j = 0; j < g.size(); ++j) gx[j] += g[j] * n.param;
      break;
    }
    case Op::ConcatCols: {
      const std::size_t width = out.cols();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parent_count; ++k) {
        const std::size_t w = parent(k).cols();
        auto& gp = grad_of(k);
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * width + offset + j];
        offset += w;
      }
      break;
    }
    case Op::BroadcastRows: {
      auto& gr = grad_of(0);
      const std::size_t m = out.cols();
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t j = 0; j < m; ++j) gr[j] += g[r * m + j];
      break;
    }
    case Op::SliceCols: {
      const std::size_t start = static_cast<std::size_t>(n.param);
      const std::size_t width = parent(0).cols();
      const std::size_t count = out.cols();
      auto& gx = grad_of(0);
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t j = 0; j < count; ++j) gx[r * width + start + j] += g[r * count + j];
      break;
    }
    case Op::Attention: {
      const Tensor& Q = parent(0);
      const Tensor& K = parent(1);
      const Tensor& V = parent(2);
      const std::size_t nq = Q.rows(), m = K.rows();
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
      kernels::ConstMatrix P{n.saved, nq, m};
      // dV = Pᵀ·dO
      kernels::matmul_tn(P, G, {grad_of(2), V.rows(), V.cols()}, true);
      // dP = dO·Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-scaled by 1/sqrt(d)
      std::vector<double> ds(nq * m);
      kernels::matmul_nt(G, V.view(), {ds, nq, m});
      for (std::size_t r = 0; r < nq; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += ds[r * m + j] * P(r, j);
        for (std::size_t j = 0; j < m; ++j) ds[r * m + j] = P(r, j) * (ds[r * m + j] - dot) * inv_sqrt_d;
      }
      kernels::ConstMatrix DS{ds, nq, m};
      kernels::matmul(DS, K.view(), {grad_of(0), Q.rows(), Q.cols()}, true);
      kernels::matmul_tn(DS, Q.view(), {grad_of(1), K.rows(), K.cols()}, true);
      break;
    }
    case Op::MeanRows: {
      const Tensor& X = parent(0);
      auto& gx = grad_of(0);
      const std::size_t m = X.cols();
      const double inv = 1.0 / static_cast<double>(X.rows());
      for (std::size_t r = 0; r < X.rows(); ++r)
        for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += g[j] * inv;
      break;
    }
    case Op::Sum: {
      auto& gx = grad_of(0);
      for (double& v : gx) v += g[0];
      break;
    }
    case Op::GaussianLogDensity: {
      const Tensor& M = parent(0);
      auto& gm = grad_of(0);
      const double inv_var = 1.0 / (n.param * n.param);
      for (std::size_t j = 0; j < M.size(); ++j) gm[j] += g[0] * (n.saved[j] - M[j]) * inv_var;
      break;
    }
    case Op::DiagGaussianKl: {
      const Tensor& mq = parent(0);
      const Tensor& sq = parent(1);
      const Tensor& mp = parent(2);
      const Tensor& sp = parent(3);
      auto& gmq = grad_of(0);
      auto& gsq = grad_of(1);
      auto& gmp = grad_of(2);
      auto& gsp = grad_of(3);
      for (std::size_t j = 0; j < mq.size(); ++j) {
        const double diff = mq[j] - mp[j];
        const double vp = sp[j] * sp[j];
        gmq[j] += g[0] * diff / vp;
        gmp[j] -= g[0] * diff / vp;
        gsq[j] += g[0] * (-1.0 / sq[j] + sq[j] / vp);
        gsp[j] += g[0] * (1.0 / sp[j] - (sq[j] * sq[j] + diff * diff) / (vp * sp[j]));
      }
      break;
    }
  }
}

}  // namespace npattack::ad
