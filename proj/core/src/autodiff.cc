#include "culab/autodiff.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "culab/error.h"

namespace culab {

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Tensor transpose_of(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

// Row norms with the degenerate-embedding check shared by both normalize ops.
std::vector<double> checked_row_norms(const Tensor& a, double eps) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j) * a(i, j);
    norms[i] = std::sqrt(s);
    if (!(norms[i] > eps)) {
      throw DegenerateEmbeddingError("cannot normalize row " + std::to_string(i) + ": norm " +
                                     std::to_string(norms[i]) + " <= " + std::to_string(eps));
    }
  }
  return norms;
}

Tensor normalize_with(const Tensor& a, const std::vector<double>& norms) {
  Tensor out = a;
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = a(i, j) / norms[i];
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c(i, j) += aip * b(p, j);
    }
  }
  return c;
}

Tensor l2_normalize(const Tensor& v, double eps) {
  auto norms = checked_row_norms(v, eps);
  return normalize_with(v, norms);
}

}  // namespace culab

namespace culab::ad {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::input(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite value fed to tape input");
  nodes_.push_back(Node{std::move(value), {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite value fed to tape constant");
  nodes_.push_back(Node{std::move(value), {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, Backward backward) {
  if (!value.all_finite()) throw NumericError("operation produced a non-finite value");
  bool rg = false;
  for (auto p : parents) rg = rg || nodes_[p].requires_grad;
  nodes_.push_back(Node{std::move(value), std::move(parents), rg ? std::move(backward) : nullptr, rg});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Tensor& delta) {
  if (!nodes_[id].requires_grad) return;
  if (!has_grad_[id]) {
    grads_[id] = delta;
    has_grad_[id] = true;
    return;
  }
  auto dst = grads_[id].values();
  auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::vector<Tensor> Tape::grad(Var output, std::span<const Var> inputs) {
  if (&output.tape() != this) throw ContractError("grad: output was recorded on a different tape");
  if (output.value().size() != 1) {
    throw ContractError("grad: output must be scalar, got shape " + shape_string(output.shape()));
  }
  grads_.assign(nodes_.size(), Tensor{});
  has_grad_.assign(nodes_.size(), false);
  backward_order_.clear();

  const std::size_t out = output.id();
  if (nodes_[out].requires_grad) {
    grads_[out] = Tensor(output.shape(), 1.0);
    has_grad_[out] = true;
  }
  for (std::size_t id = out + 1; id-- > 0;) {
    if (!has_grad_[id] || !nodes_[id].backward) continue;
    backward_order_.push_back(id);
    nodes_[id].backward(*this, grads_[id]);
  }

  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (&v.tape() != this) throw ContractError("grad: input was recorded on a different tape");
    result.push_back(has_grad_[v.id()] ? grads_[v.id()] : Tensor::zeros(v.shape()));
  }
  return result;
}

Var matmul(Var a, Var b) {
  Tape& t = a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(culab::matmul(a.value(), b.value()), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, culab::matmul(g, transpose_of(tp.value(ib))));
    if (tp.requires_grad(ib)) tp.accumulate(ib, culab::matmul(transpose_of(tp.value(ia)), g));
  });
}

Var transpose(Var a) {
  require_rank2(a.value(), "transpose");
  const std::size_t ia = a.id();
  return a.tape().record(transpose_of(a.value()), {ia},
                         [ia](Tape& tp, const Tensor& g) { tp.accumulate(ia, transpose_of(g)); });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    Tensor neg = g;
    for (auto& v : neg.values()) v = -v;
    tp.accumulate(ib, neg);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    Tensor ga = g, gb = g;
    auto av = tp.value(ia).values();
    auto bv2 = tp.value(ib).values();
    for (std::size_t i = 0; i < av.size(); ++i) {
      ga[i] *= bv2[i];
      gb[i] *= av[i];
    }
    tp.accumulate(ia, ga);
    tp.accumulate(ib, gb);
  });
}

Var scale(Var a, double k) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= k;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, k](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    for (auto& v : ga.values()) v *= k;
    tp.accumulate(ia, ga);
  });
}

Var add_row_bias(Var a, Var bias) {
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  require_rank2(av, "add_row_bias");
  const std::size_t m = av.rows(), n = av.cols();
  if (bv.size() != n || bv.rows() != 1) {
    throw DimensionError("add_row_bias: bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(av.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, n](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    if (tp.requires_grad(ib)) {
      Tensor gb(tp.value(ib).shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
      tp.accumulate(ib, gb);
    }
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    auto x = tp.value(ia).values();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!(x[i] > 0.0)) ga[i] = 0.0;
    tp.accumulate(ia, ga);
  });
}

Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  const std::size_t ia = a.id();
  Tensor y = out;
  return a.tape().record(std::move(out), {ia}, [ia, y = std::move(y)](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - y[i] * y[i];
    tp.accumulate(ia, ga);
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  const std::size_t ia = a.id();
  Tensor y = out;
  return a.tape().record(std::move(out), {ia}, [ia, y = std::move(y)](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= y[i];
    tp.accumulate(ia, ga);
  });
}

Var log(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
    v = std::log(v);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    auto x = tp.value(ia).values();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= x[i];
    tp.accumulate(ia, ga);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), {ia}, [ia](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, Tensor(tp.value(ia).shape(), g.item()));
  });
}

Var weighted_sum(Var a, const Tensor& weights) {
  require_same_shape(a.value(), weights, "weighted_sum");
  double s = 0.0;
  auto av = a.value().values();
  auto wv = weights.values();
  for (std::size_t i = 0; i < av.size(); ++i) s += wv[i] * av[i];
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), {ia}, [ia, weights](Tape& tp, const Tensor& g) {
    Tensor ga = weights;
    const double gs = g.item();
    for (auto& v : ga.values()) v *= gs;
    tp.accumulate(ia, ga);
  });
}

Var row_logsumexp(Var a, const Tensor& mask) {
  const Tensor& x = a.value();
  require_rank2(x, "row_logsumexp");
  require_same_shape(x, mask, "row_logsumexp");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out({m, 1});
  // Softmax weights over the masked entries; reused by backward.
  Tensor soft({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, x(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask(i, j) == 0.0) continue;
      soft(i, j) = std::exp(x(i, j) - mx);
      s += soft(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) soft(i, j) /= s;
    out(i, 0) = mx + std::log(s);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, soft = std::move(soft), m, n](Tape& tp, const Tensor& g) {
    Tensor ga({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga(i, j) = g(i, 0) * soft(i, j);
    tp.accumulate(ia, ga);
  });
}

Var row_logsumexp(Var a) { return row_logsumexp(a, Tensor(a.shape(), 1.0)); }

Var l2_normalize_rows(Var a, double eps) {
  require_rank2(a.value(), "l2_normalize_rows");
  return l2_normalize(a, eps);
}

Var l2_normalize(Var v, double eps) {
  const Tensor& x = v.value();
  if (x.rank() > 2) throw DimensionError("l2_normalize: unsupported rank " + shape_string(x.shape()));
  auto norms = checked_row_norms(x, eps);
  Tensor y = normalize_with(x, norms);
  const std::size_t iv = v.id();
  Tensor ycopy = y;
  return v.tape().record(std::move(y), {iv}, [iv, y = std::move(ycopy), norms = std::move(norms)](
                                                 Tape& tp, const Tensor& g) {
    // d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
    const std::size_t m = y.rows(), n = y.cols();
    Tensor gx(y.shape());
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y(i, j) * g(i, j);
      for (std::size_t j = 0; j < n; ++j) gx(i, j) = (g(i, j) - y(i, j) * dot) / norms[i];
    }
    tp.accumulate(iv, gx);
  });
}

}  // namespace culab::ad
