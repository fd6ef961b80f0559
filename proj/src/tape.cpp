#include "tiger/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tiger/errors.hpp"

namespace tiger::ad {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) { return record(std::move(value), false, {}); }

Var Tape::parameter(Tensor value) { return record(std::move(value), true, {}); }

Var Tape::record(Tensor value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (!n.has_grad) {
    // Lazily materialize a zero gradient so callers can always read one.
    auto& self = const_cast<Node&>(n);
    self.grad = Tensor(n.value.shape(), 0.0);
    self.has_grad = true;
  }
  return n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grad_buffer(id);
  auto dst = buf.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(loss.value().shape()));
  }
  for (Node& n : nodes_) {
    if (n.has_grad) n.grad.fill(0.0);
  }
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.has_grad || !n.backward) continue;
    // Copy: the rule may grow other nodes' buffers but never this node's.
    const Tensor g = n.grad;
    n.backward(*this, g);
  }
}

namespace {

void same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + dims(a) + " and " + dims(b));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

void require_row(const char* op, const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) shape_error(op, a, row);
}

bool needs(Var a) { return a.requires_grad(); }
bool needs(Var a, Var b) { return a.requires_grad() || b.requires_grad(); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = Tensor::matrix(n, m);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = po + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

namespace {

// a^T b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = Tensor::matrix(k, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto arow = a.row(i);
    auto brow = b.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      auto orow = out.row(p);
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a b^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), m = b.rows(), k = a.cols();
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a, b), [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, matmul_nt(g, t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, matmul_tn(t.value(ia), g));
  });
}

Var transpose(Var a) {
  const std::size_t ia = a.id();
  return a.tape().record(transpose(a.value()), needs(a),
                         [ia](Tape& t, const Tensor& g) { t.accumulate(ia, transpose(g)); });
}

Var add(Var a, Var b) {
  same_tape(a, b, "add");
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a, b), [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b, "sub");
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a, b), [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) {
      Tensor neg = g;
      for (double& v : neg.values()) v = -v;
      t.accumulate(ib, neg);
    }
  });
}

Var add_row(Var a, Var row) {
  same_tape(a, row, "add_row");
  require_row("add_row", a.value(), row.value());
  Tensor out = a.value();
  auto r = row.value().values();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] += r[j];
  }
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), needs(a, row), [ia, ir](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) {
      Tensor& buf = t.grad_buffer(ir);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto gr = g.row(i);
        for (std::size_t j = 0; j < gr.size(); ++j) buf[j] += gr[j];
      }
    }
  });
}

Var mul_row(Var a, Var row) {
  same_tape(a, row, "mul_row");
  require_row("mul_row", a.value(), row.value());
  Tensor out = a.value();
  auto r = row.value().values();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] *= r[j];
  }
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), needs(a, row), [ia, ir](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& rv = t.value(ir);
    if (t.requires_grad(ia)) {
      Tensor& buf = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) buf(i, j) += g(i, j) * rv[j];
    }
    if (t.requires_grad(ir)) {
      Tensor& buf = t.grad_buffer(ir);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) buf[j] += g(i, j) * av(i, j);
    }
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b, "mul");
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.values();
  auto bv = b.value().values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a, b), [ia, ib](Tape& t, const Tensor& g) {
    auto gv = g.values();
    if (t.requires_grad(ia)) {
      auto buf = t.grad_buffer(ia).values();
      auto other = t.value(ib).values();
      for (std::size_t i = 0; i < gv.size(); ++i) buf[i] += gv[i] * other[i];
    }
    if (t.requires_grad(ib)) {
      auto buf = t.grad_buffer(ib).values();
      auto other = t.value(ia).values();
      for (std::size_t i = 0; i < gv.size(); ++i) buf[i] += gv[i] * other[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, s](Tape& t, const Tensor& g) {
    auto buf = t.grad_buffer(ia).values();
    auto gv = g.values();
    for (std::size_t i = 0; i < gv.size(); ++i) buf[i] += s * gv[i];
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia](Tape& t, const Tensor& g) { t.accumulate(ia, g); });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia](Tape& t, const Tensor& g) {
    auto x = t.value(ia).values();
    auto buf = t.grad_buffer(ia).values();
    auto gv = g.values();
    for (std::size_t i = 0; i < gv.size(); ++i)
      if (x[i] > 0.0) buf[i] += gv[i];
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  const std::size_t ia = a.id();
  Tensor saved = needs(a) ? out : Tensor{};
  return a.tape().record(std::move(out), needs(a), [ia, y = std::move(saved)](Tape& t, const Tensor& g) {
    auto buf = t.grad_buffer(ia).values();
    auto gv = g.values();
    for (std::size_t i = 0; i < gv.size(); ++i) buf[i] += gv[i] * y[i];
  });
}

Var log(Var a, double floor) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::log(std::max(v, floor));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, floor](Tape& t, const Tensor& g) {
    auto x = t.value(ia).values();
    auto buf = t.grad_buffer(ia).values();
    auto gv = g.values();
    for (std::size_t i = 0; i < gv.size(); ++i)
      if (x[i] > floor) buf[i] += gv[i] / x[i];
  });
}

namespace {

Tensor softmax_rows_value(const Tensor& a) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : r) v /= z;
  }
  return out;
}

}  // namespace

Var softmax_rows(Var a) {
  Tensor out = softmax_rows_value(a.value());
  Tensor saved = needs(a) ? out : Tensor{};
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, y = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& buf = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto yr = y.row(i);
      auto gr = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto br = buf.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) br[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var log_softmax_rows(Var a) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (double& v : r) v -= lse;
  }
  const std::size_t ia = a.id();
  Tensor saved = needs(a) ? out : Tensor{};
  return a.tape().record(std::move(out), needs(a), [ia, ls = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& buf = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto gr = g.row(i);
      auto lr = ls.row(i);
      double gsum = 0.0;
      for (double v : gr) gsum += v;
      auto br = buf.row(i);
      for (std::size_t j = 0; j < gr.size(); ++j) br[j] += gr[j] - std::exp(lr[j]) * gsum;
    }
  });
}

Var layer_norm_rows(Var a, double eps) {
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < c; ++j) o[j] = (r[j] - mean) * inv_std[i];
  }
  const std::size_t ia = a.id();
  Tensor saved = needs(a) ? out : Tensor{};
  return a.tape().record(std::move(out), needs(a),
                         [ia, xhat = std::move(saved), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
                           Tensor& buf = t.grad_buffer(ia);
                           const std::size_t c = g.cols();
                           for (std::size_t i = 0; i < g.rows(); ++i) {
                             auto gr = g.row(i);
                             auto xr = xhat.row(i);
                             double gmean = 0.0, gx = 0.0;
                             for (std::size_t j = 0; j < c; ++j) {
                               gmean += gr[j];
                               gx += gr[j] * xr[j];
                             }
                             gmean /= static_cast<double>(c);
                             gx /= static_cast<double>(c);
                             auto br = buf.row(i);
                             for (std::size_t j = 0; j < c; ++j) br[j] += inv_std[i] * (gr[j] - gmean - xr[j] * gx);
                           }
                         });
}

Var l2_normalize_rows(Var a) {
  const Tensor& x = a.value();
  Tensor out = x;
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v * v;
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    for (double& v : out.row(i)) v /= norms[i];
  }
  const std::size_t ia = a.id();
  Tensor saved = needs(a) ? out : Tensor{};
  return a.tape().record(std::move(out), needs(a),
                         [ia, y = std::move(saved), norms = std::move(norms)](Tape& t, const Tensor& g) {
                           // d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
                           Tensor& buf = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.rows(); ++i) {
                             auto gr = g.row(i);
                             auto yr = y.row(i);
                             double dot = 0.0;
                             for (std::size_t j = 0; j < gr.size(); ++j) dot += gr[j] * yr[j];
                             auto br = buf.row(i);
                             for (std::size_t j = 0; j < gr.size(); ++j) br[j] += (gr[j] - yr[j] * dot) / norms[i];
                           }
                         });
}

Var concat_rows(Var a, Var b) {
  same_tape(a, b, "concat_rows");
  if (a.cols() != b.cols()) shape_error("concat_rows", a.value(), b.value());
  const std::size_t ra = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(ra + b.rows(), c);
  std::copy(a.value().values().begin(), a.value().values().end(), out.values().begin());
  std::copy(b.value().values().begin(), b.value().values().end(), out.values().begin() + ra * c);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a, b), [ia, ib, ra, c](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      auto buf = t.grad_buffer(ia).values();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto buf = t.grad_buffer(ib).values();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[ra * c + i];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + dims(a.value()));
  }
  const std::size_t c = a.cols();
  auto src = a.value().values();
  Tensor out = Tensor::matrix(count, c,
                              std::vector<double>(src.begin() + begin * c, src.begin() + (begin + count) * c));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, begin, c](Tape& t, const Tensor& g) {
    auto buf = t.grad_buffer(ia).values();
    for (std::size_t i = 0; i < g.size(); ++i) buf[begin * c + i] += g[i];
  });
}

Var mean_rows(Var a) { return mean_groups(a, a.rows()); }

Var mean_groups(Var a, std::size_t group) {
  if (group == 0 || a.rows() % group != 0) {
    throw DimensionError("mean_groups: " + dims(a.value()) + " not divisible into groups of " + std::to_string(group));
  }
  const std::size_t n = a.rows() / group, c = a.cols();
  Tensor out = Tensor::matrix(n, c);
  const Tensor& x = a.value();
  for (std::size_t s = 0; s < n; ++s) {
    auto o = out.row(s);
    for (std::size_t r = 0; r < group; ++r) {
      auto xr = x.row(s * group + r);
      for (std::size_t j = 0; j < c; ++j) o[j] += xr[j];
    }
    for (double& v : o) v /= static_cast<double>(group);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, group](Tape& t, const Tensor& g) {
    Tensor& buf = t.grad_buffer(ia);
    const double w = 1.0 / static_cast<double>(group);
    for (std::size_t i = 0; i < buf.rows(); ++i) {
      auto gr = g.row(i / group);
      auto br = buf.row(i);
      for (std::size_t j = 0; j < br.size(); ++j) br[j] += w * gr[j];
    }
  });
}

Var concat_groups(Var a, std::size_t group_a, Var b, std::size_t group_b) {
  same_tape(a, b, "concat_groups");
  if (a.cols() != b.cols() || group_a == 0 || group_b == 0 || a.rows() % group_a != 0 ||
      b.rows() % group_b != 0 || a.rows() / group_a != b.rows() / group_b) {
    shape_error("concat_groups", a.value(), b.value());
  }
  const std::size_t n = a.rows() / group_a, c = a.cols(), gs = group_a + group_b;
  Tensor out = Tensor::matrix(n * gs, c);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t r = 0; r < group_a; ++r) {
      auto src = a.value().row(s * group_a + r);
      std::copy(src.begin(), src.end(), out.row(s * gs + r).begin());
    }
    for (std::size_t r = 0; r < group_b; ++r) {
      auto src = b.value().row(s * group_b + r);
      std::copy(src.begin(), src.end(), out.row(s * gs + group_a + r).begin());
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), needs(a, b), [ia, ib, group_a, group_b, n, gs](Tape& t, const Tensor& g) {
    for (std::size_t s = 0; s < n; ++s) {
      if (t.requires_grad(ia)) {
        Tensor& buf = t.grad_buffer(ia);
        for (std::size_t r = 0; r < group_a; ++r) {
          auto gr = g.row(s * gs + r);
          auto br = buf.row(s * group_a + r);
          for (std::size_t j = 0; j < br.size(); ++j) br[j] += gr[j];
        }
      }
      if (t.requires_grad(ib)) {
        Tensor& buf = t.grad_buffer(ib);
        for (std::size_t r = 0; r < group_b; ++r) {
          auto gr = g.row(s * gs + group_a + r);
          auto br = buf.row(s * group_b + r);
          for (std::size_t j = 0; j < br.size(); ++j) br[j] += gr[j];
        }
      }
    }
  });
}

Var slice_groups(Var a, std::size_t group, std::size_t offset, std::size_t count) {
  if (group == 0 || a.rows() % group != 0 || offset + count > group) {
    throw DimensionError("slice_groups: cannot take rows [" + std::to_string(offset) + ", " +
                         std::to_string(offset + count) + ") of groups of " + std::to_string(group) + " from " +
                         dims(a.value()));
  }
  const std::size_t n = a.rows() / group;
  Tensor out = Tensor::matrix(n * count, a.cols());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t r = 0; r < count; ++r) {
      auto src = a.value().row(s * group + offset + r);
      std::copy(src.begin(), src.end(), out.row(s * count + r).begin());
    }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, group, offset, count, n](Tape& t, const Tensor& g) {
    Tensor& buf = t.grad_buffer(ia);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t r = 0; r < count; ++r) {
        auto gr = g.row(s * count + r);
        auto br = buf.row(s * group + offset + r);
        for (std::size_t j = 0; j < br.size(); ++j) br[j] += gr[j];
      }
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tensor out = a.value().reshaped(Shape{rows, cols});
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia](Tape& t, const Tensor& g) {
    auto buf = t.grad_buffer(ia).values();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  });
}

Var diag(Var a) {
  if (a.rows() != a.cols()) throw DimensionError("diag: matrix " + dims(a.value()) + " is not square");
  const std::size_t n = a.rows();
  Tensor out = Tensor::matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()(i, i);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia, n](Tape& t, const Tensor& g) {
    Tensor& buf = t.grad_buffer(ia);
    for (std::size_t i = 0; i < n; ++i) buf(i, i) += g[i];
  });
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), needs(a), [ia](Tape& t, const Tensor& g) {
    const double gv = g[0];
    for (double& v : t.grad_buffer(ia).values()) v += gv;
  });
}

Var mean_all(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var sum_cols(Var a) {
  const Tensor& x = a.value();
  Tensor out = Tensor::matrix(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v;
    out[i] = s;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), needs(a), [ia](Tape& t, const Tensor& g) {
    Tensor& buf = t.grad_buffer(ia);
    for (std::size_t i = 0; i < buf.rows(); ++i)
      for (double& v : buf.row(i)) v += g[i];
  });
}

Var grouped_attention(Var q, Var k, Var v, std::size_t group, std::size_t heads) {
  same_tape(q, k, "grouped_attention");
  same_tape(q, v, "grouped_attention");
  require_same_shape("grouped_attention", q.value(), k.value());
  require_same_shape("grouped_attention", q.value(), v.value());
  const std::size_t rows = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("grouped_attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (group == 0 || rows % group != 0) {
    throw DimensionError("grouped_attention: " + std::to_string(rows) + " rows not divisible into groups of " +
                         std::to_string(group));
  }
  const std::size_t n_groups = rows / group, dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  Tensor out = Tensor::matrix(rows, d);
  // Attention weights laid out as [group][head][i][j].
  std::vector<double> attn(n_groups * heads * group * group);
  std::vector<double> scores(group);
  for (std::size_t s = 0; s < n_groups; ++s) {
    const std::size_t base = s * group;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      double* A = attn.data() + ((s * heads + h) * group * group);
      for (std::size_t i = 0; i < group; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < group; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += Q(base + i, c0 + c) * K(base + j, c0 + c);
          scores[j] = dot * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < group; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t j = 0; j < group; ++j) {
          A[i * group + j] = scores[j] / z;
          const double w = A[i * group + j];
          for (std::size_t c = 0; c < dh; ++c) out(base + i, c0 + c) += w * V(base + j, c0 + c);
        }
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const bool req = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return q.tape().record(
      std::move(out), req,
      [iq, ik, iv, group, heads, n_groups, dh, inv_sqrt, attn = std::move(attn)](Tape& t, const Tensor& g) {
        const Tensor& Q = t.value(iq);
        const Tensor& K = t.value(ik);
        const Tensor& V = t.value(iv);
        const std::size_t d = Q.cols();
        Tensor dQ = Tensor::matrix(Q.rows(), d);
        Tensor dK = Tensor::matrix(Q.rows(), d);
        Tensor dV = Tensor::matrix(Q.rows(), d);
        std::vector<double> dA(group * group);
        for (std::size_t s = 0; s < n_groups; ++s) {
          const std::size_t base = s * group;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            const double* A = attn.data() + ((s * heads + h) * group * group);
            for (std::size_t i = 0; i < group; ++i)
              for (std::size_t j = 0; j < group; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  dot += g(base + i, c0 + c) * V(base + j, c0 + c);
                  dV(base + j, c0 + c) += A[i * group + j] * g(base + i, c0 + c);
                }
                dA[i * group + j] = dot;
              }
            for (std::size_t i = 0; i < group; ++i) {
              double rs = 0.0;
              for (std::size_t j = 0; j < group; ++j) rs += dA[i * group + j] * A[i * group + j];
              for (std::size_t j = 0; j < group; ++j) {
                const double ds = A[i * group + j] * (dA[i * group + j] - rs) * inv_sqrt;
                if (ds == 0.0) continue;
                for (std::size_t c = 0; c < dh; ++c) {
                  dQ(base + i, c0 + c) += ds * K(base + j, c0 + c);
                  dK(base + j, c0 + c) += ds * Q(base + i, c0 + c);
                }
              }
            }
          }
        }
        t.accumulate(iq, dQ);
        t.accumulate(ik, dK);
        t.accumulate(iv, dV);
      });
}

}  // namespace tiger::ad
