#include "rconet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "rconet/kernels.hpp"

namespace rconet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

// ---- Tensor ----

namespace {
std::shared_ptr<TensorData> new_data(Shape shape, std::vector<double> values, bool rg) {
  if (numel(shape) != values.size())
    throw ShapeError("tensor init: " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = rg;
  d->wants_grad = rg;
  return d;
}

}  // namespace

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return Tensor(new_data(std::move(shape), std::vector<double>(n, 0.0), false));
}

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor(new_data(std::move(shape), std::vector<double>(n, value), false));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(new_data(std::move(shape), std::move(values), false));
}

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  return Tensor(new_data(std::move(shape), std::move(values), true));
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return d_->values[0];
}

Tensor& Tensor::set_requires_grad(bool rg) {
  d_->requires_grad = rg;
  d_->wants_grad = rg;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad accessed before any backward pass");
  return d_->grad;
}

void Tensor::zero_grad() {
  if (d_ && !d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

bool Tensor::attached() const {
  Tape* t = Tape::current();
  return t && d_ && d_->tape == t && d_->tape_epoch == t->epoch() && d_->node >= 0;
}

Tensor Tensor::detach() const {
  return Tensor(new_data(d_->shape, d_->values, false));
}

// ---- Tape ----

namespace {
thread_local Tape* g_current_tape = nullptr;
std::atomic<std::uint64_t> g_epoch_counter{1};
}  // namespace

Tape::Tape() : epoch_(g_epoch_counter.fetch_add(1)) {}

Tape::~Tape() {
  if (g_current_tape == this) g_current_tape = nullptr;
}

Tape::Scope::Scope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
Tape::Scope::~Scope() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::reset() {
  nodes_.clear();
  epoch_ = g_epoch_counter.fetch_add(1);
}

std::int64_t Tape::ensure_node(const std::shared_ptr<TensorData>& t) {
  if (t->tape == this && t->tape_epoch == epoch_ && t->node >= 0) return t->node;
  const auto id = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(Node{t, {}, {}, nullptr});
  t->tape = this;
  t->tape_epoch = epoch_;
  t->node = id;
  return id;
}

void Tape::backward(const Tensor& root) {
  if (root.size() != 1) throw ContractError("backward root must be scalar");
  auto rd = root.impl();
  if (!(rd->tape == this && rd->tape_epoch == epoch_ && rd->node >= 0))
    throw ContractError("backward root is not attached to this tape");

  // Parent-id lists were fixed at node creation; walk them to confine the
  // pass to ancestors of the root.
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<std::int64_t> stack{rd->node};
  while (!stack.empty()) {
    const auto id = stack.back();
    stack.pop_back();
    if (reach[static_cast<std::size_t>(id)]) continue;
    reach[static_cast<std::size_t>(id)] = 1;
    for (std::int64_t pid : nodes_[static_cast<std::size_t>(id)].parent_ids)
      if (!reach[static_cast<std::size_t>(pid)]) stack.push_back(pid);
  }

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!reach[i]) continue;
    TensorData& t = *nodes_[i].out;
    if (t.wants_grad || static_cast<std::int64_t>(i) == rd->node) {
      t.ensure_grad();
      std::fill(t.grad.begin(), t.grad.end(), 0.0);
    }
  }
  rd->ensure_grad();
  rd->grad[0] = 1.0;

  std::vector<TensorData*> parent_ptrs;
  for (std::int64_t i = rd->node; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    if (!reach[idx] || !nodes_[idx].back) continue;
    if (!nodes_[idx].out->wants_grad && i != rd->node) continue;
    parent_ptrs.clear();
    for (const auto& p : nodes_[idx].parents) {
      if (p->wants_grad) p->ensure_grad();
      parent_ptrs.push_back(p.get());
    }
    nodes_[idx].back(*nodes_[idx].out, parent_ptrs);
  }
}

void backward(const Tensor& root) {
  Tape* t = Tape::current();
  auto rd = root.impl();
  if (t && rd->tape == t && rd->tape_epoch == t->epoch()) {
    t->backward(root);
    return;
  }
  throw ContractError("backward: root is not attached to the current tape");
}

// ---- op recording ----

Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
               std::function<void(TensorData&, std::vector<TensorData*>&)> back) {
  auto out = std::make_shared<TensorData>();
  out->shape = std::move(shape);
  out->values = std::move(values);

  Tape* tape = Tape::current();
  bool tracked = false;
  if (tape) {
    for (const auto& p : parents) {
      const auto& d = p.impl();
      if (d->requires_grad ||
          (d->tape == tape && d->tape_epoch == tape->epoch() && d->node >= 0)) {
        tracked = true;
        break;
      }
    }
  }
  if (tracked) {
    bool wants = false;
    Tape::Node node;
    for (const auto& p : parents) {
      node.parent_ids.push_back(tape->ensure_node(p.impl()));
      node.parents.push_back(p.impl());
      wants = wants || p.impl()->wants_grad;
    }
    out->wants_grad = wants;
    const auto id = static_cast<std::int64_t>(tape->nodes_.size());
    node.out = out;
    node.back = std::move(back);
    tape->nodes_.push_back(std::move(node));
    out->tape = tape;
    out->tape_epoch = tape->epoch();
    out->node = id;
  }
  return Tensor(out);
}

// ---- elementwise ----

namespace {

// 0: same shape, 1: a is scalar, 2: b is scalar
int broadcast_mode(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return 0;
  if (a.size() == 1) return 1;
  if (b.size() == 1) return 2;
  throw ShapeError("elementwise: incompatible shapes " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b) {
  const bool binary = (kind == EwKind::Add || kind == EwKind::Sub || kind == EwKind::Mul);
  if (binary && !b) throw ContractError("binary elementwise kind needs two operands");
  if (!binary && b) throw ContractError("unary elementwise kind takes one operand");
  switch (kind) {
    case EwKind::Add:
      return add(a, *b);
    case EwKind::Sub:
      return sub(a, *b);
    case EwKind::Mul:
      return mul(a, *b);
    case EwKind::Neg:
      return neg(a);
    case EwKind::Exp:
      return exp(a);
    case EwKind::Log:
      return log(a);
  }
  throw ContractError("unreachable elementwise kind");
}

Tensor add(const Tensor& a, const Tensor& b) {
  const int mode = broadcast_mode(a, b);
  const Tensor& big = (mode == 1) ? b : a;
  const std::size_t n = big.size();
  std::vector<double> out(n);
  const auto& k = kernels::active();
  if (mode == 0) {
    k.add(a.data(), b.data(), out.data(), n);
  } else {
    const double s = (mode == 1) ? a.item() : b.item();
    const double* base = (mode == 1) ? b.data() : a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = base[i] + s;
  }
  return make_op(big.shape(), std::move(out), {a, b},
                 [mode](TensorData& o, std::vector<TensorData*>& ps) {
                   const auto& k = kernels::active();
                   const std::size_t n = o.grad.size();
                   auto flow = [&](TensorData* p) {
                     if (!p->wants_grad) return;
                     if (p->values.size() == 1 && n != 1)
                       p->grad[0] += k.sum(o.grad.data(), n);
                     else
                       k.axpy(1.0, o.grad.data(), p->grad.data(), n);
                   };
                   flow(ps[0]);
                   flow(ps[1]);
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const int mode = broadcast_mode(a, b);
  const std::size_t n = std::max(a.size(), b.size());
  std::vector<double> out(n);
  const auto& k = kernels::active();
  if (mode == 0) {
    k.sub(a.data(), b.data(), out.data(), n);
  } else if (mode == 1) {
    const double s = a.item();
    for (std::size_t i = 0; i < n; ++i) out[i] = s - b.data()[i];
  } else {
    const double s = b.item();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] - s;
  }
  const Shape shape = (mode == 1) ? b.shape() : a.shape();
  return make_op(shape, std::move(out), {a, b},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   const auto& k = kernels::active();
                   const std::size_t n = o.grad.size();
                   if (ps[0]->wants_grad) {
                     if (ps[0]->values.size() == 1 && n != 1)
                       ps[0]->grad[0] += k.sum(o.grad.data(), n);
                     else
                       k.axpy(1.0, o.grad.data(), ps[0]->grad.data(), n);
                   }
                   if (ps[1]->wants_grad) {
                     if (ps[1]->values.size() == 1 && n != 1)
                       ps[1]->grad[0] -= k.sum(o.grad.data(), n);
                     else
                       k.axpy(-1.0, o.grad.data(), ps[1]->grad.data(), n);
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const int mode = broadcast_mode(a, b);
  const std::size_t n = std::max(a.size(), b.size());
  std::vector<double> out(n);
  const auto& k = kernels::active();
  if (mode == 0) {
    k.mul(a.data(), b.data(), out.data(), n);
  } else {
    const double s = (mode == 1) ? a.item() : b.item();
    const double* base = (mode == 1) ? b.data() : a.data();
    k.scale(base, s, out.data(), n);
  }
  const Shape shape = (mode == 1) ? b.shape() : a.shape();
  return make_op(shape, std::move(out), {a, b},
                 [mode](TensorData& o, std::vector<TensorData*>& ps) {
                   const auto& k = kernels::active();
                   const std::size_t n = o.grad.size();
                   TensorData* pa = ps[0];
                   TensorData* pb = ps[1];
                   if (mode == 0) {
                     if (pa->wants_grad) k.mla(o.grad.data(), pb->values.data(), pa->grad.data(), n);
                     if (pb->wants_grad) k.mla(o.grad.data(), pa->values.data(), pb->grad.data(), n);
                   } else {
                     TensorData* sc = (mode == 1) ? pa : pb;
                     TensorData* vec = (mode == 1) ? pb : pa;
                     if (sc->wants_grad) sc->grad[0] += k.dot(o.grad.data(), vec->values.data(), n);
                     if (vec->wants_grad) k.axpy(sc->values[0], o.grad.data(), vec->grad.data(), n);
                   }
                 });
}

Tensor neg(const Tensor& a) {
  std::vector<double> out(a.size());
  kernels::active().scale(a.data(), -1.0, out.data(), a.size());
  return make_op(a.shape(), std::move(out), {a},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   if (ps[0]->wants_grad)
                     kernels::active().axpy(-1.0, o.grad.data(), ps[0]->grad.data(), o.grad.size());
                 });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::exp(a.data()[i]);
  return make_op(a.shape(), std::move(out), {a},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   if (ps[0]->wants_grad)
                     kernels::active().mla(o.grad.data(), o.values.data(), ps[0]->grad.data(),
                                           o.grad.size());
                 });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = a.data()[i];
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    out[i] = std::log(v);
  }
  return make_op(a.shape(), std::move(out), {a},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                     ps[0]->grad[i] += o.grad[i] / ps[0]->values[i];
                 });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return make_op(a.shape(), std::move(out), {a},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                     if (ps[0]->values[i] > 0.0) ps[0]->grad[i] += o.grad[i];
                 });
}

Tensor softplus(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    // log(1+e^x) = max(x,0) + log1p(e^{-|x|}): saturates cleanly at both ends.
    out[i] = (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  return make_op(a.shape(), std::move(out), {a},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                     ps[0]->grad[i] += o.grad[i] * sigmoid(ps[0]->values[i]);
                 });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1);
  const std::size_t k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto& kr = kernels::active();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      kr.axpy(a.data()[i * k + p], b.data() + p * n, out.data() + i * n, n);
  return make_op({m, n}, std::move(out), {a, b},
                 [m, k, n](TensorData& o, std::vector<TensorData*>& ps) {
                   const auto& kr = kernels::active();
                   TensorData* pa = ps[0];
                   TensorData* pb = ps[1];
                   if (pa->wants_grad) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p)
                         pa->grad[i * k + p] +=
                             kr.dot(o.grad.data() + i * n, pb->values.data() + p * n, n);
                   }
                   if (pb->wants_grad) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p)
                         kr.axpy(pa->values[i * k + p], o.grad.data() + i * n,
                                 pb->grad.data() + p * n, n);
                   }
                 });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.extent(1) != bias.extent(0))
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " with " + shape_str(bias.shape()));
  const std::size_t n = x.extent(0), f = x.extent(1);
  std::vector<double> out(n * f);
  const auto& k = kernels::active();
  for (std::size_t i = 0; i < n; ++i)
    k.add(x.data() + i * f, bias.data(), out.data() + i * f, f);
  return make_op(x.shape(), std::move(out), {x, bias},
                 [n, f](TensorData& o, std::vector<TensorData*>& ps) {
                   const auto& k = kernels::active();
                   if (ps[0]->wants_grad)
                     k.axpy(1.0, o.grad.data(), ps[0]->grad.data(), n * f);
                   if (ps[1]->wants_grad)
                     for (std::size_t i = 0; i < n; ++i)
                       k.axpy(1.0, o.grad.data() + i * f, ps[1]->grad.data(), f);
                 });
}

// ---- reductions / structure ----

Tensor sum(const Tensor& x) {
  const double s = kernels::active().sum(x.data(), x.size());
  return make_op({1}, {s}, {x},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   const double g = o.grad[0];
                   for (auto& v : ps[0]->grad) v += g;
                 });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.size();
  const double s = kernels::active().sum(x.data(), n) / static_cast<double>(n);
  return make_op({1}, {s}, {x},
                 [n](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   const double g = o.grad[0] / static_cast<double>(n);
                   for (auto& v : ps[0]->grad) v += g;
                 });
}

namespace {
// Stable logsumexp of a strided slice; writes softmax weights if asked.
double lse_slice(const double* base, std::size_t count, std::size_t stride) {
  double m = base[0];
  for (std::size_t i = 1; i < count; ++i) m = std::max(m, base[i * stride]);
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) s += std::exp(base[i * stride] - m);
  return m + std::log(s);
}
}  // namespace

Tensor logsumexp(const Tensor& x, std::size_t axis) {
  if (x.rank() == 1) {
    if (axis != 0) throw DomainError("logsumexp axis out of range for rank-1");
    if (x.size() == 0) throw DomainError("logsumexp over empty axis");
    const double v = lse_slice(x.data(), x.size(), 1);
    return make_op({1}, {v}, {x},
                   [](TensorData& o, std::vector<TensorData*>& ps) {
                     if (!ps[0]->wants_grad) return;
                     const double g = o.grad[0], lse = o.values[0];
                     for (std::size_t i = 0; i < ps[0]->values.size(); ++i)
                       ps[0]->grad[i] += g * std::exp(ps[0]->values[i] - lse);
                   });
  }
  if (x.rank() != 2 || axis > 1) throw DomainError("logsumexp supports rank-1/2, axis 0/1");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if ((axis == 1 && cols == 0) || (axis == 0 && rows == 0))
    throw DomainError("logsumexp over empty axis");
  if (axis == 1) {
    std::vector<double> out(rows);
    for (std::size_t i = 0; i < rows; ++i) out[i] = lse_slice(x.data() + i * cols, cols, 1);
    return make_op({rows}, std::move(out), {x},
                   [rows, cols](TensorData& o, std::vector<TensorData*>& ps) {
                     if (!ps[0]->wants_grad) return;
                     for (std::size_t i = 0; i < rows; ++i)
                       for (std::size_t j = 0; j < cols; ++j)
                         ps[0]->grad[i * cols + j] +=
                             o.grad[i] * std::exp(ps[0]->values[i * cols + j] - o.values[i]);
                   });
  }
  std::vector<double> out(cols);
  for (std::size_t j = 0; j < cols; ++j) out[j] = lse_slice(x.data() + j, rows, cols);
  return make_op({cols}, std::move(out), {x},
                 [rows, cols](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   for (std::size_t i = 0; i < rows; ++i)
                     for (std::size_t j = 0; j < cols; ++j)
                       ps[0]->grad[i * cols + j] +=
                           o.grad[j] * std::exp(ps[0]->values[i * cols + j] - o.values[j]);
                 });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("log_softmax expects rank-2, got " + shape_str(x.shape()));
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double lse = lse_slice(x.data() + i * cols, cols, 1);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x.data()[i * cols + j] - lse;
  }
  return make_op(x.shape(), std::move(out), {x},
                 [rows, cols](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   for (std::size_t i = 0; i < rows; ++i) {
                     double gsum = 0.0;
                     for (std::size_t j = 0; j < cols; ++j) gsum += o.grad[i * cols + j];
                     for (std::size_t j = 0; j < cols; ++j)
                       ps[0]->grad[i * cols + j] +=
                           o.grad[i * cols + j] - std::exp(o.values[i * cols + j]) * gsum;
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  std::vector<double> out(x.values());
  return make_op(std::move(shape), std::move(out), {x},
                 [](TensorData& o, std::vector<TensorData*>& ps) {
                   if (ps[0]->wants_grad)
                     kernels::active().axpy(1.0, o.grad.data(), ps[0]->grad.data(), o.grad.size());
                 });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range");
  std::size_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && p.shape()[d] != first[d])
        throw ShapeError("concat extent mismatch off-axis at dim " + std::to_string(d));
    axis_total += p.shape()[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<double> out(numel(out_shape));
  std::size_t off = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const std::size_t e = p.shape()[axis];
    extents.push_back(e);
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * axis_total + off) * inner, p.data() + o * e * inner,
                  e * inner * sizeof(double));
    off += e;
  }
  return make_op(std::move(out_shape), std::move(out), parts,
                 [outer, inner, axis_total, extents](TensorData& o, std::vector<TensorData*>& ps) {
                   std::size_t off = 0;
                   for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                     const std::size_t e = extents[pi];
                     if (ps[pi]->wants_grad) {
                       for (std::size_t ob = 0; ob < outer; ++ob)
                         kernels::active().axpy(1.0, o.grad.data() + (ob * axis_total + off) * inner,
                                                ps[pi]->grad.data() + ob * e * inner, e * inner);
                     }
                     off += e;
                   }
                 });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows expects rank-2");
  const std::size_t n = x.extent(0), f = x.extent(1);
  std::vector<double> out(rows.size() * f);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ContractError("gather_rows index out of range");
    std::memcpy(out.data() + i * f, x.data() + rows[i] * f, f * sizeof(double));
  }
  return make_op({rows.size(), f}, std::move(out), {x},
                 [rows, f](TensorData& o, std::vector<TensorData*>& ps) {
                   if (!ps[0]->wants_grad) return;
                   for (std::size_t i = 0; i < rows.size(); ++i)
                     kernels::active().axpy(1.0, o.grad.data() + i * f,
                                            ps[0]->grad.data() + rows[i] * f, f);
                 });
}

// ---- verification ----

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);

  std::vector<double> analytic(x.size(), 0.0);
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f(probe);
    if (y.size() != 1) throw ContractError("grad_check target must be scalar-valued");
    if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
    tape.backward(y);
    if (probe.has_grad()) analytic = probe.grad();
  }

  // Difference quotients run tape-free even if the caller holds a scope open,
  // so they stay pure forward evaluations.
  struct NoTapeScope {
    Tape* saved;
    NoTapeScope() : saved(g_current_tape) { g_current_tape = nullptr; }
    ~NoTapeScope() { g_current_tape = saved; }
  } no_tape;

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x.detach();
    Tensor xm = x.detach();
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fp = f(xp).item();
    const double fm = f(xm).item();
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite evaluation at perturbed point");
    const double fd = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

// Defined here so the counter lives with the engine even though conv records
// from layers.cpp.
namespace detail {
std::atomic<std::uint64_t> g_conv2d_calls{0};
}

std::uint64_t conv2d_call_count() { return detail::g_conv2d_calls.load(); }
void reset_conv2d_call_count() { detail::g_conv2d_calls.store(0); }

}  // namespace rconet
