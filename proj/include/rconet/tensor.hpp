#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rconet/errors.hpp"

namespace rconet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Value storage shared by Tensor handles. `grad` stays empty until a backward
// pass reaches this tensor; when allocated it always matches `values`.
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  // True when a gradient has to flow here (leaf with requires_grad, or an op
  // output with at least one such ancestor). Backward skips everything else.
  bool wants_grad = false;
  // Tape linkage; valid only while (tape, tape_epoch) match a live tape.
  Tape* tape = nullptr;
  std::uint64_t tape_epoch = 0;
  std::int64_t node = -1;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// Dense n-dimensional value, row-major, double precision. Copies are shallow
// (shared storage); detach() makes an independent copy that can never receive
// gradient.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  // Leaf that accumulates gradient.
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->values.size(); }
  std::size_t extent(std::size_t axis) const { return d_->shape[axis]; }

  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }
  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool rg);

  bool has_grad() const { return d_ && d_->grad.size() == d_->values.size(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // True while this tensor is a node of a live tape.
  bool attached() const;

  Tensor detach() const;
  Tensor clone() const { return detach(); }

  std::shared_ptr<TensorData> impl() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;

  friend Tensor make_op(Shape, std::vector<double>, const std::vector<Tensor>&,
                        std::function<void(TensorData&, std::vector<TensorData*>&)>);
};

// Dynamically recorded computation graph. Ops record nodes on the tape that
// is current for this thread (see Scope); with no current tape they evaluate
// pure. One tape is single-threaded; independent tapes on different threads
// do not share state.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Thread-local current-tape marker.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* current();

  // Reverse pass from a scalar root. Grad buffers of every reachable tensor
  // are reset first, so repeated calls on the same graph are reproducible;
  // fan-out still accumulates additively within the pass.
  void backward(const Tensor& root);

  std::size_t num_nodes() const { return nodes_.size(); }
  std::uint64_t epoch() const { return epoch_; }

  // Drops all recorded nodes and invalidates node handles held by tensors.
  void reset();

 private:
  struct Node {
    std::shared_ptr<TensorData> out;
    std::vector<std::shared_ptr<TensorData>> parents;
    // Fixed at creation; tensors may later re-attach elsewhere, the recorded
    // graph must not care.
    std::vector<std::int64_t> parent_ids;
    std::function<void(TensorData&, std::vector<TensorData*>&)> back;
  };

  std::int64_t ensure_node(const std::shared_ptr<TensorData>& t);

  std::vector<Node> nodes_;
  std::uint64_t epoch_;

  friend Tensor make_op(Shape, std::vector<double>, const std::vector<Tensor>&,
                        std::function<void(TensorData&, std::vector<TensorData*>&)>);
};

// Records one operation result. `back` receives the output (with grad
// populated) and the parent tensors in the order given; it must accumulate
// (+=) into each parent's grad, honoring parent->wants_grad. Recording only
// happens when a tape is current and some input is tracked; otherwise the
// result is a plain detached value.
Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
               std::function<void(TensorData&, std::vector<TensorData*>&)> back);

void backward(const Tensor& root);

// ---- elementwise ----

enum class EwKind { Add, Sub, Mul, Neg, Exp, Log };

// Binary kinds broadcast only scalar-vs-tensor; anything else must match
// shapes exactly.
Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);

// log(1 + e^x) with a saturation branch for large |x|.
Tensor softplus(const Tensor& a);

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b);
// x: (n, f), bias: (f); adds bias to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// ---- reductions / structure ----

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Max-shifted logsumexp reducing `axis` of a rank-1 or rank-2 tensor.
Tensor logsumexp(const Tensor& x, std::size_t axis = 0);
// Row-wise log-softmax of a rank-2 tensor.
Tensor log_softmax(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);

// ---- verification ----

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued f at x. The difference quotient side uses only forward
// evaluations of f on detached copies.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-5);

// Forward-pass op counter (conv2d invocations); lets tests pin down how many
// projector applications a composite op performed.
std::uint64_t conv2d_call_count();
void reset_conv2d_call_count();

}  // namespace rconet
