#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace ratles {

namespace detail {

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward reaches this tensor
  bool requires_grad = false;
  int64_t node = -1;  // index into the tape, -1 for leaves
  uint64_t tape_gen = 0;
};

int64_t shape_numel(const std::vector<int64_t>& shape);

}  // namespace detail

// Dense N-d tensor of 64-bit floats, row-major with the last axis fastest.
// Feature maps are rank-5: (batch, channel, depth, height, width).
// Copies are shallow; the payload is shared.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);  // zero-filled
  Tensor(std::vector<int64_t> shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor full(std::vector<int64_t> shape, double v);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t rank() const;
  int64_t dim(int64_t axis) const;
  int64_t size() const;

  std::span<double> values();
  std::span<const double> values() const;
  double at(std::initializer_list<int64_t> index) const;
  double item() const;  // requires size() == 1

  Tensor& set_requires_grad(bool v);
  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;  // empty span when no grad
  void zero_grad();

  // Leaf copy of the values; drops tape membership and grad.
  Tensor detached_copy() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---- primitive differentiable ops -----------------------------------------

// Elementwise sum; shapes must match exactly (no broadcasting).
Tensor add(const Tensor& a, const Tensor& b);

// Elementwise product; shapes must match exactly.
Tensor mul(const Tensor& a, const Tensor& b);

// Sum of all entries, as a scalar tensor of shape {1}.
Tensor sum(const Tensor& x);

// max(0, x); the subgradient at exactly 0 is 0.
Tensor relu(const Tensor& x);

// Joins two rank-5 tensors along the channel axis. All other dims must match.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Per-voxel softmax over the channel axis of a rank-5 tensor, computed with
// max-subtraction so arbitrarily large logits cannot overflow.
Tensor softmax_channels(const Tensor& z);

// ---- reverse-mode engine ---------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation order,
// populating grads of every requires_grad tensor the loss depends on.
// The tape is freed afterwards; calling backward twice on the same graph
// is an error.
void backward(const Tensor& loss);

namespace autograd {

bool grad_enabled();

// Disables tape recording in scope; forwards run without autodiff bookkeeping.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Number of nodes currently recorded on this thread's tape.
size_t tape_size();

// Drops all recorded nodes without running backward.
void reset_tape();

// Op-author API: appends a node whose backward closure reads the output's
// grad and accumulates into the inputs'. Returns the node index.
int64_t record_node(const char* op_id, const std::shared_ptr<detail::TensorImpl>& out,
                    std::function<void()> backward_fn);

// Lazily sized += into a tensor's grad buffer.
void accumulate_grad(const std::shared_ptr<detail::TensorImpl>& t,
                     std::span<const double> contribution);

}  // namespace autograd

}  // namespace ratles
