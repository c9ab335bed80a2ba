#include "ratles/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "ratles/error.hpp"

namespace ratles {

namespace detail {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ContractViolation("tensor shape has a negative extent");
    n *= d;
  }
  return n;
}

}  // namespace detail

namespace {

using detail::TensorImpl;

struct TapeNode {
  const char* op;
  std::function<void()> backward;
};

struct Tape {
  std::vector<TapeNode> nodes;
  uint64_t gen = 1;

  void clear() {
    nodes.clear();
    ++gen;
  }
};

thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
}

bool flows(const std::shared_ptr<TensorImpl>& t) { return t->requires_grad; }

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<int64_t> shape) {
  impl_ = std::make_shared<TensorImpl>();
  const int64_t n = detail::shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(n), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> values) {
  const int64_t n = detail::shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw ContractViolation("tensor: value count does not match shape product");
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), v);
  return t;
}

const std::vector<int64_t>& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::rank() const { return static_cast<int64_t>(impl_->shape.size()); }

int64_t Tensor::dim(int64_t axis) const { return impl_->shape.at(static_cast<size_t>(axis)); }

int64_t Tensor::size() const { return static_cast<int64_t>(impl_->data.size()); }

std::span<double> Tensor::values() { return impl_->data; }

std::span<const double> Tensor::values() const { return impl_->data; }

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (index.size() != impl_->shape.size())
    throw ContractViolation("tensor at(): index rank mismatch");
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : index) {
    const int64_t extent = impl_->shape[k];
    if (i < 0 || i >= extent) throw ContractViolation("tensor at(): index out of range");
    flat = flat * extent + i;
    ++k;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

double Tensor::item() const {
  if (size() != 1) throw ContractViolation("tensor item(): tensor is not a scalar");
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  return *this;
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detached_copy() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

// ---- autograd engine -------------------------------------------------------

namespace autograd {

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

size_t tape_size() { return g_tape.nodes.size(); }

void reset_tape() { g_tape.clear(); }

int64_t record_node(const char* op_id, const std::shared_ptr<TensorImpl>& out,
                    std::function<void()> backward_fn) {
  out->requires_grad = true;
  out->node = static_cast<int64_t>(g_tape.nodes.size());
  out->tape_gen = g_tape.gen;
  g_tape.nodes.push_back({op_id, std::move(backward_fn)});
  return out->node;
}

void accumulate_grad(const std::shared_ptr<TensorImpl>& t, std::span<const double> contribution) {
  if (contribution.size() != t->data.size())
    throw ContractViolation("accumulate_grad: contribution size mismatch");
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  for (size_t i = 0; i < contribution.size(); ++i) t->grad[i] += contribution[i];
}

}  // namespace autograd

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractViolation("backward: loss tensor is undefined");
  auto impl = loss.impl();
  if (loss.size() != 1) throw ContractViolation("backward: loss must be a scalar");
  if (!impl->requires_grad)
    throw ContractViolation("backward: loss is detached from the tape");
  if (impl->node >= 0 && impl->tape_gen != g_tape.gen)
    throw ContractViolation("backward: tape already consumed; rerun the forward pass");

  if (impl->grad.empty()) impl->grad.assign(1, 0.0);
  impl->grad[0] += 1.0;

  if (impl->node >= 0) {
    for (int64_t i = impl->node; i >= 0; --i) g_tape.nodes[static_cast<size_t>(i)].backward();
  }
  g_tape.clear();
}

// ---- ops -------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

  if (autograd::grad_enabled() && (a.requires_grad() || b.requires_grad())) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    autograd::record_node("add", oi, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (flows(ai)) autograd::accumulate_grad(ai, oi->grad);
      if (flows(bi)) autograd::accumulate_grad(bi, oi->grad);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];

  if (autograd::grad_enabled() && (a.requires_grad() || b.requires_grad())) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    autograd::record_node("mul", oi, [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const size_t n = oi->grad.size();
      std::vector<double> g(n);
      if (flows(ai)) {
        for (size_t i = 0; i < n; ++i) g[i] = oi->grad[i] * bi->data[i];
        autograd::accumulate_grad(ai, g);
      }
      if (flows(bi)) {
        for (size_t i = 0; i < n; ++i) g[i] = oi->grad[i] * ai->data[i];
        autograd::accumulate_grad(bi, g);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);

  if (autograd::grad_enabled() && x.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    autograd::record_node("sum", oi, [xi, oi] {
      if (oi->grad.empty()) return;
      std::vector<double> g(xi->data.size(), oi->grad[0]);
      autograd::accumulate_grad(xi, g);
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const double* px = x.values().data();
  double* po = out.values().data();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;

  if (autograd::grad_enabled() && x.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    autograd::record_node("relu", oi, [xi, oi] {
      if (oi->grad.empty()) return;
      const size_t n = oi->grad.size();
      std::vector<double> g(n);
      for (size_t i = 0; i < n; ++i) g[i] = xi->data[i] > 0.0 ? oi->grad[i] : 0.0;
      autograd::accumulate_grad(xi, g);
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 5 || b.rank() != 5)
    throw ContractViolation("concat_channels: both inputs must be rank-5");
  for (int64_t axis : {0, 2, 3, 4}) {
    if (a.dim(axis) != b.dim(axis))
      throw ContractViolation("concat_channels: non-channel dims differ " +
                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int64_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const int64_t spatial = a.dim(2) * a.dim(3) * a.dim(4);
  Tensor out({batch, ca + cb, a.dim(2), a.dim(3), a.dim(4)});

  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  for (int64_t n = 0; n < batch; ++n) {
    std::copy_n(pa + n * ca * spatial, ca * spatial, po + n * (ca + cb) * spatial);
    std::copy_n(pb + n * cb * spatial, cb * spatial, po + n * (ca + cb) * spatial + ca * spatial);
  }

  if (autograd::grad_enabled() && (a.requires_grad() || b.requires_grad())) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    autograd::record_node("concat_channels", oi, [ai, bi, oi, batch, ca, cb, spatial] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (flows(ai)) {
        std::vector<double> ga(ai->data.size());
        for (int64_t n = 0; n < batch; ++n)
          std::copy_n(g + n * (ca + cb) * spatial, ca * spatial, ga.data() + n * ca * spatial);
        autograd::accumulate_grad(ai, ga);
      }
      if (flows(bi)) {
        std::vector<double> gb(bi->data.size());
        for (int64_t n = 0; n < batch; ++n)
          std::copy_n(g + n * (ca + cb) * spatial + ca * spatial, cb * spatial,
                      gb.data() + n * cb * spatial);
        autograd::accumulate_grad(bi, gb);
      }
    });
  }
  return out;
}

Tensor softmax_channels(const Tensor& z) {
  if (z.rank() != 5) throw ContractViolation("softmax_channels: input must be rank-5");
  const int64_t channels = z.dim(1);
  if (channels < 2) throw ContractViolation("softmax_channels: need at least 2 channels");
  const int64_t batch = z.dim(0);
  const int64_t spatial = z.dim(2) * z.dim(3) * z.dim(4);

  Tensor out(z.shape());
  const double* pz = z.values().data();
  double* po = out.values().data();
  for (int64_t n = 0; n < batch; ++n) {
    const int64_t base = n * channels * spatial;
    for (int64_t v = 0; v < spatial; ++v) {
      double m = pz[base + v];
      for (int64_t c = 1; c < channels; ++c) m = std::max(m, pz[base + c * spatial + v]);
      double total = 0.0;
      for (int64_t c = 0; c < channels; ++c) {
        const double e = std::exp(pz[base + c * spatial + v] - m);
        po[base + c * spatial + v] = e;
        total += e;
      }
      for (int64_t c = 0; c < channels; ++c) po[base + c * spatial + v] /= total;
    }
  }

  if (autograd::grad_enabled() && z.requires_grad()) {
    auto zi = z.impl(), oi = out.impl();
    autograd::record_node("softmax_channels", oi, [zi, oi, batch, channels, spatial] {
      if (oi->grad.empty()) return;
      std::vector<double> g(zi->data.size());
      const double* q = oi->data.data();
      const double* go = oi->grad.data();
      for (int64_t n = 0; n < batch; ++n) {
        const int64_t base = n * channels * spatial;
        for (int64_t v = 0; v < spatial; ++v) {
          double dot = 0.0;
          for (int64_t c = 0; c < channels; ++c) {
            const int64_t i = base + c * spatial + v;
            dot += go[i] * q[i];
          }
          for (int64_t c = 0; c < channels; ++c) {
            const int64_t i = base + c * spatial + v;
            g[i] = q[i] * (go[i] - dot);
          }
        }
      }
      autograd::accumulate_grad(zi, g);
    });
  }
  return out;
}

}  // namespace ratles
