#include "ratles/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ratles/error.hpp"

namespace ratles {

namespace {

using detail::TensorImpl;

void require_rank5(const char* op, const Tensor& x) {
  if (!x.defined() || x.rank() != 5)
    throw ContractViolation(std::string(op) + ": input must be rank-5 (N,C,D,H,W)");
}

// acc[x] += w0*p[x] + w1*p[x+1] + w2*p[x+2]
inline void row_tap3(double* acc, const double* p, double w0, double w1, double w2, int64_t n) {
  for (int64_t x = 0; x < n; ++x) acc[x] += w0 * p[x] + w1 * p[x + 1] + w2 * p[x + 2];
}

// One batch item of (C,D,H,W) copied into a buffer with a 1-voxel zero border.
void pad_border1(const double* src, double* dst, int64_t C, int64_t D, int64_t H, int64_t W) {
  const int64_t PW = W + 2, PH = H + 2, PD = D + 2;
  std::fill(dst, dst + C * PD * PH * PW, 0.0);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t z = 0; z < D; ++z)
      for (int64_t y = 0; y < H; ++y)
        std::copy_n(src + ((c * D + z) * H + y) * W, W,
                    dst + ((c * PD + z + 1) * PH + (y + 1)) * PW + 1);
}

void conv3_forward_item(const double* xpad, const double* w, const double* b, double* out,
                        int64_t ci_n, int64_t co_n, int64_t D, int64_t H, int64_t W) {
  const int64_t PW = W + 2, PH = H + 2;
  const int64_t pplane = (D + 2) * PH * PW;
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < co_n; ++co) {
    std::vector<double> acc(static_cast<size_t>(W));
    const double* wco = w + co * ci_n * 27;
    double* oc = out + co * D * H * W;
    for (int64_t z = 0; z < D; ++z)
      for (int64_t y = 0; y < H; ++y) {
        std::fill(acc.begin(), acc.end(), b[co]);
        for (int64_t ci = 0; ci < ci_n; ++ci) {
          const double* pc = xpad + ci * pplane;
          const double* wci = wco + ci * 27;
          for (int64_t dz = 0; dz < 3; ++dz)
            for (int64_t dy = 0; dy < 3; ++dy) {
              const double* prow = pc + ((z + dz) * PH + y + dy) * PW;
              const double* wt = wci + (dz * 3 + dy) * 3;
              row_tap3(acc.data(), prow, wt[0], wt[1], wt[2], W);
            }
        }
        std::copy(acc.begin(), acc.end(), oc + (z * H + y) * W);
      }
  }
}

// dx for one batch item; gpad is dout with a 1-voxel zero border.
// Adjoint of the forward stencil: flipped kernel taps over the padded grads.
void conv3_backward_input_item(const double* gpad, const double* w, double* dx, int64_t ci_n,
                               int64_t co_n, int64_t D, int64_t H, int64_t W) {
  const int64_t PW = W + 2, PH = H + 2;
  const int64_t pplane = (D + 2) * PH * PW;
#pragma omp parallel for schedule(static)
  for (int64_t ci = 0; ci < ci_n; ++ci) {
    std::vector<double> acc(static_cast<size_t>(W));
    double* dc = dx + ci * D * H * W;
    for (int64_t z = 0; z < D; ++z)
      for (int64_t y = 0; y < H; ++y) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t co = 0; co < co_n; ++co) {
          const double* pc = gpad + co * pplane;
          const double* wci = w + (co * ci_n + ci) * 27;
          for (int64_t e = 0; e < 3; ++e)
            for (int64_t f = 0; f < 3; ++f) {
              const double* prow = pc + ((z + e) * PH + y + f) * PW;
              const double* wt = wci + ((2 - e) * 3 + (2 - f)) * 3;
              row_tap3(acc.data(), prow, wt[2], wt[1], wt[0], W);
            }
        }
        double* drow = dc + (z * H + y) * W;
        for (int64_t x = 0; x < W; ++x) drow[x] += acc[x];
      }
  }
}

void conv3_backward_weight_item(const double* xpad, const double* go, double* dw, int64_t ci_n,
                                int64_t co_n, int64_t D, int64_t H, int64_t W) {
  const int64_t PW = W + 2, PH = H + 2;
  const int64_t pplane = (D + 2) * PH * PW;
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < co_n; ++co) {
    const double* gc = go + co * D * H * W;
    for (int64_t ci = 0; ci < ci_n; ++ci) {
      const double* pc = xpad + ci * pplane;
      double* wt = dw + (co * ci_n + ci) * 27;
      for (int64_t dz = 0; dz < 3; ++dz)
        for (int64_t dy = 0; dy < 3; ++dy) {
          double s0 = 0.0, s1 = 0.0, s2 = 0.0;
          for (int64_t z = 0; z < D; ++z)
            for (int64_t y = 0; y < H; ++y) {
              const double* grow = gc + (z * H + y) * W;
              const double* prow = pc + ((z + dz) * PH + y + dy) * PW;
#pragma omp simd reduction(+ : s0, s1, s2)
              for (int64_t x = 0; x < W; ++x) {
                s0 += grow[x] * prow[x];
                s1 += grow[x] * prow[x + 1];
                s2 += grow[x] * prow[x + 2];
              }
            }
          double* d = wt + (dz * 3 + dy) * 3;
          d[0] += s0;
          d[1] += s1;
          d[2] += s2;
        }
    }
  }
}

Tensor conv3d_k3(const Tensor& x, const Conv3d& p) {
  const int64_t batch = x.dim(0), ci_n = x.dim(1);
  const int64_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t co_n = p.out_channels();
  const int64_t plane = D * H * W;
  const int64_t pitem = ci_n * (D + 2) * (H + 2) * (W + 2);

  Tensor out({batch, co_n, D, H, W});
  std::vector<double> xpad(static_cast<size_t>(pitem));
  for (int64_t n = 0; n < batch; ++n) {
    pad_border1(x.values().data() + n * ci_n * plane, xpad.data(), ci_n, D, H, W);
    conv3_forward_item(xpad.data(), p.weight.values().data(), p.bias.values().data(),
                       out.values().data() + n * co_n * plane, ci_n, co_n, D, H, W);
  }

  if (autograd::grad_enabled() &&
      (x.requires_grad() || p.weight.requires_grad() || p.bias.requires_grad())) {
    auto xi = x.impl(), wi = p.weight.impl(), bi = p.bias.impl(), oi = out.impl();
    autograd::record_node("conv3d", oi, [xi, wi, bi, oi, batch, ci_n, co_n, D, H, W, plane,
                                         pitem] {
      if (oi->grad.empty()) return;
      const double* go = oi->grad.data();

      if (bi->requires_grad) {
        std::vector<double> db(static_cast<size_t>(co_n), 0.0);
        for (int64_t n = 0; n < batch; ++n)
          for (int64_t co = 0; co < co_n; ++co) {
            const double* g = go + (n * co_n + co) * plane;
            double s = 0.0;
            for (int64_t i = 0; i < plane; ++i) s += g[i];
            db[static_cast<size_t>(co)] += s;
          }
        autograd::accumulate_grad(bi, db);
      }
      if (wi->requires_grad) {
        std::vector<double> dw(wi->data.size(), 0.0);
        std::vector<double> xpad(static_cast<size_t>(pitem));
        for (int64_t n = 0; n < batch; ++n) {
          pad_border1(xi->data.data() + n * ci_n * plane, xpad.data(), ci_n, D, H, W);
          conv3_backward_weight_item(xpad.data(), go + n * co_n * plane, dw.data(), ci_n, co_n,
                                     D, H, W);
        }
        autograd::accumulate_grad(wi, dw);
      }
      if (xi->requires_grad) {
        std::vector<double> dx(xi->data.size(), 0.0);
        std::vector<double> gpad(static_cast<size_t>(co_n * (D + 2) * (H + 2) * (W + 2)));
        for (int64_t n = 0; n < batch; ++n) {
          pad_border1(go + n * co_n * plane, gpad.data(), co_n, D, H, W);
          conv3_backward_input_item(gpad.data(), wi->data.data(),
                                    dx.data() + n * ci_n * plane, ci_n, co_n, D, H, W);
        }
        autograd::accumulate_grad(xi, dx);
      }
    });
  }
  return out;
}

Tensor conv3d_k1(const Tensor& x, const Conv3d& p) {
  const int64_t batch = x.dim(0), ci_n = x.dim(1);
  const int64_t plane = x.dim(2) * x.dim(3) * x.dim(4);
  const int64_t co_n = p.out_channels();

  Tensor out({batch, co_n, x.dim(2), x.dim(3), x.dim(4)});
  const double* px = x.values().data();
  const double* pw = p.weight.values().data();
  const double* pb = p.bias.values().data();
  double* po = out.values().data();
  for (int64_t n = 0; n < batch; ++n) {
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < co_n; ++co) {
      double* oc = po + (n * co_n + co) * plane;
      std::fill(oc, oc + plane, pb[co]);
      for (int64_t ci = 0; ci < ci_n; ++ci) {
        const double w = pw[co * ci_n + ci];
        const double* xc = px + (n * ci_n + ci) * plane;
        for (int64_t i = 0; i < plane; ++i) oc[i] += w * xc[i];
      }
    }
  }

  if (autograd::grad_enabled() &&
      (x.requires_grad() || p.weight.requires_grad() || p.bias.requires_grad())) {
    auto xi = x.impl(), wi = p.weight.impl(), bi = p.bias.impl(), oi = out.impl();
    autograd::record_node("conv3d", oi, [xi, wi, bi, oi, batch, ci_n, co_n, plane] {
      if (oi->grad.empty()) return;
      const double* go = oi->grad.data();

      if (bi->requires_grad) {
        std::vector<double> db(static_cast<size_t>(co_n), 0.0);
        for (int64_t n = 0; n < batch; ++n)
          for (int64_t co = 0; co < co_n; ++co) {
            const double* g = go + (n * co_n + co) * plane;
            double s = 0.0;
            for (int64_t i = 0; i < plane; ++i) s += g[i];
            db[static_cast<size_t>(co)] += s;
          }
        autograd::accumulate_grad(bi, db);
      }
      if (wi->requires_grad) {
        std::vector<double> dw(wi->data.size(), 0.0);
        for (int64_t n = 0; n < batch; ++n)
          for (int64_t co = 0; co < co_n; ++co) {
            const double* g = go + (n * co_n + co) * plane;
            for (int64_t ci = 0; ci < ci_n; ++ci) {
              const double* xc = xi->data.data() + (n * ci_n + ci) * plane;
              double s = 0.0;
#pragma omp simd reduction(+ : s)
              for (int64_t i = 0; i < plane; ++i) s += g[i] * xc[i];
              dw[static_cast<size_t>(co * ci_n + ci)] += s;
            }
          }
        autograd::accumulate_grad(wi, dw);
      }
      if (xi->requires_grad) {
        std::vector<double> dx(xi->data.size(), 0.0);
        for (int64_t n = 0; n < batch; ++n) {
#pragma omp parallel for schedule(static)
          for (int64_t ci = 0; ci < ci_n; ++ci) {
            double* dc = dx.data() + (n * ci_n + ci) * plane;
            for (int64_t co = 0; co < co_n; ++co) {
              const double w = wi->data[static_cast<size_t>(co * ci_n + ci)];
              const double* g = go + (n * co_n + co) * plane;
              for (int64_t i = 0; i < plane; ++i) dc[i] += w * g[i];
            }
          }
        }
        autograd::accumulate_grad(xi, dx);
      }
    });
  }
  return out;
}

}  // namespace

// ---- Conv3d ----------------------------------------------------------------

Conv3d Conv3d::create(int64_t in_ch, int64_t out_ch, int64_t kernel, std::mt19937_64& rng) {
  if (kernel != 1 && kernel != 3) throw ContractViolation("conv3d: kernel must be 1 or 3");
  if (in_ch < 0 || out_ch < 1) throw ContractViolation("conv3d: bad channel counts");
  Conv3d c;
  c.kernel = kernel;
  c.weight = Tensor({out_ch, in_ch, kernel, kernel, kernel});
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_ch * kernel * kernel * kernel));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : c.weight.values()) v = dist(rng);
  c.bias = Tensor({out_ch});
  c.weight.set_requires_grad(true);
  c.bias.set_requires_grad(true);
  return c;
}

void Conv3d::collect_parameters(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Tensor conv3d(const Tensor& x, const Conv3d& p) {
  require_rank5("conv3d", x);
  if (x.dim(1) != p.in_channels())
    throw ContractViolation("conv3d: input has " + std::to_string(x.dim(1)) +
                            " channels, weights expect " + std::to_string(p.in_channels()));
  return p.kernel == 3 ? conv3d_k3(x, p) : conv3d_k1(x, p);
}

// ---- BatchNorm3d -----------------------------------------------------------

BatchNorm3d BatchNorm3d::create(int64_t channels) {
  if (channels < 1) throw ContractViolation("batchnorm: channels must be positive");
  BatchNorm3d s;
  s.gamma = Tensor::full({channels}, 1.0);
  s.beta = Tensor({channels});
  s.gamma.set_requires_grad(true);
  s.beta.set_requires_grad(true);
  s.running_mean.assign(static_cast<size_t>(channels), 0.0);
  s.running_var.assign(static_cast<size_t>(channels), 1.0);
  return s;
}

void BatchNorm3d::collect_parameters(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

void BatchNorm3d::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

Tensor batchnorm(const Tensor& x, BatchNorm3d& s) {
  require_rank5("batchnorm", x);
  const int64_t channels = s.channels();
  if (x.dim(1) != channels)
    throw ContractViolation("batchnorm: channel count mismatch");
  const int64_t batch = x.dim(0);
  const int64_t plane = x.dim(2) * x.dim(3) * x.dim(4);
  const double m = static_cast<double>(batch * plane);

  std::vector<double> mean(static_cast<size_t>(channels));
  std::vector<double> invstd(static_cast<size_t>(channels));
  const double* px = x.values().data();

  if (s.training) {
    std::vector<double> var(static_cast<size_t>(channels));
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (int64_t n = 0; n < batch; ++n) {
        const double* p = px + (n * channels + c) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / m;
      double sq = 0.0;
      for (int64_t n = 0; n < batch; ++n) {
        const double* p = px + (n * channels + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      mean[static_cast<size_t>(c)] = mu;
      var[static_cast<size_t>(c)] = sq / m;
      invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(sq / m + s.epsilon);
    }
    for (int64_t c = 0; c < channels; ++c) {
      auto ci = static_cast<size_t>(c);
      s.running_mean[ci] += s.momentum * (mean[ci] - s.running_mean[ci]);
      s.running_var[ci] += s.momentum * (var[ci] - s.running_var[ci]);
    }
  } else {
    for (int64_t c = 0; c < channels; ++c) {
      auto ci = static_cast<size_t>(c);
      mean[ci] = s.running_mean[ci];
      invstd[ci] = 1.0 / std::sqrt(s.running_var[ci] + s.epsilon);
    }
  }

  Tensor out(x.shape());
  const bool record = autograd::grad_enabled() &&
                      (x.requires_grad() || s.gamma.requires_grad() || s.beta.requires_grad());
  std::vector<double> xhat;
  if (record) xhat.resize(x.values().size());
  double* po = out.values().data();
  const double* pg = s.gamma.values().data();
  const double* pbeta = s.beta.values().data();
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < channels; ++c) {
    const double mu = mean[static_cast<size_t>(c)];
    const double is = invstd[static_cast<size_t>(c)];
    const double g = pg[c], b = pbeta[c];
    for (int64_t n = 0; n < batch; ++n) {
      const int64_t base = (n * channels + c) * plane;
      const double* p = px + base;
      double* o = po + base;
      if (record) {
        double* h = xhat.data() + base;
        for (int64_t i = 0; i < plane; ++i) {
          h[i] = (p[i] - mu) * is;
          o[i] = h[i] * g + b;
        }
      } else {
        for (int64_t i = 0; i < plane; ++i) o[i] = (p[i] - mu) * is * g + b;
      }
    }
  }

  if (record) {
    auto xi = x.impl(), gi = s.gamma.impl(), bi = s.beta.impl(), oi = out.impl();
    const bool training = s.training;
    autograd::record_node(
        "batchnorm", oi,
        [xi, gi, bi, oi, xhat = std::move(xhat), invstd = std::move(invstd), batch, channels,
         plane, m, training] {
          if (oi->grad.empty()) return;
          const double* go = oi->grad.data();

          std::vector<double> sum_g(static_cast<size_t>(channels), 0.0);
          std::vector<double> sum_gx(static_cast<size_t>(channels), 0.0);
#pragma omp parallel for schedule(static)
          for (int64_t c = 0; c < channels; ++c) {
            double s1 = 0.0, s2 = 0.0;
            for (int64_t n = 0; n < batch; ++n) {
              const int64_t base = (n * channels + c) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                s1 += go[base + i];
                s2 += go[base + i] * xhat[static_cast<size_t>(base + i)];
              }
            }
            sum_g[static_cast<size_t>(c)] = s1;
            sum_gx[static_cast<size_t>(c)] = s2;
          }

          if (bi->requires_grad) autograd::accumulate_grad(bi, sum_g);
          if (gi->requires_grad) autograd::accumulate_grad(gi, sum_gx);

          if (xi->requires_grad) {
            std::vector<double> dx(xi->data.size());
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < channels; ++c) {
              const double g = gi->data[static_cast<size_t>(c)];
              const double is = invstd[static_cast<size_t>(c)];
              const double sg = sum_g[static_cast<size_t>(c)];
              const double sgx = sum_gx[static_cast<size_t>(c)];
              for (int64_t n = 0; n < batch; ++n) {
                const int64_t base = (n * channels + c) * plane;
                if (training) {
                  // d/dx of ((x-mu)/sqrt(var+eps)): mean and variance both
                  // depend on x, hence the two correction terms.
                  for (int64_t i = 0; i < plane; ++i)
                    dx[static_cast<size_t>(base + i)] =
                        g * is / m *
                        (m * go[base + i] - sg - xhat[static_cast<size_t>(base + i)] * sgx);
                } else {
                  for (int64_t i = 0; i < plane; ++i)
                    dx[static_cast<size_t>(base + i)] = g * is * go[base + i];
                }
              }
            }
            autograd::accumulate_grad(xi, dx);
          }
        });
  }
  return out;
}

// ---- maxpool2 ----------------------------------------------------------------

Tensor maxpool2(const Tensor& x) {
  require_rank5("maxpool2", x);
  const int64_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (D % 2 || H % 2 || W % 2)
    throw ContractViolation("maxpool2: spatial dims must be even, got (" + std::to_string(D) +
                            "," + std::to_string(H) + "," + std::to_string(W) + ")");
  const int64_t batch = x.dim(0), channels = x.dim(1);
  const int64_t OD = D / 2, OH = H / 2, OW = W / 2;

  Tensor out({batch, channels, OD, OH, OW});
  std::vector<int64_t> argmax(static_cast<size_t>(out.size()));
  const double* px = x.values().data();
  double* po = out.values().data();

  const int64_t planes = batch * channels;
#pragma omp parallel for schedule(static)
  for (int64_t pc = 0; pc < planes; ++pc) {
    const double* in = px + pc * D * H * W;
    double* o = po + pc * OD * OH * OW;
    int64_t* am = argmax.data() + pc * OD * OH * OW;
    for (int64_t oz = 0; oz < OD; ++oz)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t besti = -1;
          for (int64_t dz = 0; dz < 2; ++dz)
            for (int64_t dy = 0; dy < 2; ++dy)
              for (int64_t dx = 0; dx < 2; ++dx) {
                const int64_t idx = ((2 * oz + dz) * H + 2 * oy + dy) * W + 2 * ox + dx;
                if (in[idx] > best) {
                  best = in[idx];
                  besti = idx;
                }
              }
          o[(oz * OH + oy) * OW + ox] = best;
          am[(oz * OH + oy) * OW + ox] = pc * D * H * W + besti;
        }
  }

  if (autograd::grad_enabled() && x.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    autograd::record_node("maxpool2", oi, [xi, oi, argmax = std::move(argmax)] {
      if (oi->grad.empty()) return;
      std::vector<double> dx(xi->data.size(), 0.0);
      for (size_t i = 0; i < argmax.size(); ++i)
        dx[static_cast<size_t>(argmax[i])] += oi->grad[i];
      autograd::accumulate_grad(xi, dx);
    });
  }
  return out;
}

// ---- upsample_trilinear2 ----------------------------------------------------

namespace {

struct AxisTable {
  std::vector<int64_t> i0, i1;
  std::vector<double> t;
};

AxisTable upsample_axis_table(int64_t in) {
  AxisTable tab;
  const int64_t out = in * 2;
  tab.i0.resize(static_cast<size_t>(out));
  tab.i1.resize(static_cast<size_t>(out));
  tab.t.resize(static_cast<size_t>(out));
  for (int64_t o = 0; o < out; ++o) {
    double src = 0.5 * static_cast<double>(o) - 0.25;
    if (src < 0.0) src = 0.0;
    int64_t i0 = static_cast<int64_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    tab.i0[static_cast<size_t>(o)] = i0;
    tab.i1[static_cast<size_t>(o)] = std::min(i0 + 1, in - 1);
    tab.t[static_cast<size_t>(o)] = src - static_cast<double>(i0);
  }
  return tab;
}

}  // namespace

Tensor upsample_trilinear2(const Tensor& x) {
  require_rank5("upsample_trilinear2", x);
  const int64_t batch = x.dim(0), channels = x.dim(1);
  const int64_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const AxisTable tz = upsample_axis_table(D);
  const AxisTable ty = upsample_axis_table(H);
  const AxisTable tx = upsample_axis_table(W);

  Tensor out({batch, channels, 2 * D, 2 * H, 2 * W});
  const double* px = x.values().data();
  double* po = out.values().data();
  const int64_t planes = batch * channels;

#pragma omp parallel for schedule(static)
  for (int64_t pc = 0; pc < planes; ++pc) {
    const double* in = px + pc * D * H * W;
    double* o = po + pc * 8 * D * H * W;
    for (int64_t oz = 0; oz < 2 * D; ++oz) {
      const double wz1 = tz.t[static_cast<size_t>(oz)], wz0 = 1.0 - wz1;
      const int64_t z0 = tz.i0[static_cast<size_t>(oz)], z1 = tz.i1[static_cast<size_t>(oz)];
      for (int64_t oy = 0; oy < 2 * H; ++oy) {
        const double wy1 = ty.t[static_cast<size_t>(oy)], wy0 = 1.0 - wy1;
        const int64_t y0 = ty.i0[static_cast<size_t>(oy)], y1 = ty.i1[static_cast<size_t>(oy)];
        const double* r00 = in + (z0 * H + y0) * W;
        const double* r01 = in + (z0 * H + y1) * W;
        const double* r10 = in + (z1 * H + y0) * W;
        const double* r11 = in + (z1 * H + y1) * W;
        double* orow = o + (oz * 2 * H + oy) * 2 * W;
        for (int64_t ox = 0; ox < 2 * W; ++ox) {
          const double wx1 = tx.t[static_cast<size_t>(ox)], wx0 = 1.0 - wx1;
          const int64_t x0 = tx.i0[static_cast<size_t>(ox)], x1 = tx.i1[static_cast<size_t>(ox)];
          const double v00 = wx0 * r00[x0] + wx1 * r00[x1];
          const double v01 = wx0 * r01[x0] + wx1 * r01[x1];
          const double v10 = wx0 * r10[x0] + wx1 * r10[x1];
          const double v11 = wx0 * r11[x0] + wx1 * r11[x1];
          orow[ox] = wz0 * (wy0 * v00 + wy1 * v01) + wz1 * (wy0 * v10 + wy1 * v11);
        }
      }
    }
  }

  if (autograd::grad_enabled() && x.requires_grad()) {
    auto xi = x.impl(), oi = out.impl();
    autograd::record_node(
        "upsample_trilinear2", oi, [xi, oi, tz, ty, tx, planes, D, H, W] {
          if (oi->grad.empty()) return;
          std::vector<double> dx(xi->data.size(), 0.0);
          const double* go = oi->grad.data();
#pragma omp parallel for schedule(static)
          for (int64_t pc = 0; pc < planes; ++pc) {
            double* d = dx.data() + pc * D * H * W;
            const double* g = go + pc * 8 * D * H * W;
            for (int64_t oz = 0; oz < 2 * D; ++oz) {
              const double wz1 = tz.t[static_cast<size_t>(oz)], wz0 = 1.0 - wz1;
              const int64_t z0 = tz.i0[static_cast<size_t>(oz)], z1 = tz.i1[static_cast<size_t>(oz)];
              for (int64_t oy = 0; oy < 2 * H; ++oy) {
                const double wy1 = ty.t[static_cast<size_t>(oy)], wy0 = 1.0 - wy1;
                const int64_t y0 = ty.i0[static_cast<size_t>(oy)], y1 = ty.i1[static_cast<size_t>(oy)];
                double* d00 = d + (z0 * H + y0) * W;
                double* d01 = d + (z0 * H + y1) * W;
                double* d10 = d + (z1 * H + y0) * W;
                double* d11 = d + (z1 * H + y1) * W;
                const double* grow = g + (oz * 2 * H + oy) * 2 * W;
                for (int64_t ox = 0; ox < 2 * W; ++ox) {
                  const double wx1 = tx.t[static_cast<size_t>(ox)], wx0 = 1.0 - wx1;
                  const int64_t x0 = tx.i0[static_cast<size_t>(ox)];
                  const int64_t x1 = tx.i1[static_cast<size_t>(ox)];
                  const double gv = grow[ox];
                  d00[x0] += wz0 * wy0 * wx0 * gv;
                  d00[x1] += wz0 * wy0 * wx1 * gv;
                  d01[x0] += wz0 * wy1 * wx0 * gv;
                  d01[x1] += wz0 * wy1 * wx1 * gv;
                  d10[x0] += wz1 * wy0 * wx0 * gv;
                  d10[x1] += wz1 * wy0 * wx1 * gv;
                  d11[x0] += wz1 * wy1 * wx0 * gv;
                  d11[x1] += wz1 * wy1 * wx1 * gv;
                }
              }
            }
          }
          autograd::accumulate_grad(xi, dx);
        });
  }
  return out;
}

// ---- blocks ------------------------------------------------------------------

Bottleneck Bottleneck::create(int64_t in_ch, int64_t out_ch, std::mt19937_64& rng) {
  Bottleneck b;
  b.bn = BatchNorm3d::create(in_ch);
  b.conv = Conv3d::create(in_ch, out_ch, 1, rng);
  return b;
}

Tensor Bottleneck::forward(const Tensor& x) { return conv3d(batchnorm(relu(x), bn), conv); }

void Bottleneck::collect_parameters(const std::string& prefix, std::vector<NamedParam>& out) {
  bn.collect_parameters(prefix + ".bn", out);
  conv.collect_parameters(prefix + ".conv", out);
}

void Bottleneck::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  bn.collect_buffers(prefix + ".bn", out);
}

ResNetBlock ResNetBlock::create(int64_t channels, std::mt19937_64& rng) {
  ResNetBlock b;
  b.bn1 = BatchNorm3d::create(channels);
  b.conv1 = Conv3d::create(channels, channels, 3, rng);
  b.bn2 = BatchNorm3d::create(channels);
  b.conv2 = Conv3d::create(channels, channels, 3, rng);
  return b;
}

Tensor ResNetBlock::forward(const Tensor& x) {
  Tensor h = conv3d(batchnorm(relu(x), bn1), conv1);
  h = conv3d(batchnorm(relu(h), bn2), conv2);
  return add(x, h);
}

void ResNetBlock::set_training(bool on) {
  bn1.training = on;
  bn2.training = on;
}

void ResNetBlock::collect_parameters(const std::string& prefix, std::vector<NamedParam>& out) {
  bn1.collect_parameters(prefix + ".bn1", out);
  conv1.collect_parameters(prefix + ".conv1", out);
  bn2.collect_parameters(prefix + ".bn2", out);
  conv2.collect_parameters(prefix + ".conv2", out);
}

void ResNetBlock::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  bn1.collect_buffers(prefix + ".bn1", out);
  bn2.collect_buffers(prefix + ".bn2", out);
}

DenseNetBlock DenseNetBlock::create(int64_t channels, int64_t growth, std::mt19937_64& rng) {
  if (growth < 1) throw ContractViolation("densenet_block: growth must be positive");
  DenseNetBlock b;
  b.growth = growth;
  b.bn1 = BatchNorm3d::create(channels);
  b.conv1 = Conv3d::create(channels, growth, 3, rng);
  b.bn2 = BatchNorm3d::create(channels + growth);
  b.conv2 = Conv3d::create(channels + growth, growth, 3, rng);
  b.projection = Bottleneck::create(channels + 2 * growth, channels, rng);
  return b;
}

Tensor DenseNetBlock::forward(const Tensor& x) {
  Tensor y1 = conv3d(batchnorm(relu(x), bn1), conv1);
  Tensor c1 = concat_channels(x, y1);
  Tensor y2 = conv3d(batchnorm(relu(c1), bn2), conv2);
  Tensor c2 = concat_channels(c1, y2);
  return projection.forward(c2);
}

void DenseNetBlock::set_training(bool on) {
  bn1.training = on;
  bn2.training = on;
  projection.set_training(on);
}

void DenseNetBlock::collect_parameters(const std::string& prefix, std::vector<NamedParam>& out) {
  bn1.collect_parameters(prefix + ".bn1", out);
  conv1.collect_parameters(prefix + ".conv1", out);
  bn2.collect_parameters(prefix + ".bn2", out);
  conv2.collect_parameters(prefix + ".conv2", out);
  projection.collect_parameters(prefix + ".proj", out);
}

void DenseNetBlock::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  bn1.collect_buffers(prefix + ".bn1", out);
  bn2.collect_buffers(prefix + ".bn2", out);
  projection.collect_buffers(prefix + ".proj", out);
}

// ---- parameter accounting ----------------------------------------------------

int64_t resnet_block_param_count(int64_t ch) {
  return 2 * (27 * ch * ch + ch) + 2 * (2 * ch);
}

int64_t densenet_block_param_count(int64_t ch, int64_t g) {
  const int64_t stage1 = 27 * ch * g + g + 2 * ch;
  const int64_t stage2 = 27 * (ch + g) * g + g + 2 * (ch + g);
  const int64_t proj = (ch + 2 * g) * ch + ch + 2 * (ch + 2 * g);
  return stage1 + stage2 + proj;
}

int64_t densenet_growth_for(int64_t ch) {
  // densenet(ch,g) - resnet(ch) = 27g^2 + (56ch+8)g - (53ch^2 - ch)
  const double b = static_cast<double>(56 * ch + 8);
  const double c = -static_cast<double>(53 * ch * ch - ch);
  const double root = (-b + std::sqrt(b * b - 4.0 * 27.0 * c)) / 54.0;
  const int64_t target = resnet_block_param_count(ch);
  int64_t lo = std::max<int64_t>(1, static_cast<int64_t>(std::floor(root)));
  int64_t hi = lo + 1;
  const int64_t dlo = std::llabs(densenet_block_param_count(ch, lo) - target);
  const int64_t dhi = std::llabs(densenet_block_param_count(ch, hi) - target);
  return dhi < dlo ? hi : lo;
}

}  // namespace ratles
