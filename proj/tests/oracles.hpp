#pragma once

// Independent reference implementations used as test oracles. These stay
// deliberately naive — nested loops and pairwise scans — so they share no
// code path with the implementations they check.

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include "ratles/metrics.hpp"
#include "ratles/tensor.hpp"
#include "ratles/volume.hpp"

namespace oracles {

// Direct 7-nested-loop same-padded cross-correlation.
inline ratles::Tensor conv3d_reference(const ratles::Tensor& x, const ratles::Tensor& w,
                                       const ratles::Tensor& b) {
  const int64_t batch = x.dim(0), ci_n = x.dim(1);
  const int64_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t co_n = w.dim(0), k = w.dim(2);
  const int64_t pad = (k - 1) / 2;
  ratles::Tensor out({batch, co_n, D, H, W});
  double* po = out.values().data();
  int64_t o = 0;
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t co = 0; co < co_n; ++co)
      for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx) {
            double acc = b.values()[co];
            for (int64_t ci = 0; ci < ci_n; ++ci)
              for (int64_t dz = 0; dz < k; ++dz)
                for (int64_t dy = 0; dy < k; ++dy)
                  for (int64_t dx = 0; dx < k; ++dx) {
                    const int64_t zi = z + dz - pad;
                    const int64_t yi = y + dy - pad;
                    const int64_t xi = xx + dx - pad;
                    if (zi < 0 || zi >= D || yi < 0 || yi >= H || xi < 0 || xi >= W) continue;
                    acc += w.at({co, ci, dz, dy, dx}) * x.at({n, ci, zi, yi, xi});
                  }
            po[o++] = acc;
          }
  return out;
}

// O(n^2) symmetric max-min distance over boundary voxel centers.
inline double hausdorff_bruteforce(const ratles::Mask& a, const ratles::Mask& b) {
  const auto pa = ratles::boundary_voxels(a);
  const auto pb = ratles::boundary_voxels(b);
  auto dist = [&](const std::array<int64_t, 3>& p, const std::array<int64_t, 3>& q) {
    const double dz = static_cast<double>(p[0] - q[0]) * a.spacing[0];
    const double dy = static_cast<double>(p[1] - q[1]) * a.spacing[1];
    const double dx = static_cast<double>(p[2] - q[2]) * a.spacing[2];
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  };
  double worst = 0.0;
  for (const auto& p : pa) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : pb) best = std::min(best, dist(p, q));
    worst = std::max(worst, best);
  }
  for (const auto& q : pb) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : pa) best = std::min(best, dist(q, p));
    worst = std::max(worst, best);
  }
  return worst;
}

// Union-find component sizes (6-connectivity), keyed by root voxel.
struct UnionFind {
  std::vector<int64_t> parent;
  explicit UnionFind(size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int64_t find(int64_t i) {
    while (parent[static_cast<size_t>(i)] != i) {
      parent[static_cast<size_t>(i)] =
          parent[static_cast<size_t>(parent[static_cast<size_t>(i)])];
      i = parent[static_cast<size_t>(i)];
    }
    return i;
  }
  void unite(int64_t a, int64_t b) { parent[static_cast<size_t>(find(a))] = find(b); }
};

inline std::map<int64_t, int64_t> component_sizes_unionfind(const ratles::Mask& m,
                                                            bool foreground) {
  const auto [D, H, W] = m.dims;
  UnionFind uf(static_cast<size_t>(m.voxels()));
  auto wanted = [&](int64_t i) { return (m.data[static_cast<size_t>(i)] != 0) == foreground; };
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const int64_t i = (z * H + y) * W + x;
        if (!wanted(i)) continue;
        if (z + 1 < D && wanted(i + H * W)) uf.unite(i, i + H * W);
        if (y + 1 < H && wanted(i + W)) uf.unite(i, i + W);
        if (x + 1 < W && wanted(i + 1)) uf.unite(i, i + 1);
      }
  std::map<int64_t, int64_t> sizes;
  for (int64_t i = 0; i < m.voxels(); ++i)
    if (wanted(i)) ++sizes[uf.find(i)];
  return sizes;
}

}  // namespace oracles
