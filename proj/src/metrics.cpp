#include "ratles/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <random>
#include <sstream>

#include "ratles/error.hpp"

namespace ratles {

namespace {

void require_same_dims(const char* op, const Mask& a, const Mask& b) {
  if (a.dims != b.dims)
    throw ContractViolation(std::string(op) + ": mask dimensions differ");
}

constexpr std::array<std::array<int64_t, 3>, 6> kSixNeighbors{{
    {-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1},
}};

}  // namespace

double dice(const Mask& a, const Mask& b) {
  require_same_dims("dice", a, b);
  int64_t inter = 0, total = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] & b.data[i];
    total += a.data[i] + b.data[i];
  }
  if (total == 0) return 1.0;  // two empty masks agree perfectly
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

double surface_area_mm2(const Mask& m) {
  if (m.empty_mask()) throw ContractViolation("surface_area: mask is empty");
  const auto [D, H, W] = m.dims;
  const auto [sz, sy, sx] = m.spacing;
  const double face_z = sy * sx;  // face normal to the depth axis
  const double face_y = sz * sx;
  const double face_x = sz * sy;

  auto at = [&](int64_t z, int64_t y, int64_t x) -> bool {
    if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
    return m.data[static_cast<size_t>((z * H + y) * W + x)] != 0;
  };

  double area = 0.0;
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        if (!at(z, y, x)) continue;
        if (!at(z - 1, y, x)) area += face_z;
        if (!at(z + 1, y, x)) area += face_z;
        if (!at(z, y - 1, x)) area += face_y;
        if (!at(z, y + 1, x)) area += face_y;
        if (!at(z, y, x - 1)) area += face_x;
        if (!at(z, y, x + 1)) area += face_x;
      }
  return area;
}

std::optional<double> compactness(const Mask& m) {
  const int64_t count = m.foreground_count();
  if (count == 0) return std::nullopt;
  const double area = surface_area_mm2(m);
  const double volume =
      static_cast<double>(count) * m.spacing[0] * m.spacing[1] * m.spacing[2];
  return std::pow(area, 1.5) / volume;
}

std::vector<std::array<int64_t, 3>> boundary_voxels(const Mask& m) {
  if (m.empty_mask()) throw ContractViolation("boundary_voxels: mask is empty");
  const auto [D, H, W] = m.dims;
  auto at = [&](int64_t z, int64_t y, int64_t x) -> bool {
    if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
    return m.data[static_cast<size_t>((z * H + y) * W + x)] != 0;
  };
  std::vector<std::array<int64_t, 3>> out;
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        if (!at(z, y, x)) continue;
        for (const auto& d : kSixNeighbors) {
          if (!at(z + d[0], y + d[1], x + d[2])) {
            out.push_back({z, y, x});
            break;
          }
        }
      }
  return out;
}

// ---- Hausdorff ----------------------------------------------------------------

namespace {

struct Point3 {
  double z, y, x;
};

double sqdist(const Point3& a, const Point3& b) {
  const double dz = a.z - b.z, dy = a.y - b.y, dx = a.x - b.x;
  return dz * dz + dy * dy + dx * dx;
}

// Minimal kd-tree over points; nearest-neighbor queries with box pruning.
class KdTree {
 public:
  explicit KdTree(std::vector<Point3> pts) : pts_(std::move(pts)) {
    index_.resize(pts_.size());
    for (size_t i = 0; i < index_.size(); ++i) index_[i] = i;
    build(0, pts_.size(), 0);
  }

  double nearest_sqdist(const Point3& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(q, 0, pts_.size(), 0, best);
    return best;
  }

 private:
  void build(size_t lo, size_t hi, int axis) {
    if (hi - lo <= 1) return;
    const size_t mid = (lo + hi) / 2;
    auto key = [axis](const Point3& p) { return axis == 0 ? p.z : axis == 1 ? p.y : p.x; };
    std::nth_element(index_.begin() + static_cast<int64_t>(lo),
                     index_.begin() + static_cast<int64_t>(mid),
                     index_.begin() + static_cast<int64_t>(hi),
                     [&](size_t a, size_t b) { return key(pts_[a]) < key(pts_[b]); });
    build(lo, mid, (axis + 1) % 3);
    build(mid + 1, hi, (axis + 1) % 3);
  }

  void search(const Point3& q, size_t lo, size_t hi, int axis, double& best) const {
    if (lo >= hi) return;
    const size_t mid = (lo + hi) / 2;
    const Point3& p = pts_[index_[mid]];
    best = std::min(best, sqdist(q, p));
    const double qk = axis == 0 ? q.z : axis == 1 ? q.y : q.x;
    const double pk = axis == 0 ? p.z : axis == 1 ? p.y : p.x;
    const double plane = qk - pk;
    const int next = (axis + 1) % 3;
    if (plane < 0) {
      search(q, lo, mid, next, best);
      if (plane * plane < best) search(q, mid + 1, hi, next, best);
    } else {
      search(q, mid + 1, hi, next, best);
      if (plane * plane < best) search(q, lo, mid, next, best);
    }
  }

  std::vector<Point3> pts_;
  std::vector<size_t> index_;
};

std::vector<Point3> boundary_points_mm(const Mask& m) {
  std::vector<Point3> pts;
  for (const auto& v : boundary_voxels(m))
    pts.push_back({static_cast<double>(v[0]) * m.spacing[0],
                   static_cast<double>(v[1]) * m.spacing[1],
                   static_cast<double>(v[2]) * m.spacing[2]});
  return pts;
}

double directed_hausdorff(const std::vector<Point3>& from, const KdTree& to) {
  double worst = 0.0;
  for (const auto& p : from) worst = std::max(worst, to.nearest_sqdist(p));
  return std::sqrt(worst);
}

}  // namespace

std::optional<double> hausdorff_mm(const Mask& a, const Mask& b) {
  require_same_dims("hausdorff", a, b);
  if (a.spacing != b.spacing)
    throw ContractViolation("hausdorff: mask spacings differ");
  if (a.empty_mask() || b.empty_mask()) return std::nullopt;

  const auto pa = boundary_points_mm(a);
  const auto pb = boundary_points_mm(b);
  const KdTree ta(pa), tb(pb);
  return std::max(directed_hausdorff(pa, tb), directed_hausdorff(pb, ta));
}

// ---- connected components -------------------------------------------------------

ComponentLabeling label_components(const Mask& m, bool foreground, Connectivity conn) {
  const auto [D, H, W] = m.dims;
  ComponentLabeling out;
  out.dims = m.dims;
  out.labels.assign(m.data.size(), 0);
  out.component_sizes.assign(1, 0);

  std::vector<std::array<int64_t, 3>> offsets;
  if (conn == Connectivity::six) {
    offsets.assign(kSixNeighbors.begin(), kSixNeighbors.end());
  } else {
    for (int64_t dz = -1; dz <= 1; ++dz)
      for (int64_t dy = -1; dy <= 1; ++dy)
        for (int64_t dx = -1; dx <= 1; ++dx)
          if (dz || dy || dx) offsets.push_back({dz, dy, dx});
  }

  auto wanted = [&](int64_t i) {
    return (m.data[static_cast<size_t>(i)] != 0) == foreground;
  };

  std::deque<int64_t> queue;
  int32_t next_label = 0;
  for (int64_t start = 0; start < static_cast<int64_t>(m.data.size()); ++start) {
    if (!wanted(start) || out.labels[static_cast<size_t>(start)] != 0) continue;
    ++next_label;
    int64_t size = 0;
    bool touches_border = false;
    out.labels[static_cast<size_t>(start)] = next_label;
    queue.push_back(start);
    while (!queue.empty()) {
      const int64_t i = queue.front();
      queue.pop_front();
      ++size;
      const int64_t z = i / (H * W), y = (i / W) % H, x = i % W;
      if (z == 0 || z == D - 1 || y == 0 || y == H - 1 || x == 0 || x == W - 1)
        touches_border = true;
      for (const auto& d : offsets) {
        const int64_t nz = z + d[0], ny = y + d[1], nx = x + d[2];
        if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
        const int64_t ni = (nz * H + ny) * W + nx;
        if (!wanted(ni) || out.labels[static_cast<size_t>(ni)] != 0) continue;
        out.labels[static_cast<size_t>(ni)] = next_label;
        queue.push_back(ni);
      }
    }
    out.component_sizes.push_back(size);
    if (!foreground && touches_border) out.border_labels.push_back(next_label);
  }
  return out;
}

Mask remove_islands_fill_holes(const Mask& m, int64_t threshold, Connectivity conn) {
  Mask out = m;

  const ComponentLabeling fg = label_components(m, true, conn);
  for (size_t i = 0; i < out.data.size(); ++i) {
    const int32_t label = fg.labels[i];
    if (label != 0 && fg.component_sizes[static_cast<size_t>(label)] <= threshold)
      out.data[i] = 0;
  }

  const ComponentLabeling bg = label_components(out, false, conn);
  std::vector<char> is_border(bg.component_sizes.size(), 0);
  for (int32_t label : bg.border_labels) is_border[static_cast<size_t>(label)] = 1;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const int32_t label = bg.labels[i];
    if (label != 0 && !is_border[static_cast<size_t>(label)] &&
        bg.component_sizes[static_cast<size_t>(label)] <= threshold)
      out.data[i] = 1;
  }
  return out;
}

int64_t calibrate_removal_threshold(const std::vector<Mask>& cohort, double fraction,
                                    Connectivity conn) {
  if (cohort.empty()) throw ContractViolation("calibrate_removal_threshold: empty cohort");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ContractViolation("calibrate_removal_threshold: fraction must be in (0,1]");

  std::vector<int64_t> sizes;
  for (const Mask& m : cohort) {
    const ComponentLabeling fg = label_components(m, true, conn);
    int64_t largest = 0;
    for (int64_t label = 1; label <= fg.count(); ++label)
      largest = std::max(largest, fg.component_sizes[static_cast<size_t>(label)]);
    for (int64_t label = 1; label <= fg.count(); ++label) {
      const int64_t s = fg.component_sizes[static_cast<size_t>(label)];
      if (s != largest) sizes.push_back(s);
      else largest = -1;  // keep only one exemplar of the largest
    }
    const ComponentLabeling bg = label_components(m, false, conn);
    std::vector<char> is_border(bg.component_sizes.size(), 0);
    for (int32_t label : bg.border_labels) is_border[static_cast<size_t>(label)] = 1;
    for (int64_t label = 1; label <= bg.count(); ++label)
      if (!is_border[static_cast<size_t>(label)])
        sizes.push_back(bg.component_sizes[static_cast<size_t>(label)]);
  }
  if (sizes.empty()) return 0;
  std::sort(sizes.begin(), sizes.end());
  const auto needed = static_cast<size_t>(
      std::ceil(fraction * static_cast<double>(sizes.size()) - 1e-12));
  return sizes[std::min(needed, sizes.size()) - 1];
}

// ---- permutation test -------------------------------------------------------------

double paired_permutation_test(const std::vector<double>& x, const std::vector<double>& y,
                               int64_t iterations, uint64_t seed) {
  if (x.size() != y.size())
    throw ContractViolation("paired_permutation_test: length mismatch");
  if (x.size() < 2) throw ContractViolation("paired_permutation_test: need at least 2 pairs");
  if (iterations < 1) throw ContractViolation("paired_permutation_test: iterations must be >= 1");

  const size_t n = x.size();
  std::vector<double> diff(n);
  for (size_t i = 0; i < n; ++i) diff[i] = x[i] - y[i];
  double t_obs = 0.0;
  for (double d : diff) t_obs += d;
  t_obs = std::fabs(t_obs / static_cast<double>(n));

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(0.5);
  int64_t as_extreme = 0;
  for (int64_t it = 0; it < iterations; ++it) {
    double t = 0.0;
    for (size_t i = 0; i < n; ++i) t += flip(rng) ? -diff[i] : diff[i];
    if (std::fabs(t / static_cast<double>(n)) >= t_obs) ++as_extreme;
  }
  return static_cast<double>(as_extreme + 1) / static_cast<double>(iterations + 1);
}

// ---- cohort evaluation --------------------------------------------------------------

std::vector<MetricReport> evaluate_cohort(const std::vector<Mask>& preds,
                                          const std::vector<Mask>& gts) {
  if (preds.size() != gts.size())
    throw ContractViolation("evaluate_cohort: prediction/ground-truth count mismatch");
  std::vector<MetricReport> out;
  out.reserve(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) {
    MetricReport r;
    r.dice = dice(preds[i], gts[i]);
    if (!gts[i].empty_mask()) {
      r.compactness = compactness(preds[i]);
      r.hausdorff_mm = hausdorff_mm(preds[i], gts[i]);
    }
    out.push_back(r);
  }
  return out;
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& stddev) {
  mean = 0.0;
  stddev = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  stddev = std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

CohortSummary summarize(const std::vector<MetricReport>& reports) {
  CohortSummary s;
  s.items = static_cast<int64_t>(reports.size());
  std::vector<double> dices, compacts, hds;
  for (const auto& r : reports) {
    dices.push_back(r.dice);
    if (r.compactness) compacts.push_back(*r.compactness);
    if (r.hausdorff_mm) hds.push_back(*r.hausdorff_mm);
  }
  mean_std(dices, s.dice_mean, s.dice_std);
  mean_std(compacts, s.compactness_mean, s.compactness_std);
  mean_std(hds, s.hausdorff_mean, s.hausdorff_std);
  s.compactness_n = static_cast<int64_t>(compacts.size());
  s.hausdorff_n = static_cast<int64_t>(hds.size());
  return s;
}

std::string metrics_report_csv(const std::vector<std::string>& ids,
                               const std::vector<MetricReport>& reports,
                               const CohortSummary* summary) {
  if (ids.size() != reports.size())
    throw ContractViolation("metrics_report_csv: id/report count mismatch");
  std::ostringstream os;
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "id,dice,compactness,hausdorff_mm\n";
  for (size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    os << ids[i] << "," << fmt(r.dice) << ",";
    if (r.compactness) os << fmt(*r.compactness);
    os << ",";
    if (r.hausdorff_mm) os << fmt(*r.hausdorff_mm);
    os << "\n";
  }
  if (summary) {
    os << "mean," << fmt(summary->dice_mean) << "," << fmt(summary->compactness_mean) << ","
       << fmt(summary->hausdorff_mean) << "\n";
    os << "std," << fmt(summary->dice_std) << "," << fmt(summary->compactness_std) << ","
       << fmt(summary->hausdorff_std) << "\n";
  }
  return os.str();
}

}  // namespace ratles
