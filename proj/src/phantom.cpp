#include "ratles/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "ratles/error.hpp"

namespace ratles {

namespace {

struct Ellipsoid {
  std::array<double, 3> center;  // (z,y,x) voxel coordinates
  std::array<double, 3> semi;

  bool contains(int64_t z, int64_t y, int64_t x) const {
    const double dz = (static_cast<double>(z) - center[0]) / semi[0];
    const double dy = (static_cast<double>(y) - center[1]) / semi[1];
    const double dx = (static_cast<double>(x) - center[2]) / semi[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

uint64_t splitmix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::pair<Volume, Mask> generate_phantom(const PhantomSpec& spec) {
  const auto [D, H, W] = spec.dims;
  if (D < 4 || H < 4 || W < 4) throw ContractViolation("phantom: dims must be at least 4");
  if (spec.lesion_blobs < 0) throw ContractViolation("phantom: lesion_blobs must be >= 0");
  if (spec.noise_sigma < 0) throw ContractViolation("phantom: noise_sigma must be >= 0");

  Volume vol;
  vol.dims = spec.dims;
  vol.spacing = spec.spacing;
  vol.data.assign(static_cast<size_t>(vol.voxels()), 0.0);
  Mask mask;
  mask.dims = spec.dims;
  mask.spacing = spec.spacing;
  mask.data.assign(static_cast<size_t>(vol.voxels()), 0);

  const Ellipsoid brain{
      {(static_cast<double>(D) - 1) / 2.0, (static_cast<double>(H) - 1) / 2.0,
       (static_cast<double>(W) - 1) / 2.0},
      {0.42 * static_cast<double>(D), 0.42 * static_cast<double>(H),
       0.42 * static_cast<double>(W)}};

  std::mt19937_64 rng(spec.seed);
  std::vector<Ellipsoid> blobs;
  for (int64_t b = 0; b < spec.lesion_blobs; ++b) {
    // Centers inside the lesion hemisphere (x above the midline), away from
    // the brain border so most of the blob survives clipping.
    std::uniform_real_distribution<double> uz(brain.center[0] - 0.22 * D,
                                              brain.center[0] + 0.22 * D);
    std::uniform_real_distribution<double> uy(brain.center[1] - 0.22 * H,
                                              brain.center[1] + 0.22 * H);
    std::uniform_real_distribution<double> ux(brain.center[2] + 0.06 * W,
                                              brain.center[2] + 0.30 * W);
    Ellipsoid e;
    e.center = {uz(rng), uy(rng), ux(rng)};
    std::uniform_real_distribution<double> sz(0.10 * D, 0.22 * D);
    std::uniform_real_distribution<double> sy(0.10 * H, 0.22 * H);
    std::uniform_real_distribution<double> sx(0.10 * W, 0.22 * W);
    e.semi = {sz(rng), sy(rng), sx(rng)};
    blobs.push_back(e);
  }

  // Lateral hemisphere boundary: x strictly right of the midline.
  const int64_t hemi_x = (W + 1) / 2;
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const size_t i = static_cast<size_t>((z * H + y) * W + x);
        if (!brain.contains(z, y, x)) continue;
        vol.data[i] = 1.0;
        if (x < hemi_x) continue;
        for (const auto& blob : blobs) {
          if (blob.contains(z, y, x)) {
            vol.data[i] = 1.0 + spec.lesion_intensity_gain;
            mask.data[i] = 1;
            break;
          }
        }
      }

  if (spec.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (double& v : vol.data) v += noise(rng);
  }
  return {std::move(vol), std::move(mask)};
}

std::vector<CohortItem> generate_cohort(int64_t n, const PhantomSpec& tmpl, uint64_t seed,
                                        double sham_fraction) {
  if (n < 1) throw ContractViolation("generate_cohort: n must be >= 1");
  if (sham_fraction < 0.0 || sham_fraction > 1.0)
    throw ContractViolation("generate_cohort: sham fraction must be in [0,1]");

  std::vector<CohortItem> items;
  items.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    CohortItem item;
    char id[24];
    std::snprintf(id, sizeof id, "%04lld", static_cast<long long>(i + 1));
    item.id = id;
    item.seed = splitmix64(seed + static_cast<uint64_t>(i));
    // Evenly spread the sham items across the cohort.
    item.sham = std::floor(static_cast<double>(i + 1) * sham_fraction) >
                std::floor(static_cast<double>(i) * sham_fraction);
    PhantomSpec spec = tmpl;
    spec.seed = item.seed;
    if (item.sham) spec.lesion_blobs = 0;
    auto [vol, mask] = generate_phantom(spec);
    item.lesion_voxels = mask.foreground_count();
    item.image = std::move(vol);
    item.label = std::move(mask);
    items.push_back(std::move(item));
  }
  return items;
}

std::string cohort_manifest_csv(const std::vector<CohortItem>& items) {
  std::ostringstream os;
  os << "id,seed,sham_flag,lesion_voxels\n";
  for (const auto& item : items)
    os << item.id << "," << item.seed << "," << (item.sham ? 1 : 0) << ","
       << item.lesion_voxels << "\n";
  return os.str();
}

}  // namespace ratles
