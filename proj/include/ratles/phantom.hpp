#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ratles/volume.hpp"

namespace ratles {

// Synthetic scan: an ellipsoidal "brain" of intensity 1 on background 0,
// hyperintense lesion blobs (1 + gain) confined to one lateral hemisphere,
// plus seeded Gaussian noise. The mask is the exact pre-noise lesion region.
struct PhantomSpec {
  std::array<int64_t, 3> dims{16, 32, 32};           // (D,H,W)
  std::array<double, 3> spacing{1.0, 0.117, 0.117};  // (sz,sy,sx) mm
  int64_t lesion_blobs = 3;
  double lesion_intensity_gain = 0.5;
  double noise_sigma = 0.05;
  uint64_t seed = 0;
};

std::pair<Volume, Mask> generate_phantom(const PhantomSpec& spec);

struct CohortItem {
  std::string id;
  uint64_t seed = 0;
  bool sham = false;
  int64_t lesion_voxels = 0;
  Volume image;
  Mask label;
};

// n phantoms with per-item derived seeds; `sham_fraction` of them (spread
// evenly) carry no lesion.
std::vector<CohortItem> generate_cohort(int64_t n, const PhantomSpec& tmpl, uint64_t seed,
                                        double sham_fraction = 0.0);

// CSV: id,seed,sham_flag,lesion_voxels
std::string cohort_manifest_csv(const std::vector<CohortItem>& items);

}  // namespace ratles
