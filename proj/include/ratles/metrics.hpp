#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ratles/volume.hpp"

namespace ratles {

// 2|A∩B| / (|A|+|B|); two empty masks count as a perfect match (1.0).
double dice(const Mask& a, const Mask& b);

// Sum of exposed voxel face areas in mm^2, using the physical spacing.
// Throws on an empty mask.
double surface_area_mm2(const Mask& m);

// surface_area^1.5 / physical volume; absent for an empty mask.
// Lower is smoother; a sphere approaches 6*sqrt(pi).
std::optional<double> compactness(const Mask& m);

// Foreground voxels with at least one six-neighbor outside the mask or the
// volume. Throws on an empty mask. Coordinates are (z,y,x).
std::vector<std::array<int64_t, 3>> boundary_voxels(const Mask& m);

// Symmetric max-min Euclidean distance between boundary voxel centers in mm,
// honoring anisotropic spacing. Absent when either mask is empty.
std::optional<double> hausdorff_mm(const Mask& a, const Mask& b);

enum class Connectivity { six = 6, twenty_six = 26 };

struct ComponentLabeling {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::vector<int32_t> labels;           // 0 = not in the labeled set
  std::vector<int64_t> component_sizes;  // indexed by label; [0] unused
  std::vector<int32_t> border_labels;    // background components touching the border
  int64_t count() const { return static_cast<int64_t>(component_sizes.size()) - 1; }
};

// Flood labeling of the foreground (or background) of a mask.
ComponentLabeling label_components(const Mask& m, bool foreground,
                                   Connectivity conn = Connectivity::six);

// Deletes foreground components of size <= threshold, then fills enclosed
// background components of size <= threshold (relabeled after the deletion,
// so a cavity grown by a removed island is judged at its final size).
Mask remove_islands_fill_holes(const Mask& m, int64_t threshold = 20,
                               Connectivity conn = Connectivity::six);

// Smallest threshold removing at least `fraction` of the islands (non-largest
// foreground components) and enclosed holes across a cohort of masks.
int64_t calibrate_removal_threshold(const std::vector<Mask>& cohort, double fraction = 0.9,
                                    Connectivity conn = Connectivity::six);

// Two-sided p-value for the mean paired difference under random sign flips:
// p = (count(|T_perm| >= |T_obs|) + 1) / (iterations + 1).
double paired_permutation_test(const std::vector<double>& x, const std::vector<double>& y,
                               int64_t iterations = 10000, uint64_t seed = 0);

struct MetricReport {
  double dice = 0.0;
  std::optional<double> compactness;
  std::optional<double> hausdorff_mm;
};

struct CohortSummary {
  int64_t items = 0;
  double dice_mean = 0.0, dice_std = 0.0;
  int64_t compactness_n = 0;
  double compactness_mean = 0.0, compactness_std = 0.0;
  int64_t hausdorff_n = 0;
  double hausdorff_mean = 0.0, hausdorff_std = 0.0;
};

// Per-item reports. Dice is always scored; compactness and Hausdorff are
// skipped for items whose ground truth is empty, and compactness additionally
// needs a non-empty prediction.
std::vector<MetricReport> evaluate_cohort(const std::vector<Mask>& preds,
                                          const std::vector<Mask>& gts);

CohortSummary summarize(const std::vector<MetricReport>& reports);

// CSV id,dice,compactness,hausdorff_mm with empty fields for absent values;
// when a summary is given, mean/std rows are appended.
std::string metrics_report_csv(const std::vector<std::string>& ids,
                               const std::vector<MetricReport>& reports,
                               const CohortSummary* summary);

}  // namespace ratles
