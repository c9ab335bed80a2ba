#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ratles/tensor.hpp"

namespace ratles {

// Scalar 3D image. dims are (D,H,W) with W fastest; spacing is (sz,sy,sx) in
// mm per voxel. `orient` carries the raw qform/sform header region of a NIfTI
// file verbatim; it is never interpreted here.
struct Volume {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<double> data;
  std::array<uint8_t, 76> orient{};

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

// Binary label volume with the same geometry conventions.
struct Mask {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<uint8_t> data;  // strictly 0/1
  std::array<uint8_t, 76> orient{};

  int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  int64_t foreground_count() const;
  bool empty_mask() const { return foreground_count() == 0; }
};

// (x - mean)/std over all voxels; a constant volume maps to all zeros.
Volume normalize(const Volume& v);

struct PadRecord {
  std::array<int64_t, 3> lo{0, 0, 0};
  std::array<int64_t, 3> hi{0, 0, 0};
  std::array<int64_t, 3> original{0, 0, 0};
  std::array<int64_t, 3> padded{0, 0, 0};
};

// Padding needed to lift dims to the next multiple of m, split low/high with
// the extra voxel on the high side.
PadRecord make_pad_record(const std::array<int64_t, 3>& dims, int64_t m);

Volume pad(const Volume& v, const PadRecord& rec);
Mask pad(const Mask& m, const PadRecord& rec);

// Zero-pads each spatial dim up to the next multiple of m.
Volume pad_to_multiple(const Volume& v, int64_t m, PadRecord& rec);

// Exact inverse of the pad on the mask path.
Mask crop(const Mask& m, const PadRecord& rec);

// Rank-5 (1,1,D,H,W) tensors for the network.
Tensor to_tensor(const Volume& v);
Tensor to_tensor(const Mask& m);

}  // namespace ratles
