#include "ratles/volume.hpp"

#include <cmath>

#include "ratles/error.hpp"

namespace ratles {

int64_t Mask::foreground_count() const {
  int64_t n = 0;
  for (uint8_t v : data) n += v;
  return n;
}

Volume normalize(const Volume& v) {
  if (v.voxels() < 2) throw ContractViolation("normalize: volume must have more than one voxel");
  const double n = static_cast<double>(v.data.size());
  double mean = 0.0;
  for (double x : v.data) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v.data) {
    const double d = x - mean;
    var += d * d;
  }
  var /= n;
  const double stddev = std::sqrt(var);

  Volume out = v;
  if (stddev < 1e-300) {
    for (double& x : out.data) x = 0.0;
    return out;
  }
  for (double& x : out.data) x = (x - mean) / stddev;
  return out;
}

PadRecord make_pad_record(const std::array<int64_t, 3>& dims, int64_t m) {
  if (m < 1) throw ContractViolation("pad_to_multiple: multiple must be >= 1");
  PadRecord rec;
  rec.original = dims;
  for (int a = 0; a < 3; ++a) {
    const int64_t total = (m - dims[static_cast<size_t>(a)] % m) % m;
    rec.lo[static_cast<size_t>(a)] = total / 2;
    rec.hi[static_cast<size_t>(a)] = total - total / 2;
    rec.padded[static_cast<size_t>(a)] = dims[static_cast<size_t>(a)] + total;
  }
  return rec;
}

namespace {

template <typename T>
std::vector<T> pad_data(const std::vector<T>& src, const std::array<int64_t, 3>& dims,
                        const PadRecord& rec) {
  const auto [D, H, W] = dims;
  const auto [PD, PH, PW] = rec.padded;
  std::vector<T> dst(static_cast<size_t>(PD * PH * PW), T{0});
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y) {
      const T* s = src.data() + (z * H + y) * W;
      T* d = dst.data() + ((z + rec.lo[0]) * PH + y + rec.lo[1]) * PW + rec.lo[2];
      std::copy(s, s + W, d);
    }
  return dst;
}

}  // namespace

Volume pad(const Volume& v, const PadRecord& rec) {
  if (v.dims != rec.original) throw ContractViolation("pad: record does not match volume dims");
  Volume out;
  out.dims = rec.padded;
  out.spacing = v.spacing;
  out.orient = v.orient;
  out.data = pad_data(v.data, v.dims, rec);
  return out;
}

Mask pad(const Mask& m, const PadRecord& rec) {
  if (m.dims != rec.original) throw ContractViolation("pad: record does not match mask dims");
  Mask out;
  out.dims = rec.padded;
  out.spacing = m.spacing;
  out.orient = m.orient;
  out.data = pad_data(m.data, m.dims, rec);
  return out;
}

Volume pad_to_multiple(const Volume& v, int64_t m, PadRecord& rec) {
  rec = make_pad_record(v.dims, m);
  return pad(v, rec);
}

Mask crop(const Mask& m, const PadRecord& rec) {
  if (m.dims != rec.padded) throw ContractViolation("crop: record does not match mask dims");
  Mask out;
  out.dims = rec.original;
  out.spacing = m.spacing;
  out.orient = m.orient;
  const auto [D, H, W] = rec.original;
  const int64_t PH = rec.padded[1], PW = rec.padded[2];
  out.data.resize(static_cast<size_t>(D * H * W));
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y) {
      const uint8_t* s =
          m.data.data() + ((z + rec.lo[0]) * PH + y + rec.lo[1]) * PW + rec.lo[2];
      std::copy(s, s + W, out.data.data() + (z * H + y) * W);
    }
  return out;
}

Tensor to_tensor(const Volume& v) {
  return Tensor({1, 1, v.dims[0], v.dims[1], v.dims[2]}, v.data);
}

Tensor to_tensor(const Mask& m) {
  std::vector<double> d(m.data.begin(), m.data.end());
  return Tensor({1, 1, m.dims[0], m.dims[1], m.dims[2]}, std::move(d));
}

}  // namespace ratles
