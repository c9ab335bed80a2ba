#include "ratles/nifti.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "ratles/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "NIfTI writer assumes a little-endian host");

namespace ratles {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  int32_t sizeof_hdr;     // 0: must be 348
  char data_type[10];     // 4
  char db_name[18];       // 14
  int32_t extents;        // 32
  int16_t session_error;  // 36
  char regular;           // 38
  char dim_info;          // 39
  int16_t dim[8];         // 40
  float intent_p1;        // 56
  float intent_p2;        // 60
  float intent_p3;        // 64
  int16_t intent_code;    // 68
  int16_t datatype;       // 70
  int16_t bitpix;         // 72
  int16_t slice_start;    // 74
  float pixdim[8];        // 76
  float vox_offset;       // 108
  float scl_slope;        // 112
  float scl_inter;        // 116
  int16_t slice_end;      // 120
  char slice_code;        // 122
  char xyzt_units;        // 123
  float cal_max;          // 124
  float cal_min;          // 128
  float slice_duration;   // 132
  float toffset;          // 136
  int32_t glmax;          // 140
  int32_t glmin;          // 144
  char descrip[80];       // 148
  char aux_file[24];      // 228
  int16_t qform_code;     // 252
  int16_t sform_code;     // 254
  float quatern_b;        // 256
  float quatern_c;        // 260
  float quatern_d;        // 264
  float qoffset_x;        // 268
  float qoffset_y;        // 272
  float qoffset_z;        // 276
  float srow_x[4];        // 280
  float srow_y[4];        // 296
  float srow_z[4];        // 312
  char intent_name[16];   // 328
  char magic[4];          // 344
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;
constexpr int16_t kDtFloat64 = 64;
constexpr size_t kOrientOffset = 252;  // qform_code .. intent_name

template <typename T>
T byteswap_value(T v) {
  auto bytes = std::bit_cast<std::array<uint8_t, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

void swap_header(Nifti1Header& h) {
  h.sizeof_hdr = byteswap_value(h.sizeof_hdr);
  h.extents = byteswap_value(h.extents);
  h.session_error = byteswap_value(h.session_error);
  for (auto& d : h.dim) d = byteswap_value(d);
  h.intent_p1 = byteswap_value(h.intent_p1);
  h.intent_p2 = byteswap_value(h.intent_p2);
  h.intent_p3 = byteswap_value(h.intent_p3);
  h.intent_code = byteswap_value(h.intent_code);
  h.datatype = byteswap_value(h.datatype);
  h.bitpix = byteswap_value(h.bitpix);
  h.slice_start = byteswap_value(h.slice_start);
  for (auto& p : h.pixdim) p = byteswap_value(p);
  h.vox_offset = byteswap_value(h.vox_offset);
  h.scl_slope = byteswap_value(h.scl_slope);
  h.scl_inter = byteswap_value(h.scl_inter);
  h.slice_end = byteswap_value(h.slice_end);
  h.cal_max = byteswap_value(h.cal_max);
  h.cal_min = byteswap_value(h.cal_min);
  h.slice_duration = byteswap_value(h.slice_duration);
  h.toffset = byteswap_value(h.toffset);
  h.glmax = byteswap_value(h.glmax);
  h.glmin = byteswap_value(h.glmin);
  h.qform_code = byteswap_value(h.qform_code);
  h.sform_code = byteswap_value(h.sform_code);
  // quaternion/srow floats live in the verbatim orient block; swapping them
  // here is unnecessary since they are never interpreted.
}

template <typename T>
std::vector<double> read_typed(std::ifstream& f, int64_t count, bool swapped) {
  std::vector<T> raw(static_cast<size_t>(count));
  f.read(reinterpret_cast<char*>(raw.data()),
         static_cast<std::streamsize>(raw.size() * sizeof(T)));
  if (!f) throw DataError("nifti: truncated voxel data");
  std::vector<double> out(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    T v = raw[i];
    if (swapped) v = byteswap_value(v);
    out[i] = static_cast<double>(v);
  }
  return out;
}

}  // namespace

std::variant<Volume, Mask> read_nifti(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("nifti: cannot open '" + path + "'");

  Nifti1Header h{};
  f.read(reinterpret_cast<char*>(&h), sizeof h);
  if (!f) throw DataError("nifti: file shorter than a NIfTI-1 header: '" + path + "'");

  // Raw orient block before any byte swapping; it is carried verbatim.
  std::array<uint8_t, 76> orient{};
  std::memcpy(orient.data(), reinterpret_cast<const char*>(&h) + kOrientOffset, orient.size());

  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    if (byteswap_value(h.sizeof_hdr) == 348) {
      swapped = true;
      swap_header(h);
    } else {
      throw DataError("nifti: '" + path + "' is not a NIfTI-1 file (sizeof_hdr " +
                      std::to_string(h.sizeof_hdr) + ")");
    }
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0)
    throw DataError("nifti: bad magic in '" + path + "' (only single-file n+1 is supported)");
  if (h.dim[0] != 3)
    throw DataError("nifti: '" + path + "' has dim[0] = " + std::to_string(h.dim[0]) +
                    ", expected 3");
  for (int a = 1; a <= 3; ++a)
    if (h.dim[a] < 1) throw DataError("nifti: non-positive dim in '" + path + "'");

  const int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
  const int64_t count = nx * ny * nz;

  const auto offset = static_cast<std::streamoff>(h.vox_offset);
  if (offset < static_cast<std::streamoff>(sizeof h))
    throw DataError("nifti: bad vox_offset in '" + path + "'");
  f.seekg(offset);

  std::vector<double> values;
  switch (h.datatype) {
    case kDtUint8:
      values = read_typed<uint8_t>(f, count, false);
      break;
    case kDtInt16:
      values = read_typed<int16_t>(f, count, swapped);
      break;
    case kDtFloat32:
      values = read_typed<float>(f, count, swapped);
      break;
    case kDtFloat64:
      values = read_typed<double>(f, count, swapped);
      break;
    default:
      throw DataError("nifti: unsupported datatype " + std::to_string(h.datatype) + " in '" +
                      path + "'");
  }

  if (h.scl_slope != 0.0f) {
    const double slope = h.scl_slope, inter = h.scl_inter;
    if (slope != 1.0 || inter != 0.0)
      for (double& v : values) v = v * slope + inter;
  }

  // (D,H,W) = (z,y,x); NIfTI stores x fastest, matching our W-fastest layout.
  const std::array<int64_t, 3> dims{nz, ny, nx};
  const std::array<double, 3> spacing{h.pixdim[3], h.pixdim[2], h.pixdim[1]};

  bool binary = true;
  for (double v : values) {
    if (v != 0.0 && v != 1.0) {
      binary = false;
      break;
    }
  }
  if (binary) {
    Mask m;
    m.dims = dims;
    m.spacing = spacing;
    m.orient = orient;
    m.data.resize(values.size());
    for (size_t i = 0; i < values.size(); ++i) m.data[i] = values[i] != 0.0 ? 1 : 0;
    return m;
  }
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.orient = orient;
  v.data = std::move(values);
  return v;
}

Volume read_nifti_volume(const std::string& path) {
  auto img = read_nifti(path);
  if (auto* v = std::get_if<Volume>(&img)) return std::move(*v);
  // A binary-valued image still works as a plain volume.
  const Mask& m = std::get<Mask>(img);
  Volume v;
  v.dims = m.dims;
  v.spacing = m.spacing;
  v.orient = m.orient;
  v.data.assign(m.data.begin(), m.data.end());
  return v;
}

Mask read_nifti_mask(const std::string& path) {
  auto img = read_nifti(path);
  if (auto* m = std::get_if<Mask>(&img)) return std::move(*m);
  throw DataError("nifti: '" + path + "' is not a binary mask");
}

namespace {

Nifti1Header make_header(const std::array<int64_t, 3>& dims,
                         const std::array<double, 3>& spacing,
                         const std::array<uint8_t, 76>& orient, int16_t datatype,
                         int16_t bitpix) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<int16_t>(dims[2]);  // x = W
  h.dim[2] = static_cast<int16_t>(dims[1]);  // y = H
  h.dim[3] = static_cast<int16_t>(dims[0]);  // z = D
  for (int a = 4; a < 8; ++a) h.dim[a] = 1;
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = static_cast<float>(spacing[2]);
  h.pixdim[2] = static_cast<float>(spacing[1]);
  h.pixdim[3] = static_cast<float>(spacing[0]);
  for (int a = 4; a < 8; ++a) h.pixdim[a] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // millimetres
  std::memcpy(reinterpret_cast<char*>(&h) + kOrientOffset, orient.data(), orient.size());
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

void write_file(const std::string& path, const Nifti1Header& h, const void* data,
                size_t bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("nifti: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(&h), sizeof h);
  const char pad[4] = {};  // extension flag: none
  f.write(pad, sizeof pad);
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw DataError("nifti: write to '" + path + "' failed");
}

}  // namespace

void write_nifti(const Volume& v, const std::string& path) {
  if (v.voxels() != static_cast<int64_t>(v.data.size()))
    throw ContractViolation("nifti: volume dims do not match its data size");
  const Nifti1Header h = make_header(v.dims, v.spacing, v.orient, kDtFloat64, 64);
  write_file(path, h, v.data.data(), v.data.size() * sizeof(double));
}

void write_nifti(const Mask& m, const std::string& path) {
  if (m.voxels() != static_cast<int64_t>(m.data.size()))
    throw ContractViolation("nifti: mask dims do not match its data size");
  for (uint8_t b : m.data)
    if (b > 1) throw ContractViolation("nifti: mask values must be 0 or 1");
  const Nifti1Header h = make_header(m.dims, m.spacing, m.orient, kDtUint8, 8);
  write_file(path, h, m.data.data(), m.data.size());
}

}  // namespace ratles
