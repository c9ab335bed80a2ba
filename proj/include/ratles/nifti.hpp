#pragma once

#include <string>
#include <variant>

#include "ratles/volume.hpp"

namespace ratles {

// Single-file NIfTI-1 (.nii) subset: magic "n+1", dim[0] == 3, datatypes
// uint8 / int16 / float32 / float64, either endianness, scl_slope/scl_inter
// applied when the slope is nonzero. A file whose values are all 0 or 1
// loads as a Mask.
std::variant<Volume, Mask> read_nifti(const std::string& path);

// Convenience wrappers that enforce the expected kind.
Volume read_nifti_volume(const std::string& path);
Mask read_nifti_mask(const std::string& path);

// Volumes are written as little-endian float64, masks as uint8, with
// slope 1 / inter 0. Identical inputs produce byte-identical files.
void write_nifti(const Volume& v, const std::string& path);
void write_nifti(const Mask& m, const std::string& path);

}  // namespace ratles
