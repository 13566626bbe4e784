#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pseg/volume.hpp"

namespace pseg {

using Bytes = std::vector<std::uint8_t>;

// NIfTI-1 single-file (.nii) subset: uncompressed, little-endian, dtype
// uint8/int16/float32, 3D (or 4D with a singleton 4th dim). Orientation
// (qform/sform) is ignored; only dims and pixdim[1..3] are read.

VoxelGrid read_nifti1(const Bytes& bytes);
/// Writes a float32 payload.
Bytes write_nifti1(const VoxelGrid& grid);

/// Reads any supported dtype and requires non-negative integral values < 256.
LabelMask read_nifti1_mask(const Bytes& bytes);
/// Writes a uint8 payload.
Bytes write_nifti1(const LabelMask& mask);

// Interchange layout used by the CLI and the HTTP server: one line of
// compact JSON metadata terminated by '\n', followed by the raw
// little-endian payload.
//
//   {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"float32",
//    "intensity_kind":"raw"}\n<payload>
//
// dtype is one of uint8, int16, float32, float64. Masks use
// "intensity_kind":"label" with uint8.

enum class PayloadType { uint8, int16, float32, float64 };

Bytes encode_interchange(const VoxelGrid& grid, PayloadType dtype = PayloadType::float64);
Bytes encode_interchange(const LabelMask& mask);
VoxelGrid decode_interchange(const Bytes& bytes);
LabelMask decode_interchange_mask(const Bytes& bytes);

Bytes read_file(const std::string& path);
void write_file(const std::string& path, const Bytes& bytes);

/// Reads a volume from .nii or interchange (.vol) by sniffing the content.
VoxelGrid load_volume(const std::string& path);
LabelMask load_mask(const std::string& path);
/// Writes NIfTI when the path ends in .nii, interchange otherwise.
void save_volume(const std::string& path, const VoxelGrid& grid);
void save_mask(const std::string& path, const LabelMask& mask);

}  // namespace pseg
