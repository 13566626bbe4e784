#pragma once

#include <string>
#include <utility>

#include "pseg/volume.hpp"

namespace pseg {

/// CT display window in Hounsfield units.
struct WindowPreset {
    std::string name;
    double width = 0.0;
    double level = 0.0;

    static WindowPreset brain() { return {"brain", 80.0, 40.0}; }
    static WindowPreset abdomen() { return {"abdomen", 400.0, 40.0}; }
    static WindowPreset bone() { return {"bone", 1800.0, 400.0}; }
    static WindowPreset lung() { return {"lung", 1500.0, -600.0}; }
    static WindowPreset mediastinum() { return {"mediastinum", 400.0, 40.0}; }
    static WindowPreset custom(double width, double level);

    /// One of brain, abdomen, bone, lung, mediastinum; throws otherwise.
    static WindowPreset named(const std::string& name);
};

/// Clamp to [level - width/2, level + width/2] and map linearly onto [0, 255].
VoxelGrid window_ct(const VoxelGrid& grid, const WindowPreset& preset);

struct PercentileBounds {
    double lo = 0.0;
    double hi = 0.0;
};

/// Linear-interpolation ("type 7") percentile of already sorted values, q in [0, 100].
double percentile_sorted(const std::vector<double>& sorted, double q);

/// 0.5 / 99.5 percentiles of the foreground (value > 0).
PercentileBounds foreground_bounds(const VoxelGrid& grid);

/// Clamp to the foreground 0.5-99.5 percentile band, rescale to [0, 255].
/// A degenerate band (hi == lo) yields a constant-zero volume.
VoxelGrid percentile_normalize(const VoxelGrid& grid);

enum class ResampleKind { image, mask };

/// Cubic B-spline (with prefilter, mirror boundary) resampling. Target voxel i
/// samples the source at i * target_spacing / source_spacing on each axis.
VoxelGrid resample(const VoxelGrid& grid, Dims target_dims, Spacing target_spacing);
/// Nearest-neighbour resampling; exact .5 ties go to the lower index.
LabelMask resample(const LabelMask& mask, Dims target_dims, Spacing target_spacing);

/// Extent-preserving voxel count for a new spacing along one axis (at least 1).
int resampled_count(int n, double spacing, double target_spacing);

/// Resample an image/mask pair along z to 3 mm when the slice spacing is
/// strictly below 3 mm; otherwise return both unchanged.
std::pair<VoxelGrid, LabelMask> enforce_axial_spacing(const VoxelGrid& grid, const LabelMask& mask,
                                                      double min_spacing_mm = 3.0);

namespace bspline {

/// In-place cubic B-spline prefilter of a 1D signal with mirror boundaries.
void prefilter(std::vector<double>& line);
/// Evaluate a cubic B-spline with coefficients `coeffs` at position x (mirror boundary).
double evaluate(const std::vector<double>& coeffs, double x);

}  // namespace bspline

}  // namespace pseg
