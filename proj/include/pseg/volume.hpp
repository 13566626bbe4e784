#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pseg/error.hpp"

namespace pseg {

struct Dims {
    int nx = 0;
    int ny = 0;
    int nz = 0;

    std::size_t voxels() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
               static_cast<std::size_t>(nz);
    }
    std::size_t slice_voxels() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);
    }
    bool operator==(const Dims&) const = default;
};

/// Physical voxel size in millimetres. For video clips `sz` is the frame period.
struct Spacing {
    double sx = 1.0;
    double sy = 1.0;
    double sz = 1.0;

    bool operator==(const Spacing&) const = default;
};

enum class IntensityKind { raw, normalized_0_255 };

const char* to_string(IntensityKind kind) noexcept;
IntensityKind intensity_kind_from_string(const std::string& name);

/// Dense scalar volume, x-fastest. Also used for video clips (z = time).
class VoxelGrid {
public:
    VoxelGrid() = default;
    VoxelGrid(Dims dims, Spacing spacing, IntensityKind kind = IntensityKind::raw);
    VoxelGrid(Dims dims, Spacing spacing, std::vector<double> values,
              IntensityKind kind = IntensityKind::raw);

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    IntensityKind kind() const { return kind_; }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }

    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * dims_.ny + y) * dims_.nx + x;
    }
    double at(int x, int y, int z) const { return values_[index(x, y, z)]; }
    double& at(int x, int y, int z) { return values_[index(x, y, z)]; }

    /// Throws if any invariant is violated (dims, spacing, normalized range).
    void validate() const;

private:
    Dims dims_;
    Spacing spacing_;
    std::vector<double> values_;
    IntensityKind kind_ = IntensityKind::raw;
};

/// Small-integer label volume congruent to a VoxelGrid. 0 is background.
class LabelMask {
public:
    LabelMask() = default;
    LabelMask(Dims dims, Spacing spacing);
    LabelMask(Dims dims, Spacing spacing, std::vector<std::uint8_t> labels);

    static LabelMask like(const VoxelGrid& grid) { return {grid.dims(), grid.spacing()}; }

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }

    std::span<const std::uint8_t> labels() const { return labels_; }
    std::span<std::uint8_t> labels() { return labels_; }

    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * dims_.ny + y) * dims_.nx + x;
    }
    std::uint8_t at(int x, int y, int z) const { return labels_[index(x, y, z)]; }
    std::uint8_t& at(int x, int y, int z) { return labels_[index(x, y, z)]; }

    /// Labels present, excluding background.
    std::set<int> object_ids() const;
    std::size_t count(int label) const;
    std::size_t foreground_count() const;

    /// label == k as a 0/1 mask.
    LabelMask binary(int label) const;

    bool congruent_with(const VoxelGrid& grid) const {
        return dims_ == grid.dims() && spacing_ == grid.spacing();
    }
    bool operator==(const LabelMask&) const = default;

private:
    Dims dims_;
    Spacing spacing_;
    std::vector<std::uint8_t> labels_;
};

/// 2D slice image, x-fastest.
struct Image2D {
    int nx = 0;
    int ny = 0;
    std::vector<double> values;

    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * nx + x]; }
};

struct Mask2D {
    int nx = 0;
    int ny = 0;
    std::vector<std::uint8_t> labels;

    Mask2D() = default;
    Mask2D(int w, int h) : nx(w), ny(h), labels(static_cast<std::size_t>(w) * h, 0) {}

    std::uint8_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * nx + x]; }
    std::uint8_t& at(int x, int y) { return labels[static_cast<std::size_t>(y) * nx + x]; }
    std::size_t foreground_count() const;
    bool operator==(const Mask2D&) const = default;
};

/// Half-open box on one slice: [x_min, x_max) x [y_min, y_max).
struct BoundingBox2D {
    int slice_index = 0;
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;

    void validate(const Dims& dims) const;
    bool operator==(const BoundingBox2D&) const = default;
};

struct BoundingBox3D {
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;
    int z_min = 0;
    int z_max = 0;

    void validate(const Dims& dims) const;
    /// The in-plane extent placed on slice `z`.
    BoundingBox2D on_slice(int z) const { return {z, x_min, y_min, x_max, y_max}; }
    bool operator==(const BoundingBox3D&) const = default;
};

/// Inclusive slice range, top <= bottom in array order.
struct SliceRange {
    int top = 0;
    int bottom = 0;

    void validate(int nz) const;
    bool contains(int z) const { return z >= top && z <= bottom; }
    int size() const { return bottom - top + 1; }
    bool operator==(const SliceRange&) const = default;
};

/// Default prompt slice: floor(nz / 2).
int middle_slice_index(const Dims& dims);
inline int middle_slice_index(const VoxelGrid& grid) { return middle_slice_index(grid.dims()); }

Image2D extract_slice(const VoxelGrid& grid, int z);
Mask2D extract_slice(const LabelMask& mask, int z);
void insert_slice(LabelMask& mask, int z, const Mask2D& slice);

/// Tight box around the nonzero pixels of `slice`; throws on empty.
BoundingBox2D tight_box(const Mask2D& slice, int slice_index);
/// Tight 3D box around label != 0; throws on empty.
BoundingBox3D tight_box(const LabelMask& mask);
/// Slices holding at least one foreground voxel; throws on empty.
SliceRange z_extent(const LabelMask& mask);

}  // namespace pseg
