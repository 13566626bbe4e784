#include "pseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pseg {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::format: return "format";
        case ErrorKind::unsupported: return "unsupported";
        case ErrorKind::compressed: return "compressed";
        case ErrorKind::truncated: return "truncated";
        case ErrorKind::shape: return "shape";
        case ErrorKind::range: return "range";
        case ErrorKind::state: return "state";
        case ErrorKind::usage: return "usage";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

const char* to_string(IntensityKind kind) noexcept {
    return kind == IntensityKind::raw ? "raw" : "normalized_0_255";
}

IntensityKind intensity_kind_from_string(const std::string& name) {
    if (name == "raw") return IntensityKind::raw;
    if (name == "normalized_0_255") return IntensityKind::normalized_0_255;
    fail(ErrorKind::format, "unknown intensity_kind '" + name + "'");
}

namespace {

void check_geometry(const Dims& dims, const Spacing& spacing) {
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) {
        std::ostringstream os;
        os << "dims must be positive, got (" << dims.nx << "," << dims.ny << "," << dims.nz << ")";
        fail(ErrorKind::shape, os.str());
    }
    for (double s : {spacing.sx, spacing.sy, spacing.sz}) {
        if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorKind::range, "spacing must be positive and finite");
    }
}

}  // namespace

VoxelGrid::VoxelGrid(Dims dims, Spacing spacing, IntensityKind kind)
    : dims_(dims), spacing_(spacing), kind_(kind) {
    check_geometry(dims_, spacing_);
    values_.assign(dims_.voxels(), 0.0);
}

VoxelGrid::VoxelGrid(Dims dims, Spacing spacing, std::vector<double> values, IntensityKind kind)
    : dims_(dims), spacing_(spacing), values_(std::move(values)), kind_(kind) {
    check_geometry(dims_, spacing_);
    if (values_.size() != dims_.voxels()) {
        fail(ErrorKind::shape, "intensity count " + std::to_string(values_.size()) +
                                   " != nx*ny*nz " + std::to_string(dims_.voxels()));
    }
}

void VoxelGrid::validate() const {
    check_geometry(dims_, spacing_);
    if (values_.size() != dims_.voxels()) fail(ErrorKind::shape, "intensity count does not match dims");
    if (kind_ == IntensityKind::normalized_0_255) {
        for (double v : values_) {
            if (!(v >= 0.0 && v <= 255.0)) fail(ErrorKind::range, "normalized volume has value outside [0,255]");
        }
    }
}

LabelMask::LabelMask(Dims dims, Spacing spacing) : dims_(dims), spacing_(spacing) {
    check_geometry(dims_, spacing_);
    labels_.assign(dims_.voxels(), 0);
}

LabelMask::LabelMask(Dims dims, Spacing spacing, std::vector<std::uint8_t> labels)
    : dims_(dims), spacing_(spacing), labels_(std::move(labels)) {
    check_geometry(dims_, spacing_);
    if (labels_.size() != dims_.voxels()) fail(ErrorKind::shape, "label count does not match dims");
}

std::set<int> LabelMask::object_ids() const {
    std::array<bool, 256> seen{};
    for (auto v : labels_) seen[v] = true;
    std::set<int> ids;
    for (int k = 1; k < 256; ++k) {
        if (seen[k]) ids.insert(k);
    }
    return ids;
}

std::size_t LabelMask::count(int label) const {
    return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), static_cast<std::uint8_t>(label)));
}

std::size_t LabelMask::foreground_count() const {
    return labels_.size() - count(0);
}

LabelMask LabelMask::binary(int label) const {
    LabelMask out(dims_, spacing_);
    for (std::size_t i = 0; i < labels_.size(); ++i) out.labels_[i] = labels_[i] == label ? 1 : 0;
    return out;
}

std::size_t Mask2D::foreground_count() const {
    return labels.size() - static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 0));
}

void BoundingBox2D::validate(const Dims& dims) const {
    std::ostringstream os;
    if (slice_index < 0 || slice_index >= dims.nz) {
        os << "box slice " << slice_index << " outside [0," << dims.nz << ")";
        fail(ErrorKind::range, os.str());
    }
    if (!(x_min < x_max) || !(y_min < y_max)) {
        os << "box corners out of order: (" << x_min << "," << y_min << ")-(" << x_max << "," << y_max << ")";
        fail(ErrorKind::range, os.str());
    }
    if (x_min < 0 || y_min < 0 || x_max > dims.nx || y_max > dims.ny) {
        os << "box (" << x_min << "," << y_min << ")-(" << x_max << "," << y_max << ") outside "
           << dims.nx << "x" << dims.ny;
        fail(ErrorKind::range, os.str());
    }
}

void BoundingBox3D::validate(const Dims& dims) const {
    if (!(z_min < z_max) || z_min < 0 || z_max > dims.nz) fail(ErrorKind::range, "3D box z extent invalid");
    on_slice(z_min).validate(dims);
}

void SliceRange::validate(int nz) const {
    if (!(0 <= top && top <= bottom && bottom < nz)) {
        std::ostringstream os;
        os << "slice range " << top << ":" << bottom << " invalid for nz=" << nz;
        fail(ErrorKind::range, os.str());
    }
}

int middle_slice_index(const Dims& dims) {
    if (dims.nz < 1) fail(ErrorKind::shape, "middle slice of an empty volume");
    return dims.nz / 2;
}

namespace {

void check_z(int z, int nz) {
    if (z < 0 || z >= nz) {
        fail(ErrorKind::range, "slice " + std::to_string(z) + " outside [0," + std::to_string(nz) + ")");
    }
}

}  // namespace

Image2D extract_slice(const VoxelGrid& grid, int z) {
    check_z(z, grid.dims().nz);
    const auto n = grid.dims().slice_voxels();
    auto first = grid.values().begin() + static_cast<std::ptrdiff_t>(n * z);
    return {grid.dims().nx, grid.dims().ny, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n))};
}

Mask2D extract_slice(const LabelMask& mask, int z) {
    check_z(z, mask.dims().nz);
    const auto n = mask.dims().slice_voxels();
    Mask2D out(mask.dims().nx, mask.dims().ny);
    std::copy_n(mask.labels().begin() + static_cast<std::ptrdiff_t>(n * z), n, out.labels.begin());
    return out;
}

void insert_slice(LabelMask& mask, int z, const Mask2D& slice) {
    check_z(z, mask.dims().nz);
    if (slice.nx != mask.dims().nx || slice.ny != mask.dims().ny) {
        fail(ErrorKind::shape, "slice mask size does not match volume in-plane size");
    }
    const auto n = mask.dims().slice_voxels();
    std::copy(slice.labels.begin(), slice.labels.end(), mask.labels().begin() + static_cast<std::ptrdiff_t>(n * z));
}

BoundingBox2D tight_box(const Mask2D& slice, int slice_index) {
    int x0 = slice.nx, y0 = slice.ny, x1 = -1, y1 = -1;
    for (int y = 0; y < slice.ny; ++y) {
        for (int x = 0; x < slice.nx; ++x) {
            if (slice.at(x, y) == 0) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
        }
    }
    if (x1 < 0) fail(ErrorKind::usage, "tight box of an empty slice mask");
    return {slice_index, x0, y0, x1 + 1, y1 + 1};
}

BoundingBox3D tight_box(const LabelMask& mask) {
    const auto& d = mask.dims();
    BoundingBox3D box{d.nx, d.ny, -1, -1, d.nz, -1};
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                if (mask.at(x, y, z) == 0) continue;
                box.x_min = std::min(box.x_min, x);
                box.y_min = std::min(box.y_min, y);
                box.z_min = std::min(box.z_min, z);
                box.x_max = std::max(box.x_max, x + 1);
                box.y_max = std::max(box.y_max, y + 1);
                box.z_max = std::max(box.z_max, z + 1);
            }
        }
    }
    if (box.x_max < 0) fail(ErrorKind::usage, "tight box of an empty mask");
    return box;
}

SliceRange z_extent(const LabelMask& mask) {
    auto box = tight_box(mask);
    return {box.z_min, box.z_max - 1};
}

}  // namespace pseg
