#include "pseg/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace pseg {

WindowPreset WindowPreset::custom(double width, double level) {
    if (!(width > 0.0) || !std::isfinite(width) || !std::isfinite(level)) {
        fail(ErrorKind::range, "window width must be positive and finite");
    }
    return {"custom", width, level};
}

WindowPreset WindowPreset::named(const std::string& name) {
    if (name == "brain") return brain();
    if (name == "abdomen") return abdomen();
    if (name == "bone") return bone();
    if (name == "lung") return lung();
    if (name == "mediastinum") return mediastinum();
    fail(ErrorKind::usage, "unknown window preset '" + name + "'");
}

VoxelGrid window_ct(const VoxelGrid& grid, const WindowPreset& preset) {
    if (grid.kind() != IntensityKind::raw) fail(ErrorKind::state, "window_ct requires raw intensities");
    if (!(preset.width > 0.0)) fail(ErrorKind::range, "window width must be positive");
    const double lo = preset.level - preset.width / 2.0;
    const double hi = preset.level + preset.width / 2.0;
    VoxelGrid out(grid.dims(), grid.spacing(), IntensityKind::normalized_0_255);
    auto src = grid.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double v = std::clamp(src[i], lo, hi);
        dst[i] = (v - lo) / preset.width * 255.0;
    }
    return out;
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) fail(ErrorKind::usage, "percentile of an empty set");
    if (!(q >= 0.0 && q <= 100.0)) fail(ErrorKind::range, "percentile outside [0,100]");
    const double h = static_cast<double>(sorted.size() - 1) * q / 100.0;
    const auto f = static_cast<std::size_t>(std::floor(h));
    if (f + 1 >= sorted.size()) return sorted.back();
    return sorted[f] + (h - static_cast<double>(f)) * (sorted[f + 1] - sorted[f]);
}

PercentileBounds foreground_bounds(const VoxelGrid& grid) {
    std::vector<double> fg;
    for (double v : grid.values()) {
        if (v > 0.0) fg.push_back(v);
    }
    if (fg.empty()) fail(ErrorKind::usage, "percentile normalization needs at least one foreground voxel (> 0)");
    std::sort(fg.begin(), fg.end());
    return {percentile_sorted(fg, 0.5), percentile_sorted(fg, 99.5)};
}

VoxelGrid percentile_normalize(const VoxelGrid& grid) {
    if (grid.kind() != IntensityKind::raw) fail(ErrorKind::state, "percentile_normalize requires raw intensities");
    const auto [lo, hi] = foreground_bounds(grid);
    VoxelGrid out(grid.dims(), grid.spacing(), IntensityKind::normalized_0_255);
    if (hi == lo) return out;
    auto src = grid.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = (std::clamp(src[i], lo, hi) - lo) / (hi - lo) * 255.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// cubic B-spline

namespace bspline {

namespace {

const double kPole = std::sqrt(3.0) - 2.0;

std::ptrdiff_t mirror(std::ptrdiff_t k, std::ptrdiff_t n) {
    if (n == 1) return 0;
    const std::ptrdiff_t period = 2 * (n - 1);
    k %= period;
    if (k < 0) k += period;
    return k < n ? k : period - k;
}

double weight(double t) {
    t = std::abs(t);
    if (t < 1.0) return 2.0 / 3.0 - t * t + 0.5 * t * t * t;
    if (t < 2.0) {
        const double u = 2.0 - t;
        return u * u * u / 6.0;
    }
    return 0.0;
}

}  // namespace

void prefilter(std::vector<double>& c) {
    const auto n = static_cast<std::ptrdiff_t>(c.size());
    if (n <= 1) return;
    const double z = kPole;
    for (auto& v : c) v *= (1.0 - z) * (1.0 - 1.0 / z);

    // causal initialization, mirror-symmetric extension
    const auto horizon = static_cast<std::ptrdiff_t>(std::ceil(std::log(1e-16) / std::log(std::abs(z))));
    double sum = 0.0;
    if (horizon < n) {
        double zk = 1.0;
        for (std::ptrdiff_t k = 0; k < horizon; ++k) {
            sum += zk * c[k];
            zk *= z;
        }
    } else {
        double zn = z;
        const double iz = 1.0 / z;
        double z2n = std::pow(z, static_cast<double>(n - 1));
        sum = c[0] + z2n * c[n - 1];
        z2n *= z2n * iz;
        for (std::ptrdiff_t k = 1; k <= n - 2; ++k) {
            sum += (zn + z2n) * c[k];
            zn *= z;
            z2n *= iz;
        }
        sum /= (1.0 - zn * zn);
    }
    c[0] = sum;
    for (std::ptrdiff_t k = 1; k < n; ++k) c[k] += z * c[k - 1];

    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for (std::ptrdiff_t k = n - 2; k >= 0; --k) c[k] = z * (c[k + 1] - c[k]);
}

double evaluate(const std::vector<double>& coeffs, double x) {
    const auto n = static_cast<std::ptrdiff_t>(coeffs.size());
    if (n == 1) return coeffs[0];
    const auto base = static_cast<std::ptrdiff_t>(std::floor(x));
    double acc = 0.0;
    for (std::ptrdiff_t k = base - 1; k <= base + 2; ++k) {
        acc += coeffs[static_cast<std::size_t>(mirror(k, n))] * weight(x - static_cast<double>(k));
    }
    return acc;
}

}  // namespace bspline

namespace {

void check_targets(const Dims& dims, const Spacing& spacing) {
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) fail(ErrorKind::range, "resample target dims must be positive");
    for (double s : {spacing.sx, spacing.sy, spacing.sz}) {
        if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorKind::range, "resample target spacing must be positive");
    }
}

/// Resample every line along `axis` of a dense x-fastest array.
std::vector<double> resample_axis(const std::vector<double>& src, const int (&in)[3], int axis, int n_out,
                                  double step) {
    int out_dims[3] = {in[0], in[1], in[2]};
    out_dims[axis] = n_out;
    const std::size_t stride_in[3] = {1, static_cast<std::size_t>(in[0]),
                                      static_cast<std::size_t>(in[0]) * static_cast<std::size_t>(in[1])};
    const std::size_t stride_out[3] = {1, static_cast<std::size_t>(out_dims[0]),
                                       static_cast<std::size_t>(out_dims[0]) * static_cast<std::size_t>(out_dims[1])};
    const int a1 = (axis + 1) % 3;
    const int a2 = (axis + 2) % 3;
    std::vector<double> dst(static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2]);
    std::vector<double> line(static_cast<std::size_t>(in[axis]));
    for (int j = 0; j < in[a2]; ++j) {
        for (int i = 0; i < in[a1]; ++i) {
            const std::size_t base_in = i * stride_in[a1] + j * stride_in[a2];
            const std::size_t base_out = i * stride_out[a1] + j * stride_out[a2];
            for (int k = 0; k < in[axis]; ++k) line[k] = src[base_in + k * stride_in[axis]];
            bspline::prefilter(line);
            for (int k = 0; k < n_out; ++k) {
                dst[base_out + k * stride_out[axis]] = bspline::evaluate(line, k * step);
            }
        }
    }
    return dst;
}

int nearest_index(double x, int n) {
    const auto k = static_cast<int>(std::ceil(x - 0.5));
    return std::clamp(k, 0, n - 1);
}

}  // namespace

int resampled_count(int n, double spacing, double target_spacing) {
    return std::max(1, static_cast<int>(std::lround(n * spacing / target_spacing)));
}

VoxelGrid resample(const VoxelGrid& grid, Dims target_dims, Spacing target_spacing) {
    check_targets(target_dims, target_spacing);
    const auto& d = grid.dims();
    const auto& s = grid.spacing();
    std::vector<double> data(grid.values().begin(), grid.values().end());
    int cur[3] = {d.nx, d.ny, d.nz};
    const int target[3] = {target_dims.nx, target_dims.ny, target_dims.nz};
    const double steps[3] = {target_spacing.sx / s.sx, target_spacing.sy / s.sy, target_spacing.sz / s.sz};
    for (int axis = 0; axis < 3; ++axis) {
        data = resample_axis(data, cur, axis, target[axis], steps[axis]);
        cur[axis] = target[axis];
    }
    if (grid.kind() == IntensityKind::normalized_0_255) {
        for (auto& v : data) v = std::clamp(v, 0.0, 255.0);
    }
    return {target_dims, target_spacing, std::move(data), grid.kind()};
}

LabelMask resample(const LabelMask& mask, Dims target_dims, Spacing target_spacing) {
    check_targets(target_dims, target_spacing);
    const auto& d = mask.dims();
    const auto& s = mask.spacing();
    std::vector<int> ix(target_dims.nx), iy(target_dims.ny), iz(target_dims.nz);
    for (int x = 0; x < target_dims.nx; ++x) ix[x] = nearest_index(x * target_spacing.sx / s.sx, d.nx);
    for (int y = 0; y < target_dims.ny; ++y) iy[y] = nearest_index(y * target_spacing.sy / s.sy, d.ny);
    for (int z = 0; z < target_dims.nz; ++z) iz[z] = nearest_index(z * target_spacing.sz / s.sz, d.nz);
    LabelMask out(target_dims, target_spacing);
    for (int z = 0; z < target_dims.nz; ++z) {
        for (int y = 0; y < target_dims.ny; ++y) {
            for (int x = 0; x < target_dims.nx; ++x) out.at(x, y, z) = mask.at(ix[x], iy[y], iz[z]);
        }
    }
    return out;
}

std::pair<VoxelGrid, LabelMask> enforce_axial_spacing(const VoxelGrid& grid, const LabelMask& mask,
                                                      double min_spacing_mm) {
    if (!mask.congruent_with(grid)) fail(ErrorKind::shape, "image and mask geometry differ");
    const auto& s = grid.spacing();
    if (!(s.sz < min_spacing_mm)) return {grid, mask};
    Dims dims = grid.dims();
    dims.nz = resampled_count(dims.nz, s.sz, min_spacing_mm);
    const Spacing spacing{s.sx, s.sy, min_spacing_mm};
    return {resample(grid, dims, spacing), resample(mask, dims, spacing)};
}

}  // namespace pseg
