#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pseg/volume.hpp"

namespace pseg {

/// Nonzero labels are foreground. Both empty -> 1, exactly one empty -> 0.
double dsc(const LabelMask& pred, const LabelMask& ref);
double dsc(const Mask2D& pred, const Mask2D& ref);

/// Foreground voxels with at least one face neighbour that is background or
/// outside the grid. `planar` ignores the z neighbours (2D frames).
std::vector<std::uint8_t> surface_voxels(const std::vector<std::uint8_t>& fg, const Dims& dims, bool planar = false);

/// Squared Euclidean distance (mm^2) from every voxel to the nearest site.
/// Without sites every entry is +inf.
std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, const Dims& dims,
                                               const Spacing& spacing);

/// Normalized surface distance at `tolerance_mm`; a surface voxel counts when
/// the nearest surface voxel of the other mask is at most the tolerance away.
double nsd(const LabelMask& pred, const LabelMask& ref, const Spacing& spacing, double tolerance_mm = 2.0);
inline double nsd(const LabelMask& pred, const LabelMask& ref, double tolerance_mm = 2.0) {
    return nsd(pred, ref, ref.spacing(), tolerance_mm);
}
double nsd(const Mask2D& pred, const Mask2D& ref, double sx, double sy, double tolerance_mm = 2.0);

struct FrameScore {
    double dsc = 0.0;
    double nsd = 0.0;
};

struct MetricReport {
    double dsc = 0.0;
    double nsd = 0.0;
    std::optional<std::vector<FrameScore>> per_frame;
    std::size_t n_voxels_pred = 0;
    std::size_t n_voxels_ref = 0;

    std::string to_json() const;
};

MetricReport evaluate_volume(const LabelMask& pred, const LabelMask& ref, double tolerance_mm = 2.0);

/// Frame-wise 2D scores (z = time) averaged over frames. In-plane spacing
/// comes from the reference; pass 1 mm when the clip has no physical spacing.
MetricReport video_metrics(const LabelMask& pred, const LabelMask& ref, double tolerance_mm = 2.0);

enum class WilcoxonMethod { automatic, exact, normal };

struct WilcoxonResult {
    /// min(W+, W-)
    double statistic = 0.0;
    double w_plus = 0.0;
    double w_minus = 0.0;
    double p_value = 1.0;
    /// Pairs left after dropping zero differences.
    int n = 0;
    bool exact = false;

    bool significant(double alpha = 0.05) const { return p_value < alpha; }
};

/// Two-sided signed-rank test. Zero differences are dropped and ties get
/// average ranks. Exact null distribution for n <= 20, otherwise the normal
/// approximation with tie and continuity corrections. All-zero differences
/// give p = 1; fewer than 5 nonzero pairs is an error.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    WilcoxonMethod method = WilcoxonMethod::automatic);

/// Type-7 quantile of unsorted values.
double quantile(std::vector<double> values, double q);

struct CaseMetrics {
    std::string case_id;
    std::string target;
    double dsc = 0.0;
    double nsd = 0.0;
};

struct MetricSummary {
    double dsc_median = 0.0, dsc_q1 = 0.0, dsc_q3 = 0.0;
    double nsd_median = 0.0, nsd_q1 = 0.0, nsd_q3 = 0.0;
};

MetricSummary summarize(const std::vector<CaseMetrics>& rows);

/// case_id,target,dsc,nsd rows followed by a "median" row and an "iqr" row
/// (q3 - q1).
std::string metrics_csv(const std::vector<CaseMetrics>& rows);

}  // namespace pseg
