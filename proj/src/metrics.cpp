#include "pseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace pseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double dice_counts(std::size_t inter, std::size_t p, std::size_t r) {
    if (p + r == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + r);
}

template <typename Span>
double dice_of(const Span& a, const Span& b) {
    std::size_t inter = 0, p = 0, r = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        p += x;
        r += y;
        inter += x && y;
    }
    return dice_counts(inter, p, r);
}

std::vector<std::uint8_t> foreground(std::span<const std::uint8_t> labels) {
    std::vector<std::uint8_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] != 0;
    return out;
}

// Lower envelope of parabolas along one line (Felzenszwalb & Huttenlocher),
// sample q sits at q * step.
void edt_line(std::vector<double>& f, double step, std::vector<int>& v, std::vector<double>& z,
              std::vector<double>& out) {
    const int n = static_cast<int>(f.size());
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (!std::isfinite(f[q])) continue;
        const double xq = q * step;
        double s = -kInf;
        while (k >= 0) {
            const double xv = v[k] * step;
            s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= z[k]) --k;
            else break;
        }
        ++k;
        v[k] = q;
        z[k] = k == 0 ? -kInf : s;
        z[k + 1] = kInf;
    }
    if (k < 0) return;  // no sites on this line
    int j = 0;
    for (int q = 0; q < n; ++q) {
        const double xq = q * step;
        while (z[j + 1] < xq) ++j;
        const double d = xq - v[j] * step;
        out[q] = d * d + f[v[j]];
    }
    std::copy(out.begin(), out.end(), f.begin());
}

}  // namespace

double dsc(const LabelMask& pred, const LabelMask& ref) {
    if (pred.dims() != ref.dims()) fail(ErrorKind::shape, "dsc: mask dimensions differ");
    return dice_of(pred.labels(), ref.labels());
}

double dsc(const Mask2D& pred, const Mask2D& ref) {
    if (pred.nx != ref.nx || pred.ny != ref.ny) fail(ErrorKind::shape, "dsc: mask dimensions differ");
    return dice_of(pred.labels, ref.labels);
}

std::vector<std::uint8_t> surface_voxels(const std::vector<std::uint8_t>& fg, const Dims& d, bool planar) {
    if (fg.size() != d.voxels()) fail(ErrorKind::shape, "surface_voxels: size does not match dims");
    std::vector<std::uint8_t> s(fg.size(), 0);
    auto is_fg = [&](int x, int y, int z) {
        if (x < 0 || y < 0 || z < 0 || x >= d.nx || y >= d.ny || z >= d.nz) return false;
        return fg[(static_cast<std::size_t>(z) * d.ny + y) * d.nx + x] != 0;
    };
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                if (!is_fg(x, y, z)) continue;
                const bool inner = is_fg(x - 1, y, z) && is_fg(x + 1, y, z) && is_fg(x, y - 1, z) &&
                                   is_fg(x, y + 1, z) && (planar || (is_fg(x, y, z - 1) && is_fg(x, y, z + 1)));
                s[(static_cast<std::size_t>(z) * d.ny + y) * d.nx + x] = !inner;
            }
        }
    }
    return s;
}

std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, const Dims& d,
                                               const Spacing& sp) {
    if (sites.size() != d.voxels()) fail(ErrorKind::shape, "distance transform: size does not match dims");
    std::vector<double> f(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i) f[i] = sites[i] ? 0.0 : kInf;
    const int longest = std::max({d.nx, d.ny, d.nz});
    std::vector<int> v(static_cast<std::size_t>(longest));
    std::vector<double> z(static_cast<std::size_t>(longest) + 1);
    auto pass = [&](int n, double step, std::size_t stride, auto&& starts) {
        std::vector<double> line(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
        for (std::size_t base : starts) {
            for (int i = 0; i < n; ++i) line[i] = f[base + i * stride];
            edt_line(line, step, v, z, out);
            for (int i = 0; i < n; ++i) f[base + i * stride] = line[i];
        }
    };
    const std::size_t sx = 1, sy = static_cast<std::size_t>(d.nx), sz = d.slice_voxels();
    std::vector<std::size_t> starts;
    for (int z0 = 0; z0 < d.nz; ++z0)
        for (int y = 0; y < d.ny; ++y) starts.push_back(z0 * sz + y * sy);
    pass(d.nx, sp.sx, sx, starts);
    starts.clear();
    for (int z0 = 0; z0 < d.nz; ++z0)
        for (int x = 0; x < d.nx; ++x) starts.push_back(z0 * sz + x);
    pass(d.ny, sp.sy, sy, starts);
    starts.clear();
    for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) starts.push_back(y * sy + x);
    pass(d.nz, sp.sz, sz, starts);
    return f;
}

namespace {

double nsd_impl(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& r, const Dims& d,
                const Spacing& sp, double tol, bool planar) {
    if (!(tol > 0)) fail(ErrorKind::usage, "nsd: tolerance must be positive");
    if (!(sp.sx > 0 && sp.sy > 0 && sp.sz > 0)) fail(ErrorKind::usage, "nsd: spacing must be positive");
    const auto sp_p = surface_voxels(p, d, planar), sp_r = surface_voxels(r, d, planar);
    const auto np = static_cast<std::size_t>(std::count(sp_p.begin(), sp_p.end(), 1));
    const auto nr = static_cast<std::size_t>(std::count(sp_r.begin(), sp_r.end(), 1));
    if (np + nr == 0) return 1.0;
    if (np == 0 || nr == 0) return 0.0;
    const auto to_r = squared_distance_transform(sp_r, d, sp);
    const auto to_p = squared_distance_transform(sp_p, d, sp);
    const double t2 = tol * tol;
    std::size_t good = 0;
    for (std::size_t i = 0; i < sp_p.size(); ++i) {
        if (sp_p[i] && to_r[i] <= t2) ++good;
        if (sp_r[i] && to_p[i] <= t2) ++good;
    }
    return static_cast<double>(good) / static_cast<double>(np + nr);
}

}  // namespace

double nsd(const LabelMask& pred, const LabelMask& ref, const Spacing& spacing, double tolerance_mm) {
    if (pred.dims() != ref.dims()) fail(ErrorKind::shape, "nsd: mask dimensions differ");
    return nsd_impl(foreground(pred.labels()), foreground(ref.labels()), ref.dims(), spacing, tolerance_mm, false);
}

double nsd(const Mask2D& pred, const Mask2D& ref, double sx, double sy, double tolerance_mm) {
    if (pred.nx != ref.nx || pred.ny != ref.ny) fail(ErrorKind::shape, "nsd: mask dimensions differ");
    return nsd_impl(foreground(pred.labels), foreground(ref.labels), {pred.nx, pred.ny, 1}, {sx, sy, 1.0},
                    tolerance_mm, true);
}

std::string MetricReport::to_json() const {
    nlohmann::json j{{"dsc", dsc}, {"nsd", nsd}, {"n_voxels_pred", n_voxels_pred}, {"n_voxels_ref", n_voxels_ref}};
    if (per_frame) {
        auto arr = nlohmann::json::array();
        for (const auto& f : *per_frame) arr.push_back({{"dsc", f.dsc}, {"nsd", f.nsd}});
        j["per_frame"] = arr;
    }
    return j.dump();
}

MetricReport evaluate_volume(const LabelMask& pred, const LabelMask& ref, double tolerance_mm) {
    MetricReport r;
    r.dsc = dsc(pred, ref);
    r.nsd = nsd(pred, ref, tolerance_mm);
    r.n_voxels_pred = pred.foreground_count();
    r.n_voxels_ref = ref.foreground_count();
    return r;
}

MetricReport video_metrics(const LabelMask& pred, const LabelMask& ref, double tolerance_mm) {
    if (pred.dims().nz != ref.dims().nz) fail(ErrorKind::shape, "video_metrics: frame counts differ");
    if (pred.dims() != ref.dims()) fail(ErrorKind::shape, "video_metrics: frame sizes differ");
    MetricReport r;
    r.per_frame.emplace();
    const int n = ref.dims().nz;
    for (int z = 0; z < n; ++z) {
        const auto p = extract_slice(pred, z), q = extract_slice(ref, z);
        FrameScore f{dsc(p, q), nsd(p, q, ref.spacing().sx, ref.spacing().sy, tolerance_mm)};
        r.dsc += f.dsc;
        r.nsd += f.nsd;
        r.per_frame->push_back(f);
    }
    if (n > 0) {
        r.dsc /= n;
        r.nsd /= n;
    }
    r.n_voxels_pred = pred.foreground_count();
    r.n_voxels_ref = ref.foreground_count();
    return r;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    WilcoxonMethod method) {
    if (a.size() != b.size()) fail(ErrorKind::shape, "wilcoxon: paired samples differ in length");
    std::vector<double> diff;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (!std::isfinite(d)) fail(ErrorKind::numeric, "wilcoxon: non-finite value");
        if (d != 0.0) diff.push_back(d);
    }
    WilcoxonResult res;
    res.n = static_cast<int>(diff.size());
    if (diff.empty()) return res;
    if (res.n < 5) fail(ErrorKind::usage, "wilcoxon: need at least 5 nonzero differences, got " + std::to_string(res.n));

    // doubled average ranks keep everything integral
    std::vector<std::size_t> order(diff.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return std::abs(diff[i]) < std::abs(diff[j]); });
    std::vector<long> rank2(diff.size());
    double tie_term = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && std::abs(diff[order[j + 1]]) == std::abs(diff[order[i]])) ++j;
        const long r2 = static_cast<long>(i + j + 2);  // 2 * mean of ranks i+1..j+1
        for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }
    long plus2 = 0, total2 = 0;
    for (std::size_t i = 0; i < diff.size(); ++i) {
        total2 += rank2[i];
        if (diff[i] > 0) plus2 += rank2[i];
    }
    res.w_plus = plus2 / 2.0;
    res.w_minus = (total2 - plus2) / 2.0;
    res.statistic = std::min(res.w_plus, res.w_minus);

    const bool exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::automatic && res.n <= 20);
    res.exact = exact;
    if (exact) {
        if (res.n > 40) fail(ErrorKind::usage, "wilcoxon: exact distribution limited to n <= 40");
        std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
        count[0] = 1.0;
        long reach = 0;
        for (long r : rank2) {
            for (long s = reach; s >= 0; --s) {
                if (count[static_cast<std::size_t>(s)] != 0.0) count[static_cast<std::size_t>(s + r)] += count[static_cast<std::size_t>(s)];
            }
            reach += r;
        }
        const long low = std::min(plus2, total2 - plus2);
        double tail = 0;
        for (long s = 0; s <= low; ++s) tail += count[static_cast<std::size_t>(s)];
        res.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, res.n));
    } else {
        const double n = res.n;
        const double mean = n * (n + 1) / 4.0;
        const double var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0;
        if (var <= 0) return res;
        const double z = std::max(0.0, std::abs(res.w_plus - mean) - 0.5) / std::sqrt(var);
        res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    }
    return res;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) fail(ErrorKind::usage, "quantile of an empty list");
    if (!(q >= 0 && q <= 1)) fail(ErrorKind::range, "quantile: q outside [0, 1]");
    std::sort(values.begin(), values.end());
    const double h = (values.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - lo) * (values[hi] - values[lo]);
}

MetricSummary summarize(const std::vector<CaseMetrics>& rows) {
    std::vector<double> d, n;
    for (const auto& r : rows) {
        d.push_back(r.dsc);
        n.push_back(r.nsd);
    }
    MetricSummary s;
    s.dsc_median = quantile(d, 0.5);
    s.dsc_q1 = quantile(d, 0.25);
    s.dsc_q3 = quantile(d, 0.75);
    s.nsd_median = quantile(n, 0.5);
    s.nsd_q1 = quantile(n, 0.25);
    s.nsd_q3 = quantile(n, 0.75);
    return s;
}

std::string metrics_csv(const std::vector<CaseMetrics>& rows) {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << "case_id,target,dsc,nsd\n";
    for (const auto& r : rows) os << r.case_id << ',' << r.target << ',' << r.dsc << ',' << r.nsd << '\n';
    if (!rows.empty()) {
        const auto s = summarize(rows);
        os << "median,," << s.dsc_median << ',' << s.nsd_median << '\n';
        os << "iqr,," << s.dsc_q3 - s.dsc_q1 << ',' << s.nsd_q3 - s.nsd_q1 << '\n';
    }
    return os.str();
}

}  // namespace pseg
