#pragma once

// Central finite-difference oracle for the autodiff tests. Independent of the
// backward code: it only calls forward ops in a non-recording graph.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg::testing {

using ad::Graph;
using ad::Tensor;

using ScalarFn = std::function<Tensor<double>(Graph<double>&, const std::vector<Tensor<double>>&)>;

inline Tensor<double> random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                    bool param = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = u(rng);
    return param ? Tensor<double>::parameter(std::move(shape), std::move(v))
                 : Tensor<double>::from(std::move(shape), std::move(v));
}

/// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Worst relative error over all inputs between backward() and central differences.
inline double gradcheck(const ScalarFn& fn, std::vector<Tensor<double>> inputs, double step = 1e-4) {
    for (auto& t : inputs) t.zero_grad();
    {
        Graph<double> g;
        auto loss = fn(g, inputs);
        g.backward(loss);
    }
    double worst = 0.0;
    for (auto& t : inputs) {
        if (!t.requires_grad()) continue;
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        std::vector<double> numeric(t.numel());
        auto data = t.data();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = data[i];
            data[i] = saved + step;
            Graph<double> gp(false);
            const double fp = fn(gp, inputs).item();
            data[i] = saved - step;
            Graph<double> gm(false);
            const double fm = fn(gm, inputs).item();
            data[i] = saved;
            numeric[i] = (fp - fm) / (2.0 * step);
        }
        worst = std::max(worst, relative_error(analytic, numeric));
    }
    return worst;
}

/// Projects an arbitrary tensor output onto a scalar with fixed random weights.
inline Tensor<double> project(Graph<double>& g, const Tensor<double>& out, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    auto w = random_tensor(out.shape(), rng, -1.0, 1.0, false);
    return g.sum(g.mul(out, w));
}

}  // namespace pseg::testing
