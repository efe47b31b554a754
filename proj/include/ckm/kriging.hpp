// SPDX-License-Identifier: Apache-2.0
//
// ckm - channel knowledge maps from environmental point clouds
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#ifndef CKM_KRIGING_HPP
#define CKM_KRIGING_HPP

#include "ckm/core.hpp"
#include "ckm/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

// Regression kriging of received power: a log-distance trend fitted by least squares, and
// ordinary kriging of its residuals under an exponential semivariogram.

namespace ckm
{

// gamma(h) = nugget + sill (1 - exp(-h / range)) for h > 0, gamma(0) = nugget.
struct VariogramModel
{
    double nugget = 0.0;
    double sill = 1.0;
    double range = 1.0;

    double operator()(double h) const { return nugget + sill * (1.0 - std::exp(-std::max(0.0, h) / range)); }
};

struct VariogramBin
{
    double lag = 0.0;   // mean separation of the pairs in the bin
    double gamma = 0.0; // mean half squared difference
    std::size_t pairs = 0;
};

// Empirical semivariogram. The bin width is the median nearest-neighbour distance and the
// cutoff half the largest separation; when that gives fewer than `min_bins` bins the width
// shrinks so that exactly `min_bins` fit. Empty bins are dropped.
inline std::vector<VariogramBin> empirical_variogram(std::span<const Vec3> loc, std::span<const double> value,
                                                     std::size_t min_bins = 6)
{
    const std::size_t n = loc.size();
    if (n != value.size())
        throw std::invalid_argument("empirical_variogram: size mismatch.");
    if (n < 2)
        return {};
    std::vector<double> nn(n, std::numeric_limits<double>::infinity());
    double hmax = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
        {
            const double h = (loc[i] - loc[j]).norm();
            nn[i] = std::min(nn[i], h);
            nn[j] = std::min(nn[j], h);
            hmax = std::max(hmax, h);
        }
    std::sort(nn.begin(), nn.end());
    const double median = n % 2 ? nn[n / 2] : 0.5 * (nn[n / 2 - 1] + nn[n / 2]);
    const double cutoff = 0.5 * hmax;
    if (!(cutoff > 0.0))
        return {};
    double width = median;
    auto bins = width > 0.0 ? static_cast<std::size_t>(std::floor(cutoff / width)) : 0;
    if (bins < min_bins)
    {
        bins = min_bins;
        width = cutoff / static_cast<double>(bins);
    }

    std::vector<VariogramBin> acc(bins);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
        {
            const double h = (loc[i] - loc[j]).norm();
            if (h > cutoff)
                continue;
            const auto b = std::min(bins - 1, static_cast<std::size_t>(h / width));
            const double d = value[i] - value[j];
            acc[b].lag += h;
            acc[b].gamma += 0.5 * d * d;
            ++acc[b].pairs;
        }
    std::vector<VariogramBin> out;
    for (auto &b : acc)
        if (b.pairs > 0)
        {
            const double c = static_cast<double>(b.pairs);
            out.push_back({b.lag / c, b.gamma / c, b.pairs});
        }
    return out;
}

namespace detail
{
// Pair-weighted least squares of nugget and sill for a fixed range, both constrained >= 0.
// Returns the weighted squared error.
inline double fit_nugget_sill(std::span<const VariogramBin> bins, double range, double &nugget, double &sill)
{
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto &b : bins)
    {
        const double w = static_cast<double>(b.pairs);
        const double x = 1.0 - std::exp(-b.lag / range);
        sw += w;
        sx += w * x;
        sy += w * b.gamma;
        sxx += w * x * x;
        sxy += w * x * b.gamma;
    }
    auto sse = [&](double n0, double s0) {
        double e = 0.0;
        for (const auto &b : bins)
        {
            const double r = b.gamma - (n0 + s0 * (1.0 - std::exp(-b.lag / range)));
            e += static_cast<double>(b.pairs) * r * r;
        }
        return e;
    };
    // Candidates: unconstrained optimum, sill only, nugget only.
    double best = std::numeric_limits<double>::infinity();
    const double det = sw * sxx - sx * sx;
    if (std::abs(det) > 1e-14 * std::max(1.0, sw * sxx))
    {
        const double n0 = (sxx * sy - sx * sxy) / det;
        const double s0 = (sw * sxy - sx * sy) / det;
        if (n0 >= 0.0 && s0 >= 0.0)
        {
            nugget = n0;
            sill = s0;
            best = sse(n0, s0);
        }
    }
    if (sxx > 0.0)
    {
        const double s0 = std::max(0.0, sxy / sxx);
        if (const double e = sse(0.0, s0); e < best)
        {
            best = e;
            nugget = 0.0;
            sill = s0;
        }
    }
    if (sw > 0.0)
    {
        const double n0 = std::max(0.0, sy / sw);
        if (const double e = sse(n0, 0.0); e < best)
        {
            best = e;
            nugget = n0;
            sill = 0.0;
        }
    }
    return best;
}
} // namespace detail

// Seeded multi-start least squares of the exponential model. Nugget and sill are solved in
// closed form for each range; the range is refined by golden-section search on log(range)
// around each start.
inline VariogramModel fit_variogram(std::span<const VariogramBin> bins, std::uint64_t seed, std::size_t starts = 8)
{
    if (bins.empty())
        return {0.0, 0.0, 1.0};
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (const auto &b : bins)
    {
        lo = std::min(lo, b.lag);
        hi = std::max(hi, b.lag);
    }
    lo = std::max(lo, 1e-9);
    const double log_lo = std::log(lo / 10.0), log_hi = std::log(hi * 10.0);

    auto objective = [&](double log_r, VariogramModel &m) {
        m.range = std::exp(log_r);
        return detail::fit_nugget_sill(bins, m.range, m.nugget, m.sill);
    };

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(log_lo, log_hi);
    VariogramModel best{0.0, 0.0, 1.0};
    double best_e = std::numeric_limits<double>::infinity();
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    for (std::size_t s = 0; s < starts; ++s)
    {
        const double x0 = u(rng);
        double a = std::max(log_lo, x0 - 1.5), b = std::min(log_hi, x0 + 1.5);
        VariogramModel m;
        double c = b - phi * (b - a), d = a + phi * (b - a);
        double fc = objective(c, m), fd = objective(d, m);
        for (int it = 0; it < 60; ++it)
        {
            if (fc < fd)
            {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = objective(c, m);
            }
            else
            {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = objective(d, m);
            }
        }
        const double e = objective(0.5 * (a + b), m);
        if (e < best_e)
        {
            best_e = e;
            best = m;
        }
    }
    return best;
}

struct KrigingFit
{
    Vec3 tx = Vec3::Zero();
    double beta0 = 0.0;
    double beta1 = 0.0;
    VariogramModel variogram;
    std::vector<VariogramBin> empirical;
    bool trend_only = false; // pure-nugget residuals, no kriging system
    std::vector<Vec3> locations;
    std::vector<double> residuals;
    Eigen::FullPivLU<Eigen::MatrixXd> system;

    double trend(const Vec3 &p) const { return beta0 + beta1 * std::log10((p - tx).norm()); }
};

// Factors the ordinary kriging system of f.locations under f.variogram. A singular system
// gets one diagonal jitter of 1e-10 sill before giving up.
inline void factor_system(KrigingFit &f)
{
    const auto m = static_cast<Eigen::Index>(f.locations.size());
    Eigen::MatrixXd K(m + 1, m + 1);
    for (Eigen::Index i = 0; i < m; ++i)
    {
        for (Eigen::Index j = 0; j < m; ++j)
            K(i, j) = i == j ? f.variogram.nugget
                             : f.variogram((f.locations[static_cast<std::size_t>(i)] -
                                            f.locations[static_cast<std::size_t>(j)])
                                               .norm());
        K(i, m) = 1.0;
        K(m, i) = 1.0;
    }
    K(m, m) = 0.0;
    f.system.compute(K);
    if (!f.system.isInvertible())
    {
        K.topLeftCorner(m, m).diagonal().array() += 1e-10 * f.variogram.sill;
        f.system.compute(K);
        if (!f.system.isInvertible())
            throw NumericError("kriging: singular kriging system");
    }
}

// Fits trend and variogram to (location, power dB) observations and factors the ordinary
// kriging system.
inline KrigingFit kriging_fit(std::span<const Vec3> loc, std::span<const double> power_db, const Vec3 &tx,
                              std::uint64_t seed = 1)
{
    const std::size_t n = loc.size();
    if (n != power_db.size())
        throw std::invalid_argument("kriging_fit: size mismatch.");
    if (n < 4)
        throw std::invalid_argument("kriging_fit: at least four observations are required.");
    for (std::size_t i = 0; i < n; ++i)
    {
        if (!loc[i].allFinite() || !std::isfinite(power_db[i]))
            throw std::invalid_argument("kriging_fit: observations must be finite.");
        if (!((loc[i] - tx).norm() > 0.0))
            throw std::invalid_argument("kriging_fit: observation at the transmitter.");
        for (std::size_t j = 0; j < i; ++j)
            if (loc[i] == loc[j])
                throw std::invalid_argument("kriging_fit: duplicate observation location.");
    }

    KrigingFit f;
    f.tx = tx;
    f.locations.assign(loc.begin(), loc.end());

    Eigen::MatrixXd A(static_cast<Eigen::Index>(n), 2);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
    {
        A(static_cast<Eigen::Index>(i), 0) = 1.0;
        A(static_cast<Eigen::Index>(i), 1) = std::log10((loc[i] - tx).norm());
        y(static_cast<Eigen::Index>(i)) = power_db[i];
    }
    const double mean_x = A.col(1).mean();
    const double spread = (A.col(1).array() - mean_x).square().sum();
    if (!(spread > 1e-12 * static_cast<double>(n)))
        throw std::invalid_argument("kriging_fit: degenerate regression, all observations equidistant from tx.");
    const Eigen::Vector2d beta = A.colPivHouseholderQr().solve(y);
    f.beta0 = beta(0);
    f.beta1 = beta(1);
    const Eigen::VectorXd r = y - A * beta;
    f.residuals.assign(r.data(), r.data() + r.size());

    f.empirical = empirical_variogram(f.locations, f.residuals);
    f.variogram = fit_variogram(f.empirical, seed);
    const double var = r.squaredNorm() / static_cast<double>(n);
    if (!(f.variogram.sill > 1e-12 * std::max(1.0, var)))
    {
        f.trend_only = true;
        return f;
    }

    factor_system(f);
    return f;
}

// Ordinary kriging weights of the observations for a query (they sum to one).
inline Eigen::VectorXd kriging_weights(const KrigingFit &f, const Vec3 &q)
{
    const auto m = static_cast<Eigen::Index>(f.locations.size());
    if (f.trend_only)
    {
        // Pure nugget: the observation itself at a data point, the residual mean elsewhere.
        for (Eigen::Index i = 0; i < m; ++i)
            if (f.locations[static_cast<std::size_t>(i)] == q)
                return Eigen::VectorXd::Unit(m, i);
        return Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));
    }
    Eigen::VectorXd rhs(m + 1);
    for (Eigen::Index i = 0; i < m; ++i)
    {
        const double h = (q - f.locations[static_cast<std::size_t>(i)]).norm();
        rhs(i) = h == 0.0 ? f.variogram.nugget : f.variogram(h);
    }
    rhs(m) = 1.0;
    const Eigen::VectorXd sol = f.system.solve(rhs);
    return sol.head(m);
}

// Trend plus kriged residual.
inline double kriging_predict(const KrigingFit &f, const Vec3 &q)
{
    const auto w = kriging_weights(f, q);
    double r = 0.0;
    for (std::size_t i = 0; i < f.residuals.size(); ++i)
        r += w(static_cast<Eigen::Index>(i)) * f.residuals[i];
    return f.trend(q) + r;
}

inline std::vector<double> kriging_predict(const KrigingFit &f, std::span<const Vec3> q)
{
    std::vector<double> out;
    out.reserve(q.size());
    for (const auto &p : q)
        out.push_back(kriging_predict(f, p));
    return out;
}

} // namespace ckm

#endif
