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

#ifndef CKM_CKM_BUILDER_HPP
#define CKM_CKM_BUILDER_HPP

#include "ckm/core.hpp"
#include "ckm/estimator.hpp"
#include "ckm/pointcloud.hpp"
#include "ckm/selector.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Channel knowledge maps over a receiver grid, simple reference predictors, and the
// evaluation harness shared by every method.

namespace ckm
{

// Receiver cell (ix, iy) sits at (origin.x + ix dx, origin.y + iy dy, z).
struct GridSpec
{
    Vec3 origin = Vec3::Zero();
    double dx = 1.0;
    double dy = 1.0;
    std::size_t nx = 1;
    std::size_t ny = 1;
    double z = 1.0;

    void validate() const
    {
        if (!(dx > 0.0) || !(dy > 0.0) || !std::isfinite(dx) || !std::isfinite(dy))
            throw std::invalid_argument("GridSpec: dx and dy must be positive.");
        if (nx < 1 || ny < 1)
            throw std::invalid_argument("GridSpec: nx and ny must be at least 1.");
        if (!origin.allFinite() || !std::isfinite(z))
            throw std::invalid_argument("GridSpec: origin and height must be finite.");
    }

    std::size_t cells() const { return nx * ny; }

    Vec3 location(std::size_t ix, std::size_t iy) const
    {
        return {origin.x() + static_cast<double>(ix) * dx, origin.y() + static_cast<double>(iy) * dy, z};
    }
};

struct CkmCell
{
    Pdp pdp;
    double power_linear = 0.0;
    double power_db = 0.0;
    bool valid = true; // false when the cell coincides with the transmitter
};

// Cells in row-major order: index = iy * nx + ix.
struct CkmGrid
{
    GridSpec spec;
    std::vector<CkmCell> cells;

    const CkmCell &at(std::size_t ix, std::size_t iy) const { return cells.at(iy * spec.nx + ix); }
};

inline CkmCell make_cell(Pdp pdp)
{
    CkmCell c;
    c.power_linear = received_power(pdp);
    c.power_db = to_db(c.power_linear, Scale::power);
    c.pdp = std::move(pdp);
    return c;
}

// Estimated PDP of one link: one gain per delay bin, t0 = d0 / c.
inline Pdp predict_pdp(const EstimatorModel &model, const PointCloud &cloud, const Vec3 &tx, const Vec3 &rx,
                       const ChannelConfig &cfg, std::uint64_t seed)
{
    const LinkGeometry geom(tx, rx);
    const auto inputs = link_inputs(cloud, geom, cfg, model.config, seed);
    const double floor = cfg.noise_floor_linear();
    std::vector<double> gains(cfg.pdp_length);
    for (std::size_t k = 0; k < gains.size(); ++k)
        gains[k] = predict_gain(model, inputs[k], floor);
    return Pdp(gains, cfg, geom.d0() / cfg.speed_of_light);
}

inline CkmGrid construct_pdp_map(const EstimatorModel &model, const PointCloud &cloud, const Vec3 &tx,
                                 const GridSpec &spec, const ChannelConfig &cfg, std::uint64_t seed)
{
    spec.validate();
    cfg.validate();
    CkmGrid g;
    g.spec = spec;
    g.cells.reserve(spec.cells());
    for (std::size_t iy = 0; iy < spec.ny; ++iy)
        for (std::size_t ix = 0; ix < spec.nx; ++ix)
        {
            const Vec3 rx = spec.location(ix, iy);
            if (rx == tx)
            {
                auto c = make_cell(Pdp::at_floor(cfg));
                c.valid = false;
                g.cells.push_back(std::move(c));
                continue;
            }
            g.cells.push_back(make_cell(predict_pdp(model, cloud, tx, rx, cfg, seed)));
        }
    return g;
}

// 10 log10(P) per cell; NaN for invalid cells.
inline std::vector<double> radio_map_from_pdp_map(const CkmGrid &grid)
{
    std::vector<double> out;
    out.reserve(grid.cells.size());
    for (const auto &c : grid.cells)
        out.push_back(c.valid ? to_db(received_power(c.pdp), Scale::power)
                              : std::numeric_limits<double>::quiet_NaN());
    return out;
}

// ---------------------------------------------------------------------------
// CSV: ix,iy,x,y,power_db,g0..g{K-1}. Invalid cells are written with an empty power field.

inline void save_ckm_csv(const std::filesystem::path &path, const CkmGrid &grid)
{
    auto out = io::open_out(path);
    const std::size_t K = grid.cells.empty() ? 0 : grid.cells.front().pdp.size();
    out << "ix,iy,x,y,power_db";
    for (std::size_t k = 0; k < K; ++k)
        out << ",g" << k;
    out << '\n';
    for (std::size_t iy = 0; iy < grid.spec.ny; ++iy)
        for (std::size_t ix = 0; ix < grid.spec.nx; ++ix)
        {
            const auto &c = grid.at(ix, iy);
            const Vec3 p = grid.spec.location(ix, iy);
            out << ix << ',' << iy << ',' << io::fmt_exact(p.x()) << ',' << io::fmt_exact(p.y()) << ','
                << (c.valid ? io::fmt_exact(c.power_db) : std::string());
            for (double g : c.pdp.gains())
                out << ',' << io::fmt_exact(g);
            out << '\n';
        }
    io::finish(out, path);
}

// A loaded map: per-cell power (NaN when invalid) and gains.
struct CkmTable
{
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::vector<double> x, y, power_db;
    std::vector<std::vector<double>> gains;

    double power(std::size_t ix, std::size_t iy) const { return power_db.at(iy * nx + ix); }
};

inline CkmTable load_ckm_csv(const std::filesystem::path &path)
{
    auto in = io::open_in(path);
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line))
        throw ParseError("CKM CSV is empty", 1);
    const auto header = io::split(line, ',');
    if (header.size() < 5 || header[0] != "ix" || header[1] != "iy" || header[2] != "x" || header[3] != "y" ||
        header[4] != "power_db")
        throw ParseError("CKM CSV header must start with ix,iy,x,y,power_db", lineno);
    const std::size_t K = header.size() - 5;

    struct Row
    {
        std::size_t ix, iy;
        double x, y, p;
        std::vector<double> g;
    };
    std::vector<Row> rows;
    std::size_t nx = 0, ny = 0;
    while (std::getline(in, line))
    {
        ++lineno;
        if (io::trim(line).empty())
            continue;
        const auto c = io::split(line, ',');
        if (c.size() != K + 5)
            throw ParseError("expected " + std::to_string(K + 5) + " fields", lineno);
        Row r;
        const auto ix = io::parse_int(c[0], lineno), iy = io::parse_int(c[1], lineno);
        if (ix < 0 || iy < 0)
            throw ParseError("negative cell index", lineno);
        r.ix = static_cast<std::size_t>(ix);
        r.iy = static_cast<std::size_t>(iy);
        r.x = io::parse_double(c[2], lineno);
        r.y = io::parse_double(c[3], lineno);
        r.p = io::trim(c[4]).empty() ? std::numeric_limits<double>::quiet_NaN() : io::parse_double(c[4], lineno);
        for (std::size_t k = 0; k < K; ++k)
            r.g.push_back(io::parse_double(c[5 + k], lineno));
        nx = std::max(nx, r.ix + 1);
        ny = std::max(ny, r.iy + 1);
        rows.push_back(std::move(r));
    }
    if (rows.size() != nx * ny)
        throw ParseError("CKM CSV does not cover a full grid", lineno);
    CkmTable t;
    t.nx = nx;
    t.ny = ny;
    t.x.assign(nx * ny, 0.0);
    t.y.assign(nx * ny, 0.0);
    t.power_db.assign(nx * ny, std::numeric_limits<double>::quiet_NaN());
    t.gains.assign(nx * ny, {});
    std::vector<bool> seen(nx * ny, false);
    for (auto &r : rows)
    {
        const auto i = r.iy * nx + r.ix;
        if (seen[i])
            throw ParseError("duplicate cell " + std::to_string(r.ix) + "," + std::to_string(r.iy), 0);
        seen[i] = true;
        t.x[i] = r.x;
        t.y[i] = r.y;
        t.power_db[i] = r.p;
        t.gains[i] = std::move(r.g);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Reference predictors

// LoS-only free-space PDP: bin 0 carries c / (4 pi f d0), every other bin sits at the floor.
inline Pdp friis_pdp(const Vec3 &tx, const Vec3 &rx, const ChannelConfig &cfg)
{
    const double d0 = (rx - tx).norm();
    if (!(d0 > 0.0))
        throw std::invalid_argument("friis_pdp: receiver coincides with the transmitter.");
    std::vector<double> g(cfg.pdp_length, 0.0);
    g[0] = cfg.speed_of_light / (4.0 * std::numbers::pi * cfg.carrier_frequency * d0);
    return Pdp(g, cfg, d0 / cfg.speed_of_light);
}

// Per-bin mean of the training PDPs, taken on the amplitude-dB scale (the constant that
// minimises the dB RMSE of each bin).
inline Pdp bin_mean_pdp(const ObservationSet &train, const ChannelConfig &cfg)
{
    if (train.empty())
        throw std::invalid_argument("bin_mean_pdp: empty training set.");
    std::vector<double> acc(cfg.pdp_length, 0.0);
    for (const auto &o : train)
    {
        if (o.pdp.size() != cfg.pdp_length)
            throw std::invalid_argument("bin_mean_pdp: PDP length mismatch.");
        for (std::size_t k = 0; k < acc.size(); ++k)
            acc[k] += to_db(o.pdp[k], Scale::amplitude);
    }
    std::vector<double> g(acc.size());
    for (std::size_t k = 0; k < g.size(); ++k)
        g[k] = from_db(acc[k] / static_cast<double>(train.size()), Scale::amplitude);
    return Pdp(g, cfg);
}

// ---------------------------------------------------------------------------
// Evaluation

// Prediction at one held-out location. Radio-map-only methods leave `pdp` empty.
struct Prediction
{
    Vec3 location = Vec3::Zero();
    std::optional<Pdp> pdp;
    double power_db = 0.0;
};

inline Prediction pdp_prediction(const Vec3 &location, Pdp pdp)
{
    Prediction p;
    p.location = location;
    p.power_db = to_db(received_power(pdp), Scale::power);
    p.pdp = std::move(pdp);
    return p;
}

struct Summary
{
    double mean = 0.0;
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double min = 0.0;
    double max = 0.0;
    std::size_t count = 0;
};

// Quantile with linear interpolation between order statistics (h = (n - 1) p).
inline double quantile_sorted(std::span<const double> sorted, double p)
{
    if (sorted.empty())
        return std::numeric_limits<double>::quiet_NaN();
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline Summary summarize(std::vector<double> v)
{
    Summary s;
    std::erase_if(v, [](double x) { return std::isnan(x); });
    s.count = v.size();
    if (v.empty())
    {
        s.mean = s.median = s.q1 = s.q3 = s.min = s.max = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    std::sort(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v)
        acc += x;
    s.mean = acc / static_cast<double>(v.size());
    s.median = quantile_sorted(v, 0.5);
    s.q1 = quantile_sorted(v, 0.25);
    s.q3 = quantile_sorted(v, 0.75);
    s.min = v.front();
    s.max = v.back();
    return s;
}

struct LocationResult
{
    Vec3 location = Vec3::Zero();
    double pdp_rmse_db = std::numeric_limits<double>::quiet_NaN();
    double power_error_db = 0.0; // |predicted - true| received power
};

struct EvaluationReport
{
    std::string method;
    std::vector<LocationResult> rows; // canonical location order
    Summary pdp_rmse;
    Summary power_error;
    double radio_map_rmse_db = 0.0;
};

// Scores predictions against held-out observations, matched by exact location.
inline EvaluationReport evaluate(const std::string &method, std::span<const Prediction> predictions,
                                 const ObservationSet &truth)
{
    auto less = [](const Vec3 &a, const Vec3 &b) { return detail::compare3(a, b) < 0; };
    std::map<Vec3, const Prediction *, decltype(less)> by_loc(less);
    for (const auto &p : predictions)
        by_loc[p.location] = &p;

    EvaluationReport r;
    r.method = method;
    for (const auto &o : truth)
    {
        const auto it = by_loc.find(o.location);
        if (it == by_loc.end())
            throw std::invalid_argument("evaluate: no prediction for held-out location (" +
                                        io::fmt_sig(o.location.x()) + ", " + io::fmt_sig(o.location.y()) + ", " +
                                        io::fmt_sig(o.location.z()) + ") from " + method);
        const auto &p = *it->second;
        LocationResult row;
        row.location = o.location;
        if (p.pdp)
            row.pdp_rmse_db = pdp_rmse_db(*p.pdp, o.pdp);
        row.power_error_db = std::abs(p.power_db - to_db(received_power(o.pdp), Scale::power));
        r.rows.push_back(row);
    }
    std::sort(r.rows.begin(), r.rows.end(),
              [&](const LocationResult &a, const LocationResult &b) { return less(a.location, b.location); });

    std::vector<double> rmse, perr;
    double sq = 0.0;
    for (const auto &row : r.rows)
    {
        rmse.push_back(row.pdp_rmse_db);
        perr.push_back(row.power_error_db);
        sq += row.power_error_db * row.power_error_db;
    }
    r.pdp_rmse = summarize(rmse);
    r.power_error = summarize(perr);
    r.radio_map_rmse_db = r.rows.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(r.rows.size()));
    return r;
}

// Per-location rows of every report: method,x,y,z,pdp_rmse_db,power_error_db.
inline void save_report_csv(const std::filesystem::path &path, std::span<const EvaluationReport> reports)
{
    auto out = io::open_out(path);
    out << "method,x,y,z,pdp_rmse_db,power_error_db\n";
    for (const auto &r : reports)
        for (const auto &row : r.rows)
            out << r.method << ',' << io::fmt_exact(row.location.x()) << ',' << io::fmt_exact(row.location.y())
                << ',' << io::fmt_exact(row.location.z()) << ','
                << (std::isnan(row.pdp_rmse_db) ? std::string() : io::fmt_exact(row.pdp_rmse_db)) << ','
                << io::fmt_exact(row.power_error_db) << '\n';
    io::finish(out, path);
}

// Aggregates: method,metric,count,mean,median,q1,q3,min,max,radio_map_rmse_db.
inline void save_summary_csv(const std::filesystem::path &path, std::span<const EvaluationReport> reports)
{
    auto out = io::open_out(path);
    out << "method,metric,count,mean,median,q1,q3,min,max,radio_map_rmse_db\n";
    auto field = [](double v) { return std::isnan(v) ? std::string() : io::fmt_exact(v); };
    for (const auto &r : reports)
        for (const auto &[name, s] :
             {std::pair<const char *, const Summary &>{"pdp_rmse_db", r.pdp_rmse}, {"power_error_db", r.power_error}})
            out << r.method << ',' << name << ',' << s.count << ',' << field(s.mean) << ',' << field(s.median)
                << ',' << field(s.q1) << ',' << field(s.q3) << ',' << field(s.min) << ',' << field(s.max) << ','
                << field(r.radio_map_rmse_db) << '\n';
    io::finish(out, path);
}

} // namespace ckm

#endif
