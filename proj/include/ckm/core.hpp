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

#ifndef CKM_CORE_HPP
#define CKM_CORE_HPP

#include "ckm/error.hpp"
#include "ckm/io_util.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ckm
{

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double speed_of_light = 299792458.0;

// Sampling grid and reference levels of the channel.
//   sample_interval  ToA resolution in seconds
//   pdp_length       number of delay bins K
//   noise_floor_db   minimum measurable gain, amplitude dB (20 log10)
struct ChannelConfig
{
    double speed_of_light = ckm::speed_of_light;
    double sample_interval = 1.0 / 600e6;
    std::size_t pdp_length = 64;
    double noise_floor_db = -110.0;
    double carrier_frequency = 4.6e9;

    void validate() const
    {
        if (!(sample_interval > 0.0) || !std::isfinite(sample_interval))
            throw std::invalid_argument("ChannelConfig: sample_interval must be positive.");
        if (pdp_length < 1)
            throw std::invalid_argument("ChannelConfig: pdp_length must be at least 1.");
        if (!(speed_of_light > 0.0) || !std::isfinite(speed_of_light))
            throw std::invalid_argument("ChannelConfig: speed_of_light must be positive.");
        if (!std::isfinite(noise_floor_db))
            throw std::invalid_argument("ChannelConfig: noise_floor_db must be finite.");
        if (!(carrier_frequency > 0.0))
            throw std::invalid_argument("ChannelConfig: carrier_frequency must be positive.");
    }

    // Path-length increment per delay bin (c * dt).
    double bin_length() const { return speed_of_light * sample_interval; }

    double noise_floor_linear() const { return std::pow(10.0, noise_floor_db / 20.0); }

    double wavelength() const { return speed_of_light / carrier_frequency; }
};

enum class Scale
{
    amplitude, // 20 log10
    power      // 10 log10
};

inline double to_db(double linear, Scale kind)
{
    if (!(linear > 0.0))
        throw std::domain_error("to_db: input must be positive.");
    return (kind == Scale::amplitude ? 20.0 : 10.0) * std::log10(linear);
}

inline double from_db(double db, Scale kind)
{
    return std::pow(10.0, db / (kind == Scale::amplitude ? 20.0 : 10.0));
}

// Raise every gain below `floor` to exactly `floor`. Idempotent.
inline std::vector<double> floor_gains(std::span<const double> gains, double floor)
{
    std::vector<double> out(gains.begin(), gains.end());
    for (auto &g : out)
        if (!(g >= floor))
            g = floor;
    return out;
}

// Power delay profile: K non-negative linear amplitudes, floored at the noise floor.
// Bin k collects paths arriving in [t0 + k dt, t0 + (k+1) dt).
class Pdp
{
public:
    Pdp() = default;

    Pdp(std::span<const double> gains, double floor_linear, double toa_origin = 0.0)
        : toa_origin_(toa_origin)
    {
        if (gains.empty())
            throw std::invalid_argument("Pdp: gains must not be empty.");
        if (!(floor_linear >= 0.0) || !std::isfinite(floor_linear))
            throw std::invalid_argument("Pdp: noise floor must be finite and non-negative.");
        for (double g : gains)
            if (!std::isfinite(g) || g < 0.0)
                throw std::invalid_argument("Pdp: gains must be finite and non-negative.");
        gains_ = floor_gains(gains, floor_linear);
    }

    Pdp(std::span<const double> gains, const ChannelConfig &cfg, double toa_origin = 0.0)
        : Pdp(gains, cfg.noise_floor_linear(), toa_origin)
    {
        if (gains.size() != cfg.pdp_length)
            throw std::invalid_argument("Pdp: length must equal pdp_length.");
    }

    static Pdp at_floor(const ChannelConfig &cfg, double toa_origin = 0.0)
    {
        const std::vector<double> g(cfg.pdp_length, cfg.noise_floor_linear());
        return Pdp(g, cfg, toa_origin);
    }

    std::span<const double> gains() const { return gains_; }
    double operator[](std::size_t k) const { return gains_[k]; }
    std::size_t size() const { return gains_.size(); }
    double toa_origin() const { return toa_origin_; }

    // Arrival time of bin k.
    double toa(std::size_t k, const ChannelConfig &cfg) const
    {
        return toa_origin_ + static_cast<double>(k) * cfg.sample_interval;
    }

    std::vector<double> gains_db() const
    {
        std::vector<double> out(gains_.size());
        for (std::size_t k = 0; k < gains_.size(); ++k)
            out[k] = to_db(gains_[k], Scale::amplitude);
        return out;
    }

private:
    std::vector<double> gains_;
    double toa_origin_ = 0.0;
};

// P = sum_k alpha_k^2
inline double received_power(std::span<const double> gains)
{
    double p = 0.0;
    for (double g : gains)
        p += g * g;
    return p;
}

inline double received_power(const Pdp &pdp) { return received_power(pdp.gains()); }

// RMSE between two floored PDPs on the amplitude-dB scale, averaged over the K bins.
inline double pdp_rmse_db(const Pdp &h, const Pdp &h_star)
{
    if (h.size() != h_star.size())
        throw std::invalid_argument("pdp_rmse_db: PDP lengths differ.");
    double acc = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k)
    {
        const double d = to_db(h[k], Scale::amplitude) - to_db(h_star[k], Scale::amplitude);
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(h.size()));
}

// Delay bins for a link of LoS length d0: bin k spans path lengths [d_k, d_{k+1}).
struct ToaGrid
{
    double d0 = 0.0;
    double step = 0.0; // c * dt
    std::size_t bins = 0;

    double path_length(std::size_t k) const { return d0 + static_cast<double>(k) * step; }
    double toa(std::size_t k, double c) const { return path_length(k) / c; }
    // d_K, the end of the last bin.
    double horizon() const { return path_length(bins); }
};

inline ToaGrid toa_grid(double d0, const ChannelConfig &cfg)
{
    if (!(d0 > 0.0) || !std::isfinite(d0))
        throw std::invalid_argument("toa_grid: LoS length must be positive.");
    return ToaGrid{d0, cfg.bin_length(), cfg.pdp_length};
}

inline std::size_t toa_bin_count(double d0, const ChannelConfig &cfg) { return toa_grid(d0, cfg).bins; }

struct Observation
{
    Vec3 location = Vec3::Zero();
    Pdp pdp;
};

using ObservationSet = std::vector<Observation>;

// ---------------------------------------------------------------------------
// CSV layout: header x,y,z,g0,...,g{K-1}; linear amplitudes; one row per location.

inline void save_observations(const std::filesystem::path &path, const ObservationSet &obs)
{
    auto out = io::open_out(path);
    const std::size_t K = obs.empty() ? 0 : obs.front().pdp.size();
    out << "x,y,z";
    for (std::size_t k = 0; k < K; ++k)
        out << ",g" << k;
    out << '\n';
    for (const auto &o : obs)
    {
        if (o.pdp.size() != K)
            throw std::invalid_argument("save_observations: inconsistent PDP lengths.");
        out << io::fmt_exact(o.location.x()) << ',' << io::fmt_exact(o.location.y()) << ','
            << io::fmt_exact(o.location.z());
        for (double g : o.pdp.gains())
            out << ',' << io::fmt_exact(g);
        out << '\n';
    }
    io::finish(out, path);
}

// Loads an observation CSV. Gains are floored with cfg's noise floor; the number of gain
// columns must equal cfg.pdp_length. When `tx` is given, each PDP gets t0 = |x - tx| / c.
inline ObservationSet load_observations(const std::filesystem::path &path, const ChannelConfig &cfg,
                                        const std::optional<Vec3> &tx = std::nullopt)
{
    auto in = io::open_in(path);
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line))
        throw ParseError("observation CSV is empty", 1);
    ++lineno;
    const auto header = io::split(line, ',');
    if (header.size() < 4 || header[0] != "x" || header[1] != "y" || header[2] != "z")
        throw ParseError("observation CSV header must start with x,y,z,g0", lineno);
    for (std::size_t k = 3; k < header.size(); ++k)
        if (header[k] != "g" + std::to_string(k - 3))
            throw ParseError("unexpected column '" + std::string(header[k]) + "'", lineno);
    const std::size_t K = header.size() - 3;
    if (K != cfg.pdp_length)
        throw ParseError("observation CSV has " + std::to_string(K) + " gain columns, expected " +
                             std::to_string(cfg.pdp_length),
                         lineno);

    ObservationSet obs;
    std::vector<double> gains(K);
    while (std::getline(in, line))
    {
        ++lineno;
        if (io::trim(line).empty())
            continue;
        const auto cells = io::split(line, ',');
        if (cells.size() != K + 3)
            throw ParseError("expected " + std::to_string(K + 3) + " fields", lineno);
        Observation o;
        o.location = Vec3(io::parse_double(cells[0], lineno), io::parse_double(cells[1], lineno),
                          io::parse_double(cells[2], lineno));
        if (!o.location.allFinite())
            throw ParseError("non-finite location", lineno);
        for (std::size_t k = 0; k < K; ++k)
        {
            gains[k] = io::parse_double(cells[k + 3], lineno);
            if (!std::isfinite(gains[k]) || gains[k] < 0.0)
                throw ParseError("gain must be finite and non-negative", lineno);
        }
        const double t0 = tx ? (o.location - *tx).norm() / cfg.speed_of_light : 0.0;
        o.pdp = Pdp(gains, cfg, t0);
        obs.push_back(std::move(o));
    }
    return obs;
}

} // namespace ckm

#endif
