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

#ifndef CKM_SELECTOR_HPP
#define CKM_SELECTOR_HPP

#include "ckm/core.hpp"
#include "ckm/pointcloud.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

// Arriving regions of a transmitter/receiver link.
//
// A point p interacts with paths of length s(p) = |p - tx| + |p - rx|. The co-focal
// ellipsoids s = d_k, d_k = d0 + k c dt, cut space into shells; shell k (the region
// between ellipsoids k and k+1, or the interior of ellipsoid 1 for k = 0) holds the points
// whose paths arrive in delay bin k.

namespace ckm
{

class LinkGeometry
{
public:
    LinkGeometry(const Vec3 &tx, const Vec3 &rx) : tx_(tx), rx_(rx), d0_((rx - tx).norm())
    {
        if (!tx.allFinite() || !rx.allFinite())
            throw std::invalid_argument("LinkGeometry: endpoints must be finite.");
        if (!(d0_ > 0.0))
            throw std::invalid_argument("LinkGeometry: degenerate link, transmitter and receiver coincide.");
    }

    const Vec3 &tx() const { return tx_; }
    const Vec3 &rx() const { return rx_; }
    double d0() const { return d0_; }

    // |p - tx| + |p - rx|
    double path_sum(const Vec3 &p) const { return (p - tx_).norm() + (p - rx_).norm(); }

private:
    Vec3 tx_;
    Vec3 rx_;
    double d0_;
};

// p' = rotation * (p - center) puts tx at (-d0/2, 0, 0) and rx at (+d0/2, 0, 0).
struct FramingTransform
{
    Vec3 center = Vec3::Zero();
    Mat3 rotation = Mat3::Identity();

    Vec3 apply(const Vec3 &p) const { return rotation * (p - center); }
    Vec3 rotate(const Vec3 &dir) const { return rotation * dir; }
};

// Rodrigues rotation about w = v x e_x / |v x e_x| by the angle between v = rx - tx and e_x.
// With v = (vx, vy, vz), v x e_x = (0, vz, -vy), so the axis, sin and cos are all formed
// without cancellation. When v is antiparallel to e_x the axis is undefined and a half turn
// about +z is used.
inline FramingTransform framing(const Vec3 &tx, const Vec3 &rx)
{
    if (!tx.allFinite() || !rx.allFinite())
        throw std::invalid_argument("framing: endpoints must be finite.");
    const Vec3 v = rx - tx;
    const double len = v.norm();
    if (!(len > 0.0))
        throw std::invalid_argument("framing: degenerate link, transmitter and receiver coincide.");

    FramingTransform f;
    f.center = 0.5 * (tx + rx);

    const double perp = std::hypot(v.y(), v.z());
    if (perp == 0.0)
    {
        if (v.x() < 0.0)
            f.rotation = Eigen::Vector3d(-1.0, -1.0, 1.0).asDiagonal();
        return f;
    }
    const Vec3 w(0.0, v.z() / perp, -v.y() / perp);
    const double s = perp / len;
    const double c = v.x() / len;
    Mat3 K;
    K << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
    f.rotation = Mat3::Identity() + s * K + (1.0 - c) * (K * K);
    return f;
}

inline FramingTransform framing(const LinkGeometry &g) { return framing(g.tx(), g.rx()); }

// Shell k: paths in [d_inner, d_outer). Semi-axes (a, b = c) are those of the bounding
// (outer) ellipsoid; the inner ones describe ellipsoid k (zero-size for k = 0).
struct EllipsoidShell
{
    std::size_t index = 0;
    double a = 0.0;
    double b = 0.0;
    double d_inner = 0.0;
    double d_outer = 0.0;
    double a_inner = 0.0;
    double b_inner = 0.0;
};

inline EllipsoidShell shell_params(double d0, std::size_t k, const ChannelConfig &cfg)
{
    const auto grid = toa_grid(d0, cfg);
    EllipsoidShell s;
    s.index = k;
    s.d_inner = grid.path_length(k);
    s.d_outer = grid.path_length(k + 1);
    const double h = 0.5 * d0;
    s.a = 0.5 * s.d_outer;
    s.b = std::sqrt(s.a * s.a - h * h);
    s.a_inner = 0.5 * s.d_inner;
    s.b_inner = std::sqrt(std::max(0.0, s.a_inner * s.a_inner - h * h));
    return s;
}

// Delay bin of a path of length s on `grid`: the k with d_k <= s < d_{k+1}. Lengths below
// d0 (rounding on the LoS segment) fall into bin 0; none at or beyond d_K.
inline std::optional<std::size_t> bin_of_length(double s, const ToaGrid &grid)
{
    if (!(s < grid.horizon()))
        return std::nullopt;
    const double x = (s - grid.d0) / grid.step;
    if (!(x > 0.0))
        return std::size_t{0};
    auto k = static_cast<std::size_t>(std::floor(x));
    // Snap to the exact bin edges used everywhere else.
    while (k + 1 < grid.bins && s >= grid.path_length(k + 1))
        ++k;
    while (k > 0 && s < grid.path_length(k))
        --k;
    if (k >= grid.bins)
        return std::nullopt;
    return k;
}

inline std::optional<std::size_t> classify_point(const Vec3 &p, const LinkGeometry &geom, const ChannelConfig &cfg)
{
    return bin_of_length(geom.path_sum(p), toa_grid(geom.d0(), cfg));
}

struct RegionAssignment
{
    static constexpr std::int32_t none = -1;

    std::vector<std::int32_t> bin;                // per point, in cloud order
    std::vector<std::vector<std::size_t>> members; // per bin, ascending point indices

    std::size_t bins() const { return members.size(); }
    std::size_t unassigned() const
    {
        std::size_t n = 0;
        for (auto b : bin)
            n += b == none;
        return n;
    }
};

// One pass over the cloud: each point goes to the bin of its path sum.
inline RegionAssignment partition_cloud(const PointCloud &cloud, const LinkGeometry &geom, const ChannelConfig &cfg)
{
    const auto grid = toa_grid(geom.d0(), cfg);
    RegionAssignment r;
    r.bin.assign(cloud.size(), RegionAssignment::none);
    r.members.resize(grid.bins);
    for (std::size_t i = 0; i < cloud.size(); ++i)
    {
        if (const auto k = bin_of_length(geom.path_sum(cloud.points[i].position), grid))
        {
            r.bin[i] = static_cast<std::int32_t>(*k);
            r.members[*k].push_back(i);
        }
    }
    return r;
}

inline PointCloud region_subset(const PointCloud &cloud, const RegionAssignment &r, std::size_t k)
{
    PointCloud out;
    out.source_id = cloud.source_id;
    if (k >= r.bins())
        return out;
    out.points.reserve(r.members[k].size());
    for (auto i : r.members[k])
        out.points.push_back(cloud.points[i]);
    return out;
}

// Propagation features of a point relative to the link.
struct LinkFeatures
{
    double dist_tx = 0.0;
    double dist_rx = 0.0;
    double cos_incident = 0.0; // cos of the angle between the ray tx->p and the normal
    double cos_outgoing = 0.0; // cos of the angle between the ray p->rx and the normal
    double normal_valid = 0.0; // 1 when the point carries a normal
};

inline LinkFeatures link_features(const PointRecord &p, const LinkGeometry &geom)
{
    LinkFeatures f;
    const Vec3 in = p.position - geom.tx();
    const Vec3 out = geom.rx() - p.position;
    f.dist_tx = in.norm();
    f.dist_rx = out.norm();
    if (p.normal)
    {
        f.normal_valid = 1.0;
        if (f.dist_tx > 0.0)
            f.cos_incident = in.dot(*p.normal) / f.dist_tx;
        if (f.dist_rx > 0.0)
            f.cos_outgoing = out.dot(*p.normal) / f.dist_rx;
    }
    return f;
}

inline std::vector<LinkFeatures> derive_link_features(const PointCloud &subset, const LinkGeometry &geom)
{
    std::vector<LinkFeatures> out;
    out.reserve(subset.size());
    for (const auto &p : subset.points)
        out.push_back(link_features(p, geom));
    return out;
}

inline std::string region_file_name(std::size_t k)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "region_k%04zu.ply", k);
    return buf;
}

// Writes region_k####.ply for every bin (empty bins give zero-point files).
inline void export_regions(const std::filesystem::path &dir, const PointCloud &cloud, const RegionAssignment &r)
{
    for (std::size_t k = 0; k < r.bins(); ++k)
        save_ply(dir / region_file_name(k), region_subset(cloud, r, k));
}

} // namespace ckm

#endif
