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

#ifndef CKM_VOXEL_GRID_HPP
#define CKM_VOXEL_GRID_HPP

#include "ckm/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

namespace ckm
{

// Uniform voxel hash over a fixed set of positions. Cells are cubes of edge `cell`;
// each non-empty cell stores the indices of its points in ascending order.
class VoxelGrid
{
public:
    VoxelGrid(std::span<const Vec3> points, double cell) : points_(points), cell_(cell)
    {
        if (!(cell > 0.0) || !std::isfinite(cell))
            throw std::invalid_argument("VoxelGrid: cell size must be positive.");
        for (std::size_t i = 0; i < points.size(); ++i)
        {
            const auto c = coord(points[i]);
            cells_[key(c)].push_back(static_cast<std::uint32_t>(i));
            for (int a = 0; a < 3; ++a)
            {
                lo_[a] = i == 0 ? c[a] : std::min(lo_[a], c[a]);
                hi_[a] = i == 0 ? c[a] : std::max(hi_[a], c[a]);
            }
        }
    }

    // Cell edge giving roughly `per_cell` points per occupied cell for a surface-like cloud.
    static double suggest_cell(std::span<const Vec3> points, double per_cell = 8.0)
    {
        if (points.empty())
            return 1.0;
        Vec3 lo = points[0], hi = points[0];
        for (const auto &p : points)
        {
            lo = lo.cwiseMin(p);
            hi = hi.cwiseMax(p);
        }
        const Vec3 ext = (hi - lo).cwiseMax(Vec3::Constant(1e-9));
        // Treat the cloud as a 2D manifold spread over the two largest extents.
        std::array<double, 3> e{ext.x(), ext.y(), ext.z()};
        std::sort(e.begin(), e.end());
        const double area = e[1] * e[2];
        const double c = std::sqrt(area * per_cell / static_cast<double>(points.size()));
        return std::max(c, 1e-6);
    }

    // Visits every point index whose cell lies at Chebyshev cell distance exactly `ring`
    // from the cell containing q.
    template <typename Fn>
    void visit_ring(const Vec3 &q, long ring, Fn &&fn) const
    {
        const auto c = coord(q);
        for (long dx = -ring; dx <= ring; ++dx)
            for (long dy = -ring; dy <= ring; ++dy)
                for (long dz = -ring; dz <= ring; ++dz)
                {
                    if (std::max({std::labs(dx), std::labs(dy), std::labs(dz)}) != ring)
                        continue;
                    const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
                    if (it == cells_.end())
                        continue;
                    for (auto idx : it->second)
                        fn(static_cast<std::size_t>(idx));
                }
    }

    // Lower bound on the distance from q to any point in a cell at ring distance > ring.
    double ring_clearance(long ring) const { return static_cast<double>(ring) * cell_; }

    // Number of rings needed to have visited every occupied cell.
    long max_ring(const Vec3 &q) const
    {
        const auto c = coord(q);
        long r = 0;
        for (int a = 0; a < 3; ++a)
            r = std::max({r, std::labs(lo_[a] - c[a]), std::labs(hi_[a] - c[a])});
        return r;
    }

    double cell() const { return cell_; }
    std::size_t occupied() const { return cells_.size(); }

private:
    using Coord = std::array<long, 3>;

    Coord coord(const Vec3 &p) const
    {
        return {static_cast<long>(std::floor(p.x() / cell_)), static_cast<long>(std::floor(p.y() / cell_)),
                static_cast<long>(std::floor(p.z() / cell_))};
    }

    static std::uint64_t key(const Coord &c)
    {
        // 21 bits per axis, two's complement wrapped.
        const auto m = [](long v) { return static_cast<std::uint64_t>(v) & 0x1FFFFFull; };
        return (m(c[0]) << 42) | (m(c[1]) << 21) | m(c[2]);
    }

    std::span<const Vec3> points_;
    double cell_;
    Coord lo_{0, 0, 0};
    Coord hi_{0, 0, 0};
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells_;
};

} // namespace ckm

#endif
