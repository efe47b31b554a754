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

#ifndef CKM_POINTCLOUD_HPP
#define CKM_POINTCLOUD_HPP

#include "ckm/core.hpp"
#include "ckm/voxel_grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ckm
{

struct PointRecord
{
    Vec3 position = Vec3::Zero();
    Vec3 color = Vec3::Constant(0.5); // RGB in [0,1]
    std::optional<Vec3> normal;       // unit length when present
};

struct PointCloud
{
    std::vector<PointRecord> points;
    std::string source_id;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }

    std::vector<Vec3> positions() const
    {
        std::vector<Vec3> out;
        out.reserve(points.size());
        for (const auto &p : points)
            out.push_back(p.position);
        return out;
    }

    void validate() const
    {
        for (const auto &p : points)
        {
            if (!p.position.allFinite())
                throw std::invalid_argument("PointCloud: non-finite coordinate.");
            if ((p.color.array() < 0.0).any() || (p.color.array() > 1.0).any())
                throw std::invalid_argument("PointCloud: color outside [0,1].");
            if (p.normal && std::abs(p.normal->norm() - 1.0) > 1e-6)
                throw std::invalid_argument("PointCloud: normal is not unit length.");
        }
    }
};

// ---------------------------------------------------------------------------
// Canonical order

namespace detail
{
inline int compare3(const Vec3 &a, const Vec3 &b)
{
    for (int i = 0; i < 3; ++i)
    {
        if (a[i] < b[i])
            return -1;
        if (b[i] < a[i])
            return 1;
    }
    return 0;
}
} // namespace detail

// Lexicographic (x, y, z), then color, then normal (absent before present).
inline bool canonical_less(const PointRecord &a, const PointRecord &b)
{
    if (int c = detail::compare3(a.position, b.position))
        return c < 0;
    if (int c = detail::compare3(a.color, b.color))
        return c < 0;
    if (a.normal.has_value() != b.normal.has_value())
        return !a.normal.has_value();
    if (a.normal)
        return detail::compare3(*a.normal, *b.normal) < 0;
    return false;
}

inline PointCloud canonical_sort(PointCloud cloud)
{
    std::stable_sort(cloud.points.begin(), cloud.points.end(), canonical_less);
    return cloud;
}

// ---------------------------------------------------------------------------
// Cardinality control

// Indices into a canonically sorted sequence of `count` items that give exactly n items:
// seeded sampling without replacement (kept in ascending order) when count > n, cyclic
// repetition when count < n. Empty when count == 0.
inline std::vector<std::size_t> fixed_cardinality_indices(std::size_t count, std::size_t n, std::uint64_t seed)
{
    if (n < 1)
        throw std::invalid_argument("fix_cardinality: n must be at least 1.");
    std::vector<std::size_t> idx;
    if (count == 0)
        return idx;
    idx.reserve(n);
    if (count > n)
    {
        std::vector<std::size_t> all(count);
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::mt19937_64 rng(seed);
        std::sample(all.begin(), all.end(), std::back_inserter(idx), n, rng);
    }
    else
    {
        for (std::size_t i = 0; i < n; ++i)
            idx.push_back(i % count);
    }
    return idx;
}

struct FixedPointSet
{
    std::vector<PointRecord> points; // exactly n entries, or none for an empty input
    std::size_t presence_count = 0;  // genuine points, min(|cloud|, n)

    bool empty() const { return presence_count == 0; }
};

inline FixedPointSet fix_cardinality(const PointCloud &cloud, std::size_t n, std::uint64_t seed)
{
    const auto sorted = canonical_sort(cloud);
    FixedPointSet out;
    for (auto i : fixed_cardinality_indices(sorted.size(), n, seed))
        out.points.push_back(sorted.points[i]);
    out.presence_count = std::min(cloud.size(), n);
    return out;
}

inline PointCloud random_downsample(const PointCloud &cloud, double ratio, std::uint64_t seed)
{
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw std::invalid_argument("random_downsample: ratio must lie in (0, 1].");
    const auto sorted = canonical_sort(cloud);
    if (ratio == 1.0 || cloud.empty())
        return sorted;
    const double want = ratio * static_cast<double>(cloud.size());
    // Guard against products such as 0.1 * 30 = 3.0000000000000004.
    auto keep = static_cast<std::size_t>(std::ceil(want - 1e-9 * std::max(1.0, want)));
    keep = std::clamp<std::size_t>(keep, 1, cloud.size());
    PointCloud out;
    out.source_id = cloud.source_id;
    std::mt19937_64 rng(seed);
    std::sample(sorted.points.begin(), sorted.points.end(), std::back_inserter(out.points), keep, rng);
    return out;
}

// ---------------------------------------------------------------------------
// Farthest point sampling and kNN grouping over raw positions.
// Ties are broken by canonical order: lexicographic position, then index.

namespace detail
{
inline bool canon_before(std::span<const Vec3> pts, std::size_t a, std::size_t b)
{
    if (int c = compare3(pts[a], pts[b]))
        return c < 0;
    return a < b;
}
} // namespace detail

// Greedy max-min sampling of m indices, in pick order. The first pick is the point farthest
// from the centroid.
inline std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> pts, std::size_t m)
{
    const std::size_t n = pts.size();
    if (m < 1 || m > n)
        throw std::invalid_argument("farthest_point_sample: need 1 <= m <= number of points.");

    Vec3 centroid = Vec3::Zero();
    for (const auto &p : pts)
        centroid += p;
    centroid /= static_cast<double>(n);

    std::size_t first = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i)
    {
        const double d = (pts[i] - centroid).squaredNorm();
        if (d > best || (d == best && detail::canon_before(pts, i, first)))
        {
            best = d;
            first = i;
        }
    }

    std::vector<std::size_t> picks;
    picks.reserve(m);
    picks.push_back(first);
    std::vector<double> mind(n);
    std::vector<char> taken(n, 0);
    taken[first] = 1;
    for (std::size_t i = 0; i < n; ++i)
        mind[i] = (pts[i] - pts[first]).squaredNorm();

    while (picks.size() < m)
    {
        std::size_t next = n;
        double far = -1.0;
        for (std::size_t i = 0; i < n; ++i)
        {
            if (taken[i])
                continue;
            if (mind[i] > far || (mind[i] == far && detail::canon_before(pts, i, next)))
            {
                far = mind[i];
                next = i;
            }
        }
        taken[next] = 1;
        picks.push_back(next);
        for (std::size_t i = 0; i < n; ++i)
            mind[i] = std::min(mind[i], (pts[i] - pts[next]).squaredNorm());
    }
    return picks;
}

// Clouds above this size use the voxel hash for neighbour queries.
inline constexpr std::size_t knn_voxel_threshold = 4096;

namespace detail
{
struct NeighborKey
{
    double d2;
    std::size_t idx;
};

// Orders neighbour candidates of `center`: distance, the center itself first, then canonical.
inline auto neighbor_order(std::span<const Vec3> pts, std::size_t center)
{
    return [pts, center](const NeighborKey &a, const NeighborKey &b) {
        if (a.d2 != b.d2)
            return a.d2 < b.d2;
        if ((a.idx == center) != (b.idx == center))
            return a.idx == center;
        return canon_before(pts, a.idx, b.idx);
    };
}

inline std::vector<std::size_t> knn_exhaustive(std::span<const Vec3> pts, std::size_t center, std::size_t k)
{
    std::vector<NeighborKey> cand(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i)
        cand[i] = {(pts[i] - pts[center]).squaredNorm(), i};
    const auto cmp = neighbor_order(pts, center);
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), cmp);
    std::vector<std::size_t> out(k);
    for (std::size_t j = 0; j < k; ++j)
        out[j] = cand[j].idx;
    return out;
}

inline std::vector<std::size_t> knn_voxel(std::span<const Vec3> pts, const VoxelGrid &grid, std::size_t center,
                                          std::size_t k)
{
    const Vec3 &q = pts[center];
    std::vector<NeighborKey> cand;
    const long last = grid.max_ring(q);
    for (long ring = 0; ring <= last; ++ring)
    {
        grid.visit_ring(q, ring, [&](std::size_t i) { cand.push_back({(pts[i] - q).squaredNorm(), i}); });
        if (cand.size() >= k)
        {
            std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k - 1), cand.end(),
                             [](const NeighborKey &a, const NeighborKey &b) { return a.d2 < b.d2; });
            const double kth = std::sqrt(cand[k - 1].d2);
            // Unvisited cells are at least ring * cell away; ties at that distance need one more ring.
            if (kth < grid.ring_clearance(ring))
                break;
        }
    }
    const auto cmp = neighbor_order(pts, center);
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), cmp);
    std::vector<std::size_t> out(k);
    for (std::size_t j = 0; j < k; ++j)
        out[j] = cand[j].idx;
    return out;
}
} // namespace detail

// For each center, its k nearest points (center first). Output order follows `centers`.
inline std::vector<std::vector<std::size_t>> knn_group(std::span<const Vec3> pts, std::span<const std::size_t> centers,
                                                       std::size_t k)
{
    if (k < 1 || k > pts.size())
        throw std::invalid_argument("knn_group: need 1 <= k <= number of points.");
    for (auto c : centers)
        if (c >= pts.size())
            throw std::invalid_argument("knn_group: center index out of range.");

    std::vector<std::vector<std::size_t>> groups(centers.size());
    if (pts.size() > knn_voxel_threshold)
    {
        const VoxelGrid grid(pts, VoxelGrid::suggest_cell(pts, std::max<double>(8.0, static_cast<double>(k))));
        for (std::size_t c = 0; c < centers.size(); ++c)
            groups[c] = detail::knn_voxel(pts, grid, centers[c], k);
    }
    else
    {
        for (std::size_t c = 0; c < centers.size(); ++c)
            groups[c] = detail::knn_exhaustive(pts, centers[c], k);
    }
    return groups;
}

// ---------------------------------------------------------------------------
// File formats

namespace detail
{
enum class PlyType
{
    int8,
    uint8,
    int16,
    uint16,
    int32,
    uint32,
    float32,
    float64
};

inline std::optional<PlyType> ply_type(std::string_view t)
{
    if (t == "char" || t == "int8")
        return PlyType::int8;
    if (t == "uchar" || t == "uint8")
        return PlyType::uint8;
    if (t == "short" || t == "int16")
        return PlyType::int16;
    if (t == "ushort" || t == "uint16")
        return PlyType::uint16;
    if (t == "int" || t == "int32")
        return PlyType::int32;
    if (t == "uint" || t == "uint32")
        return PlyType::uint32;
    if (t == "float" || t == "float32")
        return PlyType::float32;
    if (t == "double" || t == "float64")
        return PlyType::float64;
    return std::nullopt;
}

inline bool is_integral(PlyType t) { return t != PlyType::float32 && t != PlyType::float64; }

struct PlyElement
{
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props; // empty name marks a list property
    std::vector<PlyType> types;
};

// Builds a record from named fields. `get` returns the value of a field or nullopt.
template <typename Get>
PointRecord make_record(Get &&get, bool color_is_byte, std::size_t line)
{
    PointRecord r;
    const auto x = get("x"), y = get("y"), z = get("z");
    r.position = Vec3(*x, *y, *z);
    if (!r.position.allFinite())
        throw ParseError("non-finite coordinate", line);
    const auto cr = get("red"), cg = get("green"), cb = get("blue");
    if (cr && cg && cb)
    {
        Vec3 c(*cr, *cg, *cb);
        if (color_is_byte)
        {
            if ((c.array() < 0.0).any() || (c.array() > 255.0).any())
                throw ParseError("color component outside 0..255", line);
            c /= 255.0;
        }
        else if ((c.array() < 0.0).any() || (c.array() > 1.0).any())
            throw ParseError("color component outside [0,1]", line);
        r.color = c;
    }
    const auto nx = get("nx"), ny = get("ny"), nz = get("nz");
    if (nx && ny && nz)
    {
        Vec3 n(*nx, *ny, *nz);
        if (!n.allFinite())
            throw ParseError("non-finite normal", line);
        const double len = n.norm();
        if (len > 0.0)
            r.normal = n / len;
    }
    return r;
}
} // namespace detail

// ASCII PLY reader. Requires a vertex element with x, y, z; optional red/green/blue and
// nx/ny/nz. Integer colors are scaled by 1/255, float colors must already lie in [0,1].
inline PointCloud load_ply(const std::filesystem::path &path)
{
    auto in = io::open_in(path);
    std::string line;
    std::size_t lineno = 0;

    auto next_line = [&]() -> bool {
        if (!std::getline(in, line))
            return false;
        ++lineno;
        return true;
    };

    if (!next_line() || io::trim(line) != "ply")
        throw ParseError("missing 'ply' magic", lineno ? lineno : 1);

    std::vector<detail::PlyElement> elements;
    bool ascii = false;
    bool header_done = false;
    while (next_line())
    {
        const auto tok = io::tokens(line);
        if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info")
            continue;
        if (tok[0] == "format")
        {
            if (tok.size() < 2 || tok[1] != "ascii")
                throw ParseError("only ASCII PLY is supported", lineno);
            ascii = true;
        }
        else if (tok[0] == "element")
        {
            if (tok.size() != 3)
                throw ParseError("malformed element line", lineno);
            const auto cnt = io::parse_int(tok[2], lineno);
            if (cnt < 0)
                throw ParseError("negative element count", lineno);
            elements.push_back({std::string(tok[1]), static_cast<std::size_t>(cnt), {}, {}});
        }
        else if (tok[0] == "property")
        {
            if (elements.empty())
                throw ParseError("property before any element", lineno);
            if (tok.size() == 5 && tok[1] == "list")
            {
                elements.back().props.emplace_back();
                elements.back().types.push_back(detail::PlyType::int32);
            }
            else if (tok.size() == 3)
            {
                const auto t = detail::ply_type(tok[1]);
                if (!t)
                    throw ParseError("unknown property type '" + std::string(tok[1]) + "'", lineno);
                elements.back().props.emplace_back(tok[2]);
                elements.back().types.push_back(*t);
            }
            else
                throw ParseError("malformed property line", lineno);
        }
        else if (tok[0] == "end_header")
        {
            header_done = true;
            break;
        }
        else
            throw ParseError("unexpected header keyword '" + std::string(tok[0]) + "'", lineno);
    }
    if (!header_done)
        throw ParseError("missing end_header", lineno);
    if (!ascii)
        throw ParseError("missing format line", lineno);

    PointCloud cloud;
    cloud.source_id = path.filename().string();
    bool have_vertex = false;
    for (const auto &el : elements)
    {
        if (el.name != "vertex")
        {
            for (std::size_t i = 0; i < el.count; ++i)
                if (!next_line())
                    throw ParseError("element '" + el.name + "' declares " + std::to_string(el.count) +
                                         " rows but the file ends early",
                                     lineno + 1);
            continue;
        }
        have_vertex = true;
        auto find = [&](const char *name) -> std::optional<std::size_t> {
            for (std::size_t i = 0; i < el.props.size(); ++i)
                if (el.props[i] == name)
                    return i;
            return std::nullopt;
        };
        const auto ix = find("x"), iy = find("y"), iz = find("z");
        if (!ix || !iy || !iz)
            throw ParseError("vertex element needs x, y and z properties");
        for (const auto &p : el.props)
            if (p.empty())
                throw ParseError("list properties on vertices are not supported");
        const auto ired = find("red");
        const bool color_is_byte = ired && detail::is_integral(el.types[*ired]);

        cloud.points.reserve(el.count);
        std::vector<double> vals(el.props.size());
        for (std::size_t i = 0; i < el.count; ++i)
        {
            if (!next_line())
                throw ParseError("header declares " + std::to_string(el.count) + " vertices but the body has " +
                                     std::to_string(i),
                                 lineno + 1);
            const auto tok = io::tokens(line);
            if (tok.size() != el.props.size())
                throw ParseError("expected " + std::to_string(el.props.size()) + " values, found " +
                                     std::to_string(tok.size()),
                                 lineno);
            for (std::size_t j = 0; j < tok.size(); ++j)
                vals[j] = io::parse_double(tok[j], lineno);
            auto get = [&](const char *name) -> std::optional<double> {
                if (auto k = find(name))
                    return vals[*k];
                return std::nullopt;
            };
            cloud.points.push_back(detail::make_record(get, color_is_byte, lineno));
        }
    }
    if (!have_vertex)
        throw ParseError("no vertex element");
    while (next_line())
        if (!io::trim(line).empty())
            throw ParseError("unexpected data after the declared elements", lineno);
    return cloud;
}

// ASCII PLY writer: double coordinates in shortest exact form, byte colors, normals only
// when every point carries one.
inline void save_ply(const std::filesystem::path &path, const PointCloud &cloud)
{
    auto out = io::open_out(path);
    const bool normals = !cloud.empty() && std::all_of(cloud.points.begin(), cloud.points.end(),
                                                        [](const PointRecord &p) { return p.normal.has_value(); });
    out << "ply\nformat ascii 1.0\n";
    if (!cloud.source_id.empty())
        out << "comment source " << cloud.source_id << '\n';
    out << "element vertex " << cloud.size() << '\n';
    out << "property double x\nproperty double y\nproperty double z\n";
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    if (normals)
        out << "property double nx\nproperty double ny\nproperty double nz\n";
    out << "end_header\n";
    for (const auto &p : cloud.points)
    {
        out << io::fmt_exact(p.position.x()) << ' ' << io::fmt_exact(p.position.y()) << ' '
            << io::fmt_exact(p.position.z());
        for (int c = 0; c < 3; ++c)
            out << ' ' << static_cast<int>(std::lround(std::clamp(p.color[c], 0.0, 1.0) * 255.0));
        if (normals)
            out << ' ' << io::fmt_exact(p.normal->x()) << ' ' << io::fmt_exact(p.normal->y()) << ' '
                << io::fmt_exact(p.normal->z());
        out << '\n';
    }
    io::finish(out, path);
}

// CSV points: header naming a subset of x,y,z,r,g,b,nx,ny,nz (x,y,z required). Colors are
// 0..255 like PLY bytes; blank normal cells mean "no normal".
inline PointCloud load_points_csv(const std::filesystem::path &path)
{
    auto in = io::open_in(path);
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line))
        throw ParseError("point CSV is empty", 1);
    ++lineno;
    const auto header = io::split(line, ',');
    std::vector<std::string> names;
    for (auto h : header)
    {
        std::string n(h);
        if (n == "r")
            n = "red";
        else if (n == "g")
            n = "green";
        else if (n == "b")
            n = "blue";
        if (n != "x" && n != "y" && n != "z" && n != "red" && n != "green" && n != "blue" && n != "nx" &&
            n != "ny" && n != "nz")
            throw ParseError("unknown column '" + std::string(h) + "'", lineno);
        names.push_back(n);
    }
    auto col = [&](const char *name) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name)
                return i;
        return std::nullopt;
    };
    if (!col("x") || !col("y") || !col("z"))
        throw ParseError("point CSV needs x, y and z columns", lineno);

    PointCloud cloud;
    cloud.source_id = path.filename().string();
    while (std::getline(in, line))
    {
        ++lineno;
        if (io::trim(line).empty())
            continue;
        const auto cells = io::split(line, ',');
        if (cells.size() != names.size())
            throw ParseError("expected " + std::to_string(names.size()) + " fields", lineno);
        auto get = [&](const char *name) -> std::optional<double> {
            const auto c = col(name);
            if (!c || cells[*c].empty())
                return std::nullopt;
            return io::parse_double(cells[*c], lineno);
        };
        if (!get("x") || !get("y") || !get("z"))
            throw ParseError("missing coordinate", lineno);
        cloud.points.push_back(detail::make_record(get, true, lineno));
    }
    return cloud;
}

// Dispatches on the extension: .csv is read as CSV, anything else as PLY.
inline PointCloud load_points(const std::filesystem::path &path)
{
    if (path.extension() == ".csv")
        return load_points_csv(path);
    return load_ply(path);
}

} // namespace ckm

#endif
