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

#ifndef CKM_SYNTHLAB_HPP
#define CKM_SYNTHLAB_HPP

#include "ckm/core.hpp"
#include "ckm/keyvalue.hpp"
#include "ckm/pointcloud.hpp"
#include "ckm/selector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

// Synthetic scenes with an exact channel oracle: the LoS path plus single-bounce specular
// reflections off finite rectangular planes (image method), attenuated by box blockers.
// Scenes are sampled into point clouds so the estimator sees the same data layout as it
// would for a measured site.

namespace ckm
{

// Rectangle corner + s * edge_u + t * edge_v, s, t in [0,1]. Its normal is
// edge_u x edge_v normalised.
struct Reflector
{
    std::string name;
    Vec3 corner = Vec3::Zero();
    Vec3 edge_u = Vec3::UnitX();
    Vec3 edge_v = Vec3::UnitY();
    double reflectance = 1.0; // amplitude factor, [0,1]
    Vec3 color = Vec3::Constant(0.5);

    Vec3 normal() const { return edge_u.cross(edge_v).normalized(); }
    double area() const { return edge_u.cross(edge_v).norm(); }
};

// Axis-aligned box. Every path leg that crosses it is scaled by `attenuation`.
struct Blocker
{
    std::string name;
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Ones();
    double attenuation = 0.0;
    Vec3 color = Vec3::Constant(0.5);
};

struct SynthScene
{
    Vec3 tx = Vec3::Zero();
    std::vector<Reflector> reflectors;
    std::vector<Blocker> blockers;
    double sampling_density = 1.0; // points per square metre
    std::uint64_t seed = 1;

    void validate() const
    {
        if (!tx.allFinite())
            throw std::invalid_argument("SynthScene: transmitter must be finite.");
        if (!(sampling_density > 0.0))
            throw std::invalid_argument("SynthScene: sampling density must be positive.");
        for (const auto &r : reflectors)
        {
            if (!(r.edge_u.cross(r.edge_v).norm() > 1e-12 * r.edge_u.norm() * r.edge_v.norm()) ||
                !(r.edge_u.norm() > 0.0) || !(r.edge_v.norm() > 0.0))
                throw std::invalid_argument("SynthScene: reflector '" + r.name + "' is degenerate.");
            if (!(r.reflectance >= 0.0 && r.reflectance <= 1.0))
                throw std::invalid_argument("SynthScene: reflectance of '" + r.name + "' outside [0,1].");
        }
        for (const auto &b : blockers)
        {
            if (!((b.hi.array() > b.lo.array()).all()))
                throw std::invalid_argument("SynthScene: blocker '" + b.name + "' has empty extent.");
            if (!(b.attenuation >= 0.0 && b.attenuation <= 1.0))
                throw std::invalid_argument("SynthScene: attenuation of '" + b.name + "' outside [0,1].");
        }
    }
};

enum class PathKind
{
    los,
    single_reflection
};

struct GroundTruthPath
{
    PathKind kind = PathKind::los;
    double length = 0.0;
    double amplitude = 0.0;
    std::optional<std::size_t> reflector_id;
    Vec3 interaction = Vec3::Zero(); // specular point for reflections
    std::optional<std::size_t> bin;  // none when beyond the last delay bin
};

struct OracleResult
{
    Pdp pdp;
    std::vector<GroundTruthPath> paths;
};

// ---------------------------------------------------------------------------
// Geometry helpers

// True when the closed segment a-b touches the box.
inline bool segment_hits_box(const Vec3 &a, const Vec3 &b, const Vec3 &lo, const Vec3 &hi)
{
    double t0 = 0.0, t1 = 1.0;
    const Vec3 d = b - a;
    for (int i = 0; i < 3; ++i)
    {
        if (d[i] == 0.0)
        {
            if (a[i] < lo[i] || a[i] > hi[i])
                return false;
            continue;
        }
        double ta = (lo[i] - a[i]) / d[i];
        double tb = (hi[i] - a[i]) / d[i];
        if (ta > tb)
            std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1)
            return false;
    }
    return true;
}

// Product of blocker factors along the segment a-b. Endpoints are taken in lexicographic
// order so the result does not depend on the direction of travel.
inline double leg_attenuation(const SynthScene &scene, const Vec3 &a, const Vec3 &b)
{
    const bool swap = std::lexicographical_compare(b.data(), b.data() + 3, a.data(), a.data() + 3);
    const Vec3 &p = swap ? b : a;
    const Vec3 &q = swap ? a : b;
    double f = 1.0;
    for (const auto &bl : scene.blockers)
        if (segment_hits_box(p, q, bl.lo, bl.hi))
            f *= bl.attenuation;
    return f;
}

// Free-space amplitude c / (4 pi f d) with unit-gain antennas.
inline double free_space_amplitude(double length, const ChannelConfig &cfg)
{
    return cfg.speed_of_light / (4.0 * std::numbers::pi * cfg.carrier_frequency * length);
}

// Specular point of the single bounce a -> plane -> b, if both endpoints lie strictly on
// the same side and the point falls inside the rectangle. Symmetric in a and b.
inline std::optional<Vec3> specular_point(const Reflector &r, const Vec3 &a, const Vec3 &b)
{
    const Vec3 n = r.normal();
    const double sa = n.dot(a - r.corner);
    const double sb = n.dot(b - r.corner);
    if (!(sa * sb > 0.0))
        return std::nullopt;
    const double da = std::abs(sa), db = std::abs(sb);
    const Vec3 fa = a - sa * n; // feet on the plane
    const Vec3 fb = b - sb * n;
    const Vec3 s = (db * fa + da * fb) / (da + db);

    // Rectangle coordinates from the 2x2 Gram system.
    const Vec3 rel = s - r.corner;
    const double uu = r.edge_u.dot(r.edge_u), uv = r.edge_u.dot(r.edge_v), vv = r.edge_v.dot(r.edge_v);
    const double ru = rel.dot(r.edge_u), rv = rel.dot(r.edge_v);
    const double det = uu * vv - uv * uv;
    const double su = (ru * vv - rv * uv) / det;
    const double sv = (rv * uu - ru * uv) / det;
    if (su < 0.0 || su > 1.0 || sv < 0.0 || sv > 1.0)
        return std::nullopt;
    return s;
}

// ---------------------------------------------------------------------------
// Scene sampling

inline std::size_t surface_point_count(double area, double density)
{
    return static_cast<std::size_t>(std::llround(area * density));
}

// Seeded uniform sampling of every reflector and every blocker face. Points carry the
// surface color and its normal (reflector normal; outward normal for box faces).
inline PointCloud sample_scene_cloud(const SynthScene &scene)
{
    scene.validate();
    PointCloud cloud;
    cloud.source_id = "synthetic";
    std::mt19937_64 rng(scene.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    auto sample_rect = [&](const Vec3 &corner, const Vec3 &eu, const Vec3 &ev, const Vec3 &normal,
                           const Vec3 &color) {
        const std::size_t n = surface_point_count(eu.cross(ev).norm(), scene.sampling_density);
        for (std::size_t i = 0; i < n; ++i)
        {
            const double s = unit(rng);
            const double t = unit(rng);
            cloud.points.push_back({corner + s * eu + t * ev, color, normal});
        }
    };

    for (const auto &r : scene.reflectors)
        sample_rect(r.corner, r.edge_u, r.edge_v, r.normal(), r.color);
    for (const auto &b : scene.blockers)
    {
        const Vec3 e = b.hi - b.lo;
        const Vec3 ex(e.x(), 0, 0), ey(0, e.y(), 0), ez(0, 0, e.z());
        sample_rect(b.lo, ey, ez, -Vec3::UnitX(), b.color);
        sample_rect(b.lo + ex, ey, ez, Vec3::UnitX(), b.color);
        sample_rect(b.lo, ex, ez, -Vec3::UnitY(), b.color);
        sample_rect(b.lo + ey, ex, ez, Vec3::UnitY(), b.color);
        sample_rect(b.lo, ex, ey, -Vec3::UnitZ(), b.color);
        sample_rect(b.lo + ez, ex, ey, Vec3::UnitZ(), b.color);
    }
    return cloud;
}

// ---------------------------------------------------------------------------
// Channel oracle

inline std::vector<GroundTruthPath> trace_paths(const SynthScene &scene, const Vec3 &tx, const Vec3 &rx,
                                                const ChannelConfig &cfg)
{
    const LinkGeometry geom(tx, rx);
    const auto grid = toa_grid(geom.d0(), cfg);
    std::vector<GroundTruthPath> paths;

    GroundTruthPath los;
    los.kind = PathKind::los;
    los.length = geom.d0();
    los.amplitude = free_space_amplitude(los.length, cfg) * leg_attenuation(scene, tx, rx);
    los.interaction = 0.5 * (tx + rx);
    los.bin = bin_of_length(los.length, grid);
    paths.push_back(los);

    for (std::size_t i = 0; i < scene.reflectors.size(); ++i)
    {
        const auto &r = scene.reflectors[i];
        const auto sp = specular_point(r, tx, rx);
        if (!sp)
            continue;
        GroundTruthPath p;
        p.kind = PathKind::single_reflection;
        p.reflector_id = i;
        p.interaction = *sp;
        p.length = geom.path_sum(*sp);
        const double legs = leg_attenuation(scene, tx, *sp) * leg_attenuation(scene, *sp, rx);
        p.amplitude = free_space_amplitude(p.length, cfg) * r.reflectance * legs;
        p.bin = bin_of_length(p.length, grid);
        paths.push_back(p);
    }
    return paths;
}

inline OracleResult oracle_pdp(const SynthScene &scene, const Vec3 &rx, const ChannelConfig &cfg)
{
    cfg.validate();
    if (rx == scene.tx)
        throw std::invalid_argument("oracle_pdp: receiver coincides with the transmitter.");
    OracleResult res;
    res.paths = trace_paths(scene, scene.tx, rx, cfg);
    std::vector<double> power(cfg.pdp_length, 0.0);
    for (const auto &p : res.paths)
        if (p.bin)
            power[*p.bin] += p.amplitude * p.amplitude;
    std::vector<double> gains(cfg.pdp_length);
    for (std::size_t k = 0; k < gains.size(); ++k)
        gains[k] = std::sqrt(power[k]);
    const double d0 = (rx - scene.tx).norm();
    res.pdp = Pdp(gains, cfg, d0 / cfg.speed_of_light);
    return res;
}

struct SynthDataset
{
    PointCloud cloud;
    ObservationSet observations;
    std::vector<std::vector<GroundTruthPath>> paths;
    std::vector<RegionAssignment> partitions;
};

inline SynthDataset generate_dataset(const SynthScene &scene, const std::vector<Vec3> &rx_locations,
                                     const ChannelConfig &cfg)
{
    {
        std::set<std::array<double, 3>> seen;
        for (const auto &x : rx_locations)
        {
            if (!seen.insert({x.x(), x.y(), x.z()}).second)
                throw std::invalid_argument("generate_dataset: duplicate receiver location.");
            if (x == scene.tx)
                throw std::invalid_argument("generate_dataset: receiver coincides with the transmitter.");
        }
    }
    SynthDataset ds;
    ds.cloud = sample_scene_cloud(scene);
    for (const auto &x : rx_locations)
    {
        auto res = oracle_pdp(scene, x, cfg);
        ds.observations.push_back({x, res.pdp});
        ds.paths.push_back(std::move(res.paths));
        ds.partitions.push_back(partition_cloud(ds.cloud, LinkGeometry(scene.tx, x), cfg));
    }
    return ds;
}

// Receiver positions drawn uniformly in the box [lo, hi], seeded, distinct.
inline std::vector<Vec3> random_locations(std::size_t count, const Vec3 &lo, const Vec3 &hi, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Vec3> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
    {
        const Vec3 p(lo.x() + unit(rng) * (hi.x() - lo.x()), lo.y() + unit(rng) * (hi.y() - lo.y()),
                     lo.z() + unit(rng) * (hi.z() - lo.z()));
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scene files
//
//   tx = x y z
//   density = <points per m^2>
//   seed = <integer>
//   plane.<name>.corner / .edge_u / .edge_v = x y z
//   plane.<name>.reflectance = <0..1>
//   plane.<name>.color = r g b            (0..1, optional)
//   box.<name>.min / .max = x y z
//   box.<name>.attenuation = <0..1>
//   box.<name>.color = r g b              (optional)
//
// Surfaces keep the order in which their names first appear.

inline SynthScene parse_scene(const KeyValueFile &kv)
{
    SynthScene scene;
    std::vector<std::string> planes, boxes;
    for (const auto &e : kv.entries())
    {
        const auto parts = io::split(e.key, '.');
        if (parts.size() == 1)
        {
            if (e.key != "tx" && e.key != "density" && e.key != "seed")
                throw ConfigError(kv.where(e) + ": unknown scene key '" + e.key + "'");
            continue;
        }
        if (parts.size() != 3 || (parts[0] != "plane" && parts[0] != "box"))
            throw ConfigError(kv.where(e) + ": unknown scene key '" + e.key + "'");
        const std::string name(parts[1]);
        const std::string field(parts[2]);
        auto &names = parts[0] == "plane" ? planes : boxes;
        static const std::set<std::string> plane_fields{"corner", "edge_u", "edge_v", "reflectance", "color"};
        static const std::set<std::string> box_fields{"min", "max", "attenuation", "color"};
        if (!(parts[0] == "plane" ? plane_fields : box_fields).count(field))
            throw ConfigError(kv.where(e) + ": unknown scene key '" + e.key + "'");
        if (std::find(names.begin(), names.end(), name) == names.end())
            names.push_back(name);
    }

    scene.tx = kv.get_vec3("tx");
    scene.sampling_density = kv.get_double("density");
    scene.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
    for (const auto &n : planes)
    {
        const std::string p = "plane." + n + ".";
        Reflector r;
        r.name = n;
        r.corner = kv.get_vec3(p + "corner");
        r.edge_u = kv.get_vec3(p + "edge_u");
        r.edge_v = kv.get_vec3(p + "edge_v");
        r.reflectance = kv.get_double(p + "reflectance");
        if (kv.has(p + "color"))
            r.color = kv.get_vec3(p + "color");
        scene.reflectors.push_back(r);
    }
    for (const auto &n : boxes)
    {
        const std::string p = "box." + n + ".";
        Blocker b;
        b.name = n;
        b.lo = kv.get_vec3(p + "min");
        b.hi = kv.get_vec3(p + "max");
        b.attenuation = kv.get_double(p + "attenuation");
        if (kv.has(p + "color"))
            b.color = kv.get_vec3(p + "color");
        scene.blockers.push_back(b);
    }
    try
    {
        scene.validate();
    }
    catch (const std::invalid_argument &ex)
    {
        throw ConfigError(kv.origin() + ": " + ex.what());
    }
    return scene;
}

inline SynthScene load_scene(const std::filesystem::path &path) { return parse_scene(KeyValueFile::load(path)); }

inline void save_paths_csv(const std::filesystem::path &path, const std::vector<std::vector<GroundTruthPath>> &paths)
{
    auto out = io::open_out(path);
    out << "location,kind,reflector,length,amplitude,bin,ix,iy,iz\n";
    for (std::size_t l = 0; l < paths.size(); ++l)
        for (const auto &p : paths[l])
        {
            out << l << ',' << (p.kind == PathKind::los ? "los" : "reflection") << ','
                << (p.reflector_id ? std::to_string(*p.reflector_id) : std::string()) << ','
                << io::fmt_exact(p.length) << ',' << io::fmt_exact(p.amplitude) << ','
                << (p.bin ? std::to_string(*p.bin) : std::string()) << ',' << io::fmt_exact(p.interaction.x())
                << ',' << io::fmt_exact(p.interaction.y()) << ',' << io::fmt_exact(p.interaction.z()) << '\n';
        }
    io::finish(out, path);
}

} // namespace ckm

#endif
