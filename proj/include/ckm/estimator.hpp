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

#ifndef CKM_ESTIMATOR_HPP
#define CKM_ESTIMATOR_HPP

#include "ckm/core.hpp"
#include "ckm/error.hpp"
#include "ckm/nn.hpp"
#include "ckm/pointcloud.hpp"
#include "ckm/selector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

// Channel gain estimator: maps the points of one arriving region to the gain of its delay
// bin. Two set-abstraction levels (farthest point sampling, kNN grouping, shared MLP,
// max pooling), a PointNet encoder with global max pooling, and an MLP head with a
// softplus output.

namespace ckm
{

// ---------------------------------------------------------------------------
// Input representation

enum class FeatureSet
{
    full,        // color, normal, distances, incidence/outgoing cosines, normal flag
    coords_color // color only
};

inline std::size_t feature_channels(FeatureSet fs) { return fs == FeatureSet::full ? 11 : 3; }

inline std::string to_string(FeatureSet fs) { return fs == FeatureSet::full ? "full" : "coords_color"; }

inline FeatureSet parse_feature_set(std::string_view s)
{
    if (s == "full")
        return FeatureSet::full;
    if (s == "coords_color")
        return FeatureSet::coords_color;
    throw std::invalid_argument("unknown feature set '" + std::string(s) + "'");
}

// N x (3 + C) rows: link-frame coordinates followed by C feature channels. Rows past
// presence_count repeat genuine rows. An empty set (presence_count 0) has no rows.
struct FeaturizedSet
{
    nn::Matrix rows;
    std::size_t presence_count = 0;
    FeatureSet features = FeatureSet::full;

    bool empty() const { return presence_count == 0; }
};

namespace detail
{
inline bool row_less(const nn::Matrix &m, Eigen::Index a, Eigen::Index b)
{
    for (Eigen::Index c = 0; c < m.cols(); ++c)
    {
        if (m(a, c) < m(b, c))
            return true;
        if (m(b, c) < m(a, c))
            return false;
    }
    return false;
}

inline bool row_equal(const nn::Matrix &m, Eigen::Index a, Eigen::Index b) { return m.row(a) == m.row(b); }

inline std::vector<Eigen::Index> sorted_row_order(const nn::Matrix &m)
{
    std::vector<Eigen::Index> order(static_cast<std::size_t>(m.rows()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return row_less(m, a, b); });
    return order;
}
} // namespace detail

// Expresses a region subset in the link frame, attaches the propagation features and fixes
// the row count to n (seeded downsampling of the canonically ordered rows, or cyclic
// padding).
inline FeaturizedSet build_input(const PointCloud &subset, const LinkGeometry &geom, std::size_t n, std::uint64_t seed,
                                 FeatureSet fs = FeatureSet::full)
{
    if (n < 1)
        throw std::invalid_argument("build_input: n must be at least 1.");
    FeaturizedSet out;
    out.features = fs;
    if (subset.empty())
        return out;

    const auto frame = framing(geom);
    const auto width = static_cast<Eigen::Index>(3 + feature_channels(fs));
    nn::Matrix all(static_cast<Eigen::Index>(subset.size()), width);
    for (std::size_t i = 0; i < subset.size(); ++i)
    {
        const auto &p = subset.points[i];
        const auto r = static_cast<Eigen::Index>(i);
        all.block<1, 3>(r, 0) = frame.apply(p.position).transpose();
        all.block<1, 3>(r, 3) = p.color.transpose();
        if (fs == FeatureSet::full)
        {
            const auto f = link_features(p, geom);
            const Vec3 n = p.normal ? frame.rotate(*p.normal) : Vec3::Zero();
            all.block<1, 3>(r, 6) = n.transpose();
            all(r, 9) = f.dist_tx;
            all(r, 10) = f.dist_rx;
            all(r, 11) = f.cos_incident;
            all(r, 12) = f.cos_outgoing;
            all(r, 13) = f.normal_valid;
        }
    }
    const auto order = detail::sorted_row_order(all);
    const auto pick = fixed_cardinality_indices(subset.size(), n, seed);
    out.rows.resize(static_cast<Eigen::Index>(n), width);
    for (std::size_t i = 0; i < n; ++i)
        out.rows.row(static_cast<Eigen::Index>(i)) = all.row(order[pick[i]]);
    out.presence_count = std::min(subset.size(), n);
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct SetAbstractionConfig
{
    std::size_t n_sample = 1;
    std::size_t k_neighbors = 1;
    std::vector<std::size_t> mlp_widths;
};

struct NetworkConfig
{
    std::size_t n_input = 512;
    SetAbstractionConfig sa1{128, 16, {32, 64}};
    SetAbstractionConfig sa2{32, 8, {64, 128}};
    std::size_t encoder_width = 256;
    std::vector<std::size_t> head_widths{128, 64};
    double dropout_rate = 0.3;
    bool batchnorm_enabled = true;
    FeatureSet features = FeatureSet::full;

    std::size_t feature_dim() const { return feature_channels(features); }

    void validate() const
    {
        auto widths_ok = [](const std::vector<std::size_t> &w) {
            return !w.empty() && std::all_of(w.begin(), w.end(), [](std::size_t v) { return v > 0; });
        };
        if (!(n_input >= sa1.n_sample && sa1.n_sample >= sa2.n_sample && sa2.n_sample >= 1))
            throw std::invalid_argument("NetworkConfig: need N >= N1 >= N2 >= 1.");
        if (sa1.k_neighbors < 1 || sa1.k_neighbors > n_input)
            throw std::invalid_argument("NetworkConfig: need 1 <= K1 <= N.");
        if (sa2.k_neighbors < 1 || sa2.k_neighbors > sa1.n_sample)
            throw std::invalid_argument("NetworkConfig: need 1 <= K2 <= N1.");
        if (!widths_ok(sa1.mlp_widths) || !widths_ok(sa2.mlp_widths) || encoder_width == 0 ||
            !std::all_of(head_widths.begin(), head_widths.end(), [](std::size_t v) { return v > 0; }))
            throw std::invalid_argument("NetworkConfig: layer widths must be positive.");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw std::invalid_argument("NetworkConfig: dropout rate must lie in [0, 1).");
    }
};

// Scale on which gains are regressed. Both scales put the noise floor at 1:
//   decibel: v = (20 log10(alpha) - floor_db) / db_per_unit + 1
//   linear:  v = alpha / floor
enum class TargetScale
{
    decibel,
    linear
};

struct GainDomain
{
    TargetScale scale = TargetScale::decibel;
    double floor_linear = 1e-5;
    double db_per_unit = 10.0;

    double to_domain(double alpha) const
    {
        if (scale == TargetScale::linear)
            return alpha / floor_linear;
        if (!(alpha > 0.0))
            return -std::numeric_limits<double>::infinity();
        return (to_db(alpha, Scale::amplitude) - to_db(floor_linear, Scale::amplitude)) / db_per_unit + 1.0;
    }

    double to_linear(double v) const
    {
        if (scale == TargetScale::linear)
            return v * floor_linear;
        return from_db((v - 1.0) * db_per_unit + to_db(floor_linear, Scale::amplitude), Scale::amplitude);
    }
};

struct TrainingConfig
{
    double learning_rate = 0.01;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    double split_fraction = 0.8;
    std::uint64_t seed = 1;
    double alpha_min_linear = 1e-5;

    void validate() const
    {
        if (!(split_fraction > 0.0 && split_fraction < 1.0))
            throw std::invalid_argument("TrainingConfig: split fraction must lie in (0, 1).");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
            throw std::invalid_argument("TrainingConfig: learning rate must be non-negative.");
        if (batch_size < 1)
            throw std::invalid_argument("TrainingConfig: batch size must be at least 1.");
        if (!(alpha_min_linear > 0.0))
            throw std::invalid_argument("TrainingConfig: alpha_min must be positive.");
    }
};

// Per-channel input standardisation, fitted on training inputs. Coordinates share one
// isotropic scale so distances keep their ratios.
struct Normalizer
{
    double coord_scale = 1.0;
    nn::Vector mean;
    nn::Vector stddev;
};

// ---------------------------------------------------------------------------
// Model

struct EstimatorModel
{
    struct Layout
    {
        nn::SharedMlp sa1;
        nn::SharedMlp sa2;
        nn::SharedMlp encoder;
        std::vector<nn::Dense> head;
        std::vector<nn::BatchNorm> head_bn; // empty when batch norm is disabled
        nn::Dense out;
        std::size_t size = 0;
    };

    NetworkConfig config;
    std::uint64_t rng_seed = 1;
    GainDomain domain;
    Normalizer normalizer;
    std::vector<double> params;
    std::vector<nn::BatchNorm::Stats> bn_stats;
    Layout layout;

    EstimatorModel() = default;

    EstimatorModel(const NetworkConfig &cfg, std::uint64_t seed, const GainDomain &dom)
        : config(cfg), rng_seed(seed), domain(dom)
    {
        config.validate();
        layout = make_layout(config);
        const auto C = static_cast<Eigen::Index>(config.feature_dim());
        normalizer.mean = nn::Vector::Zero(C);
        normalizer.stddev = nn::Vector::Ones(C);
        params.assign(layout.size, 0.0);
        bn_stats.clear();
        for (const auto &bn : layout.head_bn)
            bn_stats.push_back({nn::Vector::Zero(static_cast<Eigen::Index>(bn.dim)),
                                nn::Vector::Ones(static_cast<Eigen::Index>(bn.dim))});
        initialize();
    }

    static Layout make_layout(const NetworkConfig &cfg)
    {
        Layout l;
        std::size_t off = 0;
        auto dense = [&](std::size_t in, std::size_t out) {
            nn::Dense d{in, out, off, off + in * out};
            off += d.size();
            return d;
        };
        auto mlp = [&](std::size_t in, const std::vector<std::size_t> &widths) {
            nn::SharedMlp m;
            for (auto w : widths)
            {
                m.layers.push_back(dense(in, w));
                in = w;
            }
            return m;
        };
        l.sa1 = mlp(3 + cfg.feature_dim(), cfg.sa1.mlp_widths);
        l.sa2 = mlp(3 + l.sa1.out(), cfg.sa2.mlp_widths);
        l.encoder = mlp(3 + l.sa2.out(), {cfg.encoder_width});
        std::size_t in = cfg.encoder_width;
        for (auto w : cfg.head_widths)
        {
            l.head.push_back(dense(in, w));
            if (cfg.batchnorm_enabled)
            {
                nn::BatchNorm bn{w, off, off + w};
                off += bn.size();
                l.head_bn.push_back(bn);
            }
            in = w;
        }
        l.out = dense(in, 1);
        l.size = off;
        return l;
    }

    // He-normal weights, zero biases, unit BN scale. The output bias starts at
    // softplus^-1(2), one unit above the noise floor.
    void initialize()
    {
        std::mt19937_64 rng(rng_seed);
        auto fill = [&](const nn::Dense &d, double gain) {
            std::normal_distribution<double> nd(0.0, gain * std::sqrt(2.0 / static_cast<double>(d.in)));
            auto W = d.weight(std::span<double>(params));
            for (Eigen::Index j = 0; j < W.cols(); ++j)
                for (Eigen::Index i = 0; i < W.rows(); ++i)
                    W(i, j) = nd(rng);
            d.bias(std::span<double>(params)).setZero();
        };
        for (const auto &d : layout.sa1.layers)
            fill(d, 1.0);
        for (const auto &d : layout.sa2.layers)
            fill(d, 1.0);
        for (const auto &d : layout.encoder.layers)
            fill(d, 1.0);
        for (const auto &d : layout.head)
            fill(d, 1.0);
        for (const auto &bn : layout.head_bn)
            for (std::size_t i = 0; i < bn.dim; ++i)
            {
                params[bn.gamma + i] = 1.0;
                params[bn.beta + i] = 0.0;
            }
        fill(layout.out, 0.1);
        params[layout.out.b] = nn::softplus_inverse(2.0);
    }

    std::size_t parameter_count() const { return params.size(); }
};

// Fits the normaliser on the genuine rows of the given inputs.
inline void fit_normalizer(EstimatorModel &model, std::span<const FeaturizedSet> inputs)
{
    const auto C = static_cast<Eigen::Index>(model.config.feature_dim());
    double sq = 0.0;
    std::size_t rows = 0;
    nn::Vector sum = nn::Vector::Zero(C), sum2 = nn::Vector::Zero(C);
    for (const auto &x : inputs)
    {
        if (!x.empty() && x.rows.cols() != 3 + C)
            throw std::invalid_argument("fit_normalizer: input width does not match the network.");
        for (std::size_t r = 0; r < x.presence_count; ++r)
        {
            const auto row = x.rows.row(static_cast<Eigen::Index>(r));
            sq += row.head<3>().squaredNorm();
            sum += row.tail(C).transpose();
            sum2 += row.tail(C).transpose().cwiseAbs2();
        }
        rows += x.presence_count;
    }
    Normalizer n;
    n.mean = nn::Vector::Zero(C);
    n.stddev = nn::Vector::Ones(C);
    if (rows > 0)
    {
        const double r = static_cast<double>(rows);
        const double rms = std::sqrt(sq / (3.0 * r));
        n.coord_scale = rms > 1e-12 ? rms : 1.0;
        n.mean = sum / r;
        for (Eigen::Index c = 0; c < C; ++c)
        {
            const double var = std::max(0.0, sum2(c) / r - n.mean(c) * n.mean(c));
            n.stddev(c) = var > 1e-12 ? std::sqrt(var) : 1.0;
        }
    }
    model.normalizer = n;
}

// ---------------------------------------------------------------------------
// Forward / backward

// Parameter-independent part of a forward pass: normalised, sorted, de-duplicated rows and
// the sampling/grouping structure of both abstraction levels.
struct PreparedInput
{
    std::size_t points = 0; // distinct rows
    nn::Matrix g1;          // (m1 k1) x (3 + C): center-relative coords | features
    std::size_t m1 = 0, k1 = 0;
    nn::Matrix rel2; // (m2 k2) x 3
    std::vector<Eigen::Index> gather2; // level-1 row feeding each level-2 grouped row
    std::size_t m2 = 0, k2 = 0;
    nn::Matrix xyz2; // m2 x 3
};

inline PreparedInput prepare(const EstimatorModel &model, const FeaturizedSet &x)
{
    if (x.empty())
        throw std::invalid_argument("estimator: empty input set; use the masked path.");
    const auto C = static_cast<Eigen::Index>(model.config.feature_dim());
    if (x.rows.cols() != 3 + C)
        throw std::invalid_argument("estimator: input width does not match the network.");

    // Canonical order makes the pass a function of the row set; duplicates carry no
    // information for max pooling, so padding is inert.
    const auto order = detail::sorted_row_order(x.rows);
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < order.size(); ++i)
        if (i == 0 || !detail::row_equal(x.rows, order[i], order[i - 1]))
            keep.push_back(order[i]);

    const auto n = static_cast<Eigen::Index>(keep.size());
    const auto &nz = model.normalizer;
    std::vector<Vec3> xyz(keep.size());
    nn::Matrix feats(n, C);
    for (Eigen::Index i = 0; i < n; ++i)
    {
        const auto row = x.rows.row(keep[static_cast<std::size_t>(i)]);
        xyz[static_cast<std::size_t>(i)] = row.head<3>().transpose() / nz.coord_scale;
        feats.row(i) = ((row.tail(C).transpose() - nz.mean).array() / nz.stddev.array()).transpose();
    }

    PreparedInput p;
    p.points = keep.size();
    p.m1 = std::min(model.config.sa1.n_sample, p.points);
    p.k1 = std::min(model.config.sa1.k_neighbors, p.points);
    const auto c1 = farthest_point_sample(xyz, p.m1);
    const auto grp1 = knn_group(xyz, c1, p.k1);
    p.g1.resize(static_cast<Eigen::Index>(p.m1 * p.k1), 3 + C);
    for (std::size_t c = 0; c < p.m1; ++c)
        for (std::size_t j = 0; j < p.k1; ++j)
        {
            const auto r = static_cast<Eigen::Index>(c * p.k1 + j);
            const auto src = grp1[c][j];
            p.g1.block<1, 3>(r, 0) = (xyz[src] - xyz[c1[c]]).transpose();
            p.g1.row(r).tail(C) = feats.row(static_cast<Eigen::Index>(src));
        }

    std::vector<Vec3> xyz1(p.m1);
    for (std::size_t c = 0; c < p.m1; ++c)
        xyz1[c] = xyz[c1[c]];
    p.m2 = std::min(model.config.sa2.n_sample, p.m1);
    p.k2 = std::min(model.config.sa2.k_neighbors, p.m1);
    const auto c2 = farthest_point_sample(xyz1, p.m2);
    const auto grp2 = knn_group(xyz1, c2, p.k2);
    p.rel2.resize(static_cast<Eigen::Index>(p.m2 * p.k2), 3);
    p.gather2.resize(p.m2 * p.k2);
    p.xyz2.resize(static_cast<Eigen::Index>(p.m2), 3);
    for (std::size_t c = 0; c < p.m2; ++c)
    {
        p.xyz2.row(static_cast<Eigen::Index>(c)) = xyz1[c2[c]].transpose();
        for (std::size_t j = 0; j < p.k2; ++j)
        {
            const auto r = c * p.k2 + j;
            p.rel2.row(static_cast<Eigen::Index>(r)) = (xyz1[grp2[c][j]] - xyz1[c2[c]]).transpose();
            p.gather2[r] = static_cast<Eigen::Index>(grp2[c][j]);
        }
    }
    return p;
}

namespace detail
{
struct TrunkCache
{
    nn::SharedMlp::Cache sa1, sa2, enc;
    std::vector<Eigen::Index> arg1, arg2, arg3;
    Eigen::Index h1_rows = 0, h2_rows = 0, h3_rows = 0;
};

inline void hash_mix(std::uint64_t &h, std::uint64_t v)
{
    h ^= v + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
}

inline void hash_masks(std::uint64_t &h, const nn::SharedMlp::Cache &c)
{
    for (std::size_t l = 1; l < c.acts.size(); ++l)
        for (Eigen::Index i = 0; i < c.acts[l].size(); ++i)
            hash_mix(h, c.acts[l].data()[i] > 0.0);
}

inline void hash_args(std::uint64_t &h, const std::vector<Eigen::Index> &a)
{
    for (auto v : a)
        hash_mix(h, static_cast<std::uint64_t>(v));
}

// Set-abstraction trunk for one input; returns the C3-wide global feature.
inline nn::Matrix trunk_forward(const EstimatorModel &m, const PreparedInput &in, TrunkCache &c)
{
    const std::span<const double> p(m.params);
    const auto &L = m.layout;
    const nn::Matrix h1 = L.sa1.forward(p, in.g1, c.sa1);
    c.h1_rows = h1.rows();
    const nn::Matrix p1 = nn::group_max(h1, in.k1, c.arg1);

    const auto c1 = static_cast<Eigen::Index>(L.sa1.out());
    nn::Matrix g2(in.rel2.rows(), 3 + c1);
    g2.leftCols<3>() = in.rel2;
    for (Eigen::Index r = 0; r < g2.rows(); ++r)
        g2.row(r).tail(c1) = p1.row(in.gather2[static_cast<std::size_t>(r)]);
    const nn::Matrix h2 = L.sa2.forward(p, g2, c.sa2);
    c.h2_rows = h2.rows();
    const nn::Matrix p2 = nn::group_max(h2, in.k2, c.arg2);

    nn::Matrix e(p2.rows(), 3 + p2.cols());
    e.leftCols<3>() = in.xyz2;
    e.rightCols(p2.cols()) = p2;
    const nn::Matrix h3 = L.encoder.forward(p, e, c.enc);
    c.h3_rows = h3.rows();
    return nn::group_max(h3, static_cast<std::size_t>(h3.rows()), c.arg3);
}

inline void trunk_backward(const EstimatorModel &m, const PreparedInput &in, const TrunkCache &c,
                           const nn::Matrix &dglobal, std::span<double> grad)
{
    const std::span<const double> p(m.params);
    const auto &L = m.layout;
    const nn::Matrix dh3 = nn::group_max_backward(dglobal, c.h3_rows, c.arg3);
    const nn::Matrix de = L.encoder.backward(p, grad, c.enc, dh3);
    const auto c2 = static_cast<Eigen::Index>(L.sa2.out());
    const nn::Matrix dh2 = nn::group_max_backward(de.rightCols(c2), c.h2_rows, c.arg2);
    const nn::Matrix dg2 = L.sa2.backward(p, grad, c.sa2, dh2);
    const auto c1 = static_cast<Eigen::Index>(L.sa1.out());
    nn::Matrix dp1 = nn::Matrix::Zero(static_cast<Eigen::Index>(in.m1), c1);
    for (Eigen::Index r = 0; r < dg2.rows(); ++r)
        dp1.row(in.gather2[static_cast<std::size_t>(r)]) += dg2.row(r).tail(c1);
    const nn::Matrix dh1 = nn::group_max_backward(dp1, c.h1_rows, c.arg1);
    L.sa1.backward(p, grad, c.sa1, dh1, false);
}

struct HeadCache
{
    std::vector<nn::Matrix> inputs; // input of each hidden Dense, then of the output Dense
    std::vector<nn::Matrix> pre;    // post-BN, pre-ReLU activations
    std::vector<nn::BatchNorm::Cache> bn;
    std::vector<nn::Matrix> drop; // dropout multipliers (empty when inactive)
    nn::Vector z;                 // output pre-activation
};

inline nn::Vector head_forward(const EstimatorModel &m, const nn::Matrix &x, bool training, bool use_batch_stats,
                               std::mt19937_64 *rng, std::vector<nn::BatchNorm::Stats> &stats, HeadCache &c)
{
    const std::span<const double> p(m.params);
    const auto &L = m.layout;
    c = HeadCache{};
    nn::Matrix a = x;
    for (std::size_t l = 0; l < L.head.size(); ++l)
    {
        c.inputs.push_back(a);
        nn::Matrix z = L.head[l].forward(p, a);
        if (!L.head_bn.empty())
        {
            c.bn.emplace_back();
            z = L.head_bn[l].forward(p, z, stats[l], use_batch_stats, c.bn.back());
        }
        c.pre.push_back(z);
        a = z.cwiseMax(0.0);
        if (training && rng && m.config.dropout_rate > 0.0)
        {
            std::bernoulli_distribution keep(1.0 - m.config.dropout_rate);
            nn::Matrix mask(a.rows(), a.cols());
            for (Eigen::Index i = 0; i < mask.size(); ++i)
                mask.data()[i] = keep(*rng) ? 1.0 / (1.0 - m.config.dropout_rate) : 0.0;
            a = a.cwiseProduct(mask);
            c.drop.push_back(std::move(mask));
        }
        else
            c.drop.emplace_back();
    }
    c.inputs.push_back(a);
    c.z = L.out.forward(p, a).col(0);
    return c.z;
}

// dz: dL/d(output pre-activation), one entry per row. Returns dL/dx.
inline nn::Matrix head_backward(const EstimatorModel &m, const HeadCache &c, const nn::Vector &dz,
                                std::span<double> grad)
{
    const std::span<const double> p(m.params);
    const auto &L = m.layout;
    nn::Matrix d = L.out.backward(p, grad, c.inputs.back(), dz);
    for (std::size_t l = L.head.size(); l-- > 0;)
    {
        if (c.drop[l].size() > 0)
            d = d.cwiseProduct(c.drop[l]);
        d = d.cwiseProduct((c.pre[l].array() > 0.0).cast<double>().matrix());
        if (!L.head_bn.empty())
            d = L.head_bn[l].backward(p, grad, c.bn[l], d);
        d = L.head[l].backward(p, grad, c.inputs[l], d);
    }
    return d;
}
} // namespace detail

// Output on the training scale (softplus of the head), evaluation mode.
inline double forward_domain(const EstimatorModel &model, const PreparedInput &in)
{
    detail::TrunkCache tc;
    const nn::Matrix g = detail::trunk_forward(model, in, tc);
    auto stats = model.bn_stats;
    detail::HeadCache hc;
    const auto z = detail::head_forward(model, g, false, false, nullptr, stats, hc);
    return nn::softplus(z(0));
}

// Predicted gain (linear amplitude, >= 0) for a non-empty input set.
inline double forward(const EstimatorModel &model, const FeaturizedSet &input)
{
    return model.domain.to_linear(forward_domain(model, prepare(model, input)));
}

// ---------------------------------------------------------------------------
// Loss

struct LossSample
{
    const PreparedInput *input = nullptr; // may be null when masked
    double target = 0.0;                  // on the model's training scale
    bool mask = false;                    // false for empty regions
};

struct PassOptions
{
    bool training = false;                                 // batch-statistics BN + dropout
    std::mt19937_64 *rng = nullptr;                        // dropout source
    std::vector<nn::BatchNorm::Stats> *running = nullptr; // running BN stats to update
    bool signature = false;                                // hash of the piecewise-linear regime
};

struct LossResult
{
    double value = 0.0;
    std::vector<double> grad;
    std::size_t active = 0; // S'
    std::uint64_t signature = 0;
};

// Masked clamp-MSE: (1/S') sum_i I_i (t_i - max(t_min, y_i))^2 on the model's training
// scale, with t_min the image of alpha_min. Subgradient of the clamp: pass-through for
// y >= t_min, zero below. S' = 0 gives 0 with a zero gradient.
inline LossResult loss(const EstimatorModel &model, std::span<const LossSample> batch, double alpha_min_linear,
                       const PassOptions &opt = {})
{
    LossResult res;
    res.grad.assign(model.params.size(), 0.0);
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < batch.size(); ++i)
        if (batch[i].mask)
        {
            if (!batch[i].input)
                throw std::invalid_argument("loss: unmasked sample without input.");
            live.push_back(i);
        }
    res.active = live.size();
    if (live.empty())
        return res;

    const double t_min = model.domain.to_domain(alpha_min_linear);
    const auto B = static_cast<Eigen::Index>(live.size());
    std::vector<detail::TrunkCache> tcs(live.size());
    nn::Matrix g(B, static_cast<Eigen::Index>(model.config.encoder_width));
    for (std::size_t b = 0; b < live.size(); ++b)
        g.row(static_cast<Eigen::Index>(b)) = detail::trunk_forward(model, *batch[live[b]].input, tcs[b]);

    auto local = model.bn_stats;
    auto &stats = opt.running ? *opt.running : local;
    const bool batch_stats = opt.training && B >= 2;
    detail::HeadCache hc;
    const nn::Vector z = detail::head_forward(model, g, opt.training, batch_stats, opt.rng, stats, hc);

    const double inv = 1.0 / static_cast<double>(B);
    nn::Vector dz(B);
    std::uint64_t sig = 0;
    for (Eigen::Index b = 0; b < B; ++b)
    {
        const double y = nn::softplus(z(b));
        const bool pass = y >= t_min;
        const double c = pass ? y : t_min;
        const double r = batch[live[static_cast<std::size_t>(b)]].target - c;
        res.value += r * r * inv;
        dz(b) = pass ? -2.0 * r * inv * nn::sigmoid(z(b)) : 0.0;
        if (opt.signature)
            detail::hash_mix(sig, pass);
    }

    const nn::Matrix dg = detail::head_backward(model, hc, dz, std::span<double>(res.grad));
    for (std::size_t b = 0; b < live.size(); ++b)
        detail::trunk_backward(model, *batch[live[b]].input, tcs[b], dg.row(static_cast<Eigen::Index>(b)),
                               std::span<double>(res.grad));

    if (opt.signature)
    {
        for (const auto &tc : tcs)
        {
            detail::hash_masks(sig, tc.sa1);
            detail::hash_masks(sig, tc.sa2);
            detail::hash_masks(sig, tc.enc);
            detail::hash_args(sig, tc.arg1);
            detail::hash_args(sig, tc.arg2);
            detail::hash_args(sig, tc.arg3);
        }
        for (const auto &pre : hc.pre)
            for (Eigen::Index i = 0; i < pre.size(); ++i)
                detail::hash_mix(sig, pre.data()[i] > 0.0);
        res.signature = sig;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Training

struct TrainSample
{
    PreparedInput input;
    double target_linear = 0.0;
    bool present = false; // region non-empty
};

struct TrainResult
{
    std::vector<double> loss_trace; // mean loss over unmasked samples, per epoch
};

// Mini-batch ranges [first, last) over n shuffled samples. A trailing batch shorter than
// half the batch size joins the batch before it, so batch-norm statistics never come from
// one or two samples.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size)
{
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size)
        out.emplace_back(start, std::min(n, start + batch_size));
    if (out.size() >= 2 && 2 * (out.back().second - out.back().first) < batch_size)
    {
        out[out.size() - 2].second = n;
        out.pop_back();
    }
    return out;
}

// Starts the softplus output at the mean training target.
inline void init_output_bias(EstimatorModel &model, std::span<const TrainSample> samples)
{
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto &s : samples)
        if (s.present)
        {
            sum += model.domain.to_domain(s.target_linear);
            ++n;
        }
    if (n == 0)
        return;
    const double mean = std::max(sum / static_cast<double>(n), 1.05);
    model.params[model.layout.out.b] = nn::softplus_inverse(mean);
}

// Replaces the running BN statistics by the exact population statistics of the given
// samples under the current parameters, layer by layer.
inline void calibrate_batchnorm(EstimatorModel &model, std::span<const TrainSample> samples)
{
    if (model.layout.head_bn.empty())
        return;
    std::vector<const PreparedInput *> live;
    for (const auto &s : samples)
        if (s.present)
            live.push_back(&s.input);
    if (live.empty())
        return;
    const std::span<const double> p(model.params);
    nn::Matrix a(static_cast<Eigen::Index>(live.size()), static_cast<Eigen::Index>(model.config.encoder_width));
    for (std::size_t i = 0; i < live.size(); ++i)
    {
        detail::TrunkCache tc;
        a.row(static_cast<Eigen::Index>(i)) = detail::trunk_forward(model, *live[i], tc);
    }
    for (std::size_t l = 0; l < model.layout.head.size(); ++l)
    {
        const nn::Matrix z = model.layout.head[l].forward(p, a);
        auto &st = model.bn_stats[l];
        st.mean = z.colwise().mean().transpose();
        st.var = (z.rowwise() - st.mean.transpose()).array().square().colwise().mean().transpose();
        nn::BatchNorm::Cache c;
        a = model.layout.head_bn[l].forward(p, z, st, false, c).cwiseMax(0.0);
    }
}

// Plain mini-batch SGD over the unmasked samples, reshuffled every epoch and split by
// batch_ranges. BN statistics are recalibrated on the training samples at the end.
inline TrainResult train(EstimatorModel &model, std::span<const TrainSample> samples, const TrainingConfig &cfg,
                         const std::function<void(std::size_t, double)> &on_epoch = {})
{
    cfg.validate();
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].present)
            pool.push_back(i);
    if (pool.empty())
        throw std::invalid_argument("train: no non-empty training samples.");

    std::vector<LossSample> all(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        all[i] = {&samples[i].input, model.domain.to_domain(samples[i].target_linear), samples[i].present};

    std::mt19937_64 rng(cfg.seed);
    TrainResult res;
    std::vector<LossSample> batch;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch)
    {
        std::shuffle(pool.begin(), pool.end(), rng);
        double acc = 0.0;
        std::size_t seen = 0;
        const auto ranges = batch_ranges(pool.size(), cfg.batch_size);
        for (std::size_t bi = 0; bi < ranges.size(); ++bi)
        {
            batch.clear();
            for (std::size_t j = ranges[bi].first; j < ranges[bi].second; ++j)
                batch.push_back(all[pool[j]]);
            PassOptions opt;
            opt.training = true;
            opt.rng = &rng;
            opt.running = &model.bn_stats;
            const auto lr = loss(model, batch, cfg.alpha_min_linear, opt);
            bool finite = std::isfinite(lr.value);
            for (double gv : lr.grad)
                finite = finite && std::isfinite(gv);
            if (!finite)
                throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(bi));
            for (std::size_t i = 0; i < model.params.size(); ++i)
                model.params[i] -= cfg.learning_rate * lr.grad[i];
            acc += lr.value * static_cast<double>(lr.active);
            seen += lr.active;
        }
        res.loss_trace.push_back(acc / static_cast<double>(seen));
        if (on_epoch)
            on_epoch(epoch, res.loss_trace.back());
    }
    if (cfg.epochs > 0)
        calibrate_batchnorm(model, samples);
    return res;
}

// Mean masked loss of a sample set in evaluation mode.
inline double evaluate_loss(const EstimatorModel &model, std::span<const TrainSample> samples, double alpha_min_linear)
{
    std::vector<LossSample> all;
    for (const auto &s : samples)
        if (s.present)
            all.push_back({&s.input, model.domain.to_domain(s.target_linear), true});
    if (all.empty())
        return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < all.size(); i += 64)
    {
        const std::span<const LossSample> chunk(all.data() + i, std::min<std::size_t>(64, all.size() - i));
        acc += loss(model, chunk, alpha_min_linear).value * static_cast<double>(chunk.size());
    }
    return acc / static_cast<double>(all.size());
}

// ---------------------------------------------------------------------------
// Location split

struct LocationSplit
{
    std::vector<std::size_t> train; // ascending location indices
    std::vector<std::size_t> test;
};

// Seeded shuffle of the L locations; the first ceil(fraction * L) train. Every sample of a
// location stays on its side.
inline LocationSplit split_by_location(std::size_t locations, const TrainingConfig &cfg)
{
    if (locations < 2)
        throw std::invalid_argument("split_by_location: need at least two locations.");
    if (!(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0))
        throw std::invalid_argument("split_by_location: split fraction must lie in (0, 1).");
    std::vector<std::size_t> idx(locations);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const double want = cfg.split_fraction * static_cast<double>(locations);
    auto n_train = static_cast<std::size_t>(std::ceil(want - 1e-9 * want));
    n_train = std::clamp<std::size_t>(n_train, 1, locations - 1);
    LocationSplit s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

template <typename T>
std::vector<T> select_locations(const std::vector<T> &items, const std::vector<std::size_t> &which)
{
    std::vector<T> out;
    out.reserve(which.size());
    for (auto i : which)
        out.push_back(items.at(i));
    return out;
}

// ---------------------------------------------------------------------------
// Per-link sample construction and prediction

// Seed of the downsampling draw for delay bin k.
inline std::uint64_t bin_seed(std::uint64_t seed, std::size_t k)
{
    return seed ^ (0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(k) + 1));
}

// One featurised input per delay bin of the link tx -> rx.
inline std::vector<FeaturizedSet> link_inputs(const PointCloud &cloud, const LinkGeometry &geom,
                                              const ChannelConfig &cfg, const NetworkConfig &net,
                                              std::uint64_t seed)
{
    const auto parts = partition_cloud(cloud, geom, cfg);
    std::vector<FeaturizedSet> out;
    out.reserve(parts.bins());
    for (std::size_t k = 0; k < parts.bins(); ++k)
        out.push_back(build_input(region_subset(cloud, parts, k), geom, net.n_input, bin_seed(seed, k), net.features));
    return out;
}

// Gain of one region: the noise floor for an empty region, otherwise the clamped estimate.
inline double predict_gain(const EstimatorModel &model, const FeaturizedSet &input, double alpha_min_linear)
{
    if (input.empty())
        return alpha_min_linear;
    return std::max(alpha_min_linear, forward(model, input));
}

inline double predict_gain(const EstimatorModel &model, const PointCloud &subset, const LinkGeometry &geom,
                           std::size_t k, std::uint64_t seed, double alpha_min_linear)
{
    if (subset.empty())
        return alpha_min_linear;
    return predict_gain(model,
                        build_input(subset, geom, model.config.n_input, bin_seed(seed, k), model.config.features),
                        alpha_min_linear);
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned text, `key value...` header lines then the parameter vector in
// layout order, one value per line in shortest exact form.

inline void save_model(const std::filesystem::path &path, const EstimatorModel &m)
{
    auto out = io::open_out(path);
    auto list = [](const std::vector<std::size_t> &v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i)
            s += (i ? " " : "") + std::to_string(v[i]);
        return s;
    };
    auto vec = [](const nn::Vector &v) {
        std::string s;
        for (Eigen::Index i = 0; i < v.size(); ++i)
            s += (i ? " " : "") + io::fmt_exact(v(i));
        return s;
    };
    const auto &c = m.config;
    out << "ckm-estimator 1\n";
    out << "n_input " << c.n_input << '\n';
    out << "sa1 " << c.sa1.n_sample << ' ' << c.sa1.k_neighbors << ' ' << list(c.sa1.mlp_widths) << '\n';
    out << "sa2 " << c.sa2.n_sample << ' ' << c.sa2.k_neighbors << ' ' << list(c.sa2.mlp_widths) << '\n';
    out << "encoder_width " << c.encoder_width << '\n';
    out << "head_widths " << list(c.head_widths) << '\n';
    out << "dropout_rate " << io::fmt_exact(c.dropout_rate) << '\n';
    out << "batchnorm " << (c.batchnorm_enabled ? 1 : 0) << '\n';
    out << "features " << to_string(c.features) << '\n';
    out << "rng_seed " << m.rng_seed << '\n';
    out << "domain " << (m.domain.scale == TargetScale::decibel ? "decibel" : "linear") << ' '
        << io::fmt_exact(m.domain.floor_linear) << ' ' << io::fmt_exact(m.domain.db_per_unit) << '\n';
    out << "coord_scale " << io::fmt_exact(m.normalizer.coord_scale) << '\n';
    out << "feature_mean " << vec(m.normalizer.mean) << '\n';
    out << "feature_std " << vec(m.normalizer.stddev) << '\n';
    for (std::size_t i = 0; i < m.bn_stats.size(); ++i)
    {
        out << "bn_mean " << i << ' ' << vec(m.bn_stats[i].mean) << '\n';
        out << "bn_var " << i << ' ' << vec(m.bn_stats[i].var) << '\n';
    }
    out << "params " << m.params.size() << '\n';
    for (double v : m.params)
        out << io::fmt_exact(v) << '\n';
    io::finish(out, path);
}

inline EstimatorModel load_model(const std::filesystem::path &path)
{
    auto in = io::open_in(path);
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() {
        if (!std::getline(in, line))
            throw ParseError("checkpoint ends early", lineno + 1);
        ++lineno;
        return io::tokens(line);
    };
    auto expect = [&](const char *key) {
        auto t = next();
        if (t.empty() || t[0] != key)
            throw ParseError(std::string("expected '") + key + "'", lineno);
        t.erase(t.begin());
        return t;
    };
    auto sizes = [&](std::span<const std::string_view> t) {
        std::vector<std::size_t> v;
        for (auto s : t)
            v.push_back(static_cast<std::size_t>(io::parse_int(s, lineno)));
        return v;
    };
    auto doubles = [&](std::span<const std::string_view> t) {
        nn::Vector v(static_cast<Eigen::Index>(t.size()));
        for (std::size_t i = 0; i < t.size(); ++i)
            v(static_cast<Eigen::Index>(i)) = io::parse_double(t[i], lineno);
        return v;
    };

    const auto magic = next();
    if (magic.size() != 2 || magic[0] != "ckm-estimator")
        throw ParseError("not a ckm estimator checkpoint", lineno);
    if (magic[1] != "1")
        throw ParseError("unsupported checkpoint version " + std::string(magic[1]), lineno);

    NetworkConfig c;
    c.n_input = sizes(expect("n_input")).at(0);
    auto sa = [&](const char *key) {
        const auto v = sizes(expect(key));
        if (v.size() < 3)
            throw ParseError(std::string("malformed '") + key + "'", lineno);
        return SetAbstractionConfig{v[0], v[1], std::vector<std::size_t>(v.begin() + 2, v.end())};
    };
    c.sa1 = sa("sa1");
    c.sa2 = sa("sa2");
    c.encoder_width = sizes(expect("encoder_width")).at(0);
    c.head_widths = sizes(expect("head_widths"));
    c.dropout_rate = doubles(expect("dropout_rate"))(0);
    c.batchnorm_enabled = sizes(expect("batchnorm")).at(0) != 0;
    c.features = parse_feature_set(expect("features").at(0));
    const auto seed = static_cast<std::uint64_t>(std::stoull(std::string(expect("rng_seed").at(0))));
    const auto dom = expect("domain");
    if (dom.size() != 3 || (dom[0] != "decibel" && dom[0] != "linear"))
        throw ParseError("malformed 'domain'", lineno);
    GainDomain d{dom[0] == "decibel" ? TargetScale::decibel : TargetScale::linear, io::parse_double(dom[1], lineno),
                 io::parse_double(dom[2], lineno)};

    EstimatorModel m;
    try
    {
        m = EstimatorModel(c, seed, d);
    }
    catch (const std::invalid_argument &ex)
    {
        throw ParseError(std::string("invalid network configuration: ") + ex.what(), lineno);
    }
    m.normalizer.coord_scale = doubles(expect("coord_scale"))(0);
    m.normalizer.mean = doubles(expect("feature_mean"));
    m.normalizer.stddev = doubles(expect("feature_std"));
    if (m.normalizer.mean.size() != static_cast<Eigen::Index>(c.feature_dim()) ||
        m.normalizer.stddev.size() != static_cast<Eigen::Index>(c.feature_dim()))
        throw ParseError("normaliser width does not match the network", lineno);
    for (std::size_t i = 0; i < m.bn_stats.size(); ++i)
    {
        // Tokens view the current line, so each line is consumed before the next is read.
        auto stat = [&](const char *key) {
            const auto t = expect(key);
            if (t.empty() || t[0] != std::to_string(i))
                throw ParseError("batch norm statistics out of order", lineno);
            return doubles(std::span(t).subspan(1));
        };
        m.bn_stats[i].mean = stat("bn_mean");
        m.bn_stats[i].var = stat("bn_var");
        if (m.bn_stats[i].mean.size() != static_cast<Eigen::Index>(m.layout.head_bn[i].dim) ||
            m.bn_stats[i].var.size() != static_cast<Eigen::Index>(m.layout.head_bn[i].dim))
            throw ParseError("batch norm statistics do not match the network", lineno);
    }
    const auto count = sizes(expect("params")).at(0);
    if (count != m.params.size())
        throw ParseError("parameter count " + std::to_string(count) + " does not match the network (" +
                             std::to_string(m.params.size()) + ")",
                         lineno);
    for (auto &v : m.params)
    {
        const auto t = next();
        if (t.size() != 1)
            throw ParseError("expected one parameter value", lineno);
        v = io::parse_double(t[0], lineno);
        if (!std::isfinite(v))
            throw ParseError("non-finite parameter", lineno);
    }
    return m;
}

inline void save_loss_trace(const std::filesystem::path &path, std::span<const double> trace)
{
    auto out = io::open_out(path);
    out << "epoch,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
        out << i << ',' << io::fmt_exact(trace[i]) << '\n';
    io::finish(out, path);
}

} // namespace ckm

#endif
