// SPDX-License-Identifier: Apache-2.0
// ckm - channel knowledge maps from environmental point clouds

// Small networks and random inputs shared by the estimator tests and the acceptance run.

#ifndef CKM_TESTS_FIXTURES_HPP
#define CKM_TESTS_FIXTURES_HPP

#include "ckm/estimator.hpp"

#include <random>
#include <vector>

namespace fixture
{

inline ckm::NetworkConfig toy_network(ckm::FeatureSet fs = ckm::FeatureSet::full)
{
    ckm::NetworkConfig c;
    c.n_input = 24;
    c.sa1 = {8, 4, {6, 5}};
    c.sa2 = {4, 3, {5, 4}};
    c.encoder_width = 6;
    c.head_widths = {5};
    c.dropout_rate = 0.0;
    c.batchnorm_enabled = false;
    c.features = fs;
    return c;
}

inline ckm::GainDomain test_domain()
{
    ckm::GainDomain d;
    d.floor_linear = ckm::from_db(-110.0, ckm::Scale::amplitude);
    return d;
}

// A region-like cloud: points scattered around a center with colors and mostly unit normals.
inline ckm::PointCloud random_cloud(std::size_t n, std::uint64_t seed, const ckm::Vec3 &center = ckm::Vec3(3, 1, 2))
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 2.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ckm::PointCloud c;
    for (std::size_t i = 0; i < n; ++i)
    {
        ckm::PointRecord r;
        r.position = center + ckm::Vec3(nd(rng), nd(rng), nd(rng));
        r.color = ckm::Vec3(u(rng), u(rng), u(rng));
        if (u(rng) < 0.8)
            r.normal = ckm::Vec3(nd(rng), nd(rng), nd(rng)).normalized();
        c.points.push_back(r);
    }
    return c;
}

inline ckm::LinkGeometry toy_link() { return ckm::LinkGeometry(ckm::Vec3(-4, 0, 1.5), ckm::Vec3(6, 2, 1.0)); }

// Prepared inputs and domain-scale targets for `count` random regions.
struct ToyBatch
{
    std::vector<ckm::PreparedInput> inputs;
    std::vector<double> targets;

    std::vector<ckm::LossSample> samples() const
    {
        std::vector<ckm::LossSample> s;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            s.push_back({&inputs[i], targets[i], true});
        return s;
    }
};

inline ToyBatch toy_batch(ckm::EstimatorModel &model, std::size_t count, std::uint64_t seed)
{
    std::vector<ckm::FeaturizedSet> sets;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> size(5, 40);
    std::uniform_real_distribution<double> t(1.5, 4.0);
    ToyBatch b;
    for (std::size_t i = 0; i < count; ++i)
    {
        const auto cloud = random_cloud(size(rng), seed * 131 + i);
        sets.push_back(ckm::build_input(cloud, toy_link(), model.config.n_input, seed + i, model.config.features));
        b.targets.push_back(t(rng));
    }
    ckm::fit_normalizer(model, sets);
    for (const auto &s : sets)
        b.inputs.push_back(ckm::prepare(model, s));
    return b;
}

struct GradientCheck
{
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0; // perturbation crossed a kink of the piecewise-linear network
};

// Analytic gradient of the masked clamp-MSE against central differences, parameter by
// parameter. A coordinate is skipped when either perturbed pass lands in a different
// ReLU/max/clamp regime than the unperturbed one.
inline GradientCheck gradient_check(ckm::EstimatorModel &model, const std::vector<ckm::LossSample> &batch,
                                    double alpha_min, double h = 1e-5)
{
    ckm::PassOptions opt;
    opt.signature = true;
    const auto base = ckm::loss(model, batch, alpha_min, opt);
    GradientCheck r;
    for (std::size_t i = 0; i < model.params.size(); ++i)
    {
        const double keep = model.params[i];
        model.params[i] = keep + h;
        const auto up = ckm::loss(model, batch, alpha_min, opt);
        model.params[i] = keep - h;
        const auto down = ckm::loss(model, batch, alpha_min, opt);
        model.params[i] = keep;
        if (up.signature != base.signature || down.signature != base.signature)
        {
            ++r.skipped;
            continue;
        }
        const double num = (up.value - down.value) / (2.0 * h);
        const double ana = base.grad[i];
        const double rel = std::abs(num - ana) / std::max(1e-6, std::abs(num) + std::abs(ana));
        r.max_rel_error = std::max(r.max_rel_error, rel);
        ++r.checked;
    }
    return r;
}

} // namespace fixture

#endif
