// SPDX-License-Identifier: Apache-2.0
// ckm - channel knowledge maps from environmental point clouds

#include "ckm/error.hpp"
#include "ckm/estimator.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

using namespace ckm;
using Catch::Approx;

namespace
{
std::filesystem::path temp_path(const std::string &name)
{
    auto dir = std::filesystem::temp_directory_path() / "ckm_test_estimator";
    std::filesystem::create_directories(dir);
    return dir / name;
}

// Straight-loop forward pass of the network: its own dedupe, normalisation, sampling,
// grouping and dense arithmetic. Only the parameter storage convention is shared.
double reference_forward(const EstimatorModel &m, const FeaturizedSet &x)
{
    const std::size_t C = m.config.feature_dim();
    std::set<std::vector<double>> uniq;
    for (Eigen::Index r = 0; r < x.rows.rows(); ++r)
    {
        std::vector<double> row(3 + C);
        for (std::size_t c = 0; c < 3 + C; ++c)
            row[c] = x.rows(r, static_cast<Eigen::Index>(c));
        uniq.insert(row);
    }
    std::vector<oracle::V3> xyz;
    std::vector<std::vector<double>> feat;
    for (const auto &row : uniq)
    {
        xyz.emplace_back(row[0] / m.normalizer.coord_scale, row[1] / m.normalizer.coord_scale,
                         row[2] / m.normalizer.coord_scale);
        std::vector<double> f(C);
        for (std::size_t c = 0; c < C; ++c)
            f[c] = (row[3 + c] - m.normalizer.mean(static_cast<Eigen::Index>(c))) /
                   m.normalizer.stddev(static_cast<Eigen::Index>(c));
        feat.push_back(f);
    }

    const auto &p = m.params;
    auto dense = [&](const nn::Dense &d, const std::vector<double> &in, bool relu) {
        std::vector<double> out(d.out);
        for (std::size_t j = 0; j < d.out; ++j)
        {
            double s = p[d.b + j];
            for (std::size_t i = 0; i < d.in; ++i)
                s += in[i] * p[d.w + i + j * d.in];
            out[j] = relu ? std::max(0.0, s) : s;
        }
        return out;
    };
    auto mlp = [&](const nn::SharedMlp &net, std::vector<double> v) {
        for (const auto &l : net.layers)
            v = dense(l, v, true);
        return v;
    };
    auto pool = [](std::vector<double> &acc, const std::vector<double> &v) {
        for (std::size_t i = 0; i < v.size(); ++i)
            acc[i] = std::max(acc[i], v[i]);
    };
    const double lowest = -std::numeric_limits<double>::infinity();

    const std::size_t m1 = std::min(m.config.sa1.n_sample, xyz.size());
    const std::size_t k1 = std::min(m.config.sa1.k_neighbors, xyz.size());
    const auto c1 = oracle::fps(xyz, m1);
    std::vector<std::vector<double>> f1;
    std::vector<oracle::V3> xyz1;
    for (auto c : c1)
    {
        std::vector<double> acc(m.layout.sa1.out(), lowest);
        for (auto j : oracle::knn(xyz, c, k1))
        {
            std::vector<double> in{xyz[j].x() - xyz[c].x(), xyz[j].y() - xyz[c].y(), xyz[j].z() - xyz[c].z()};
            in.insert(in.end(), feat[j].begin(), feat[j].end());
            pool(acc, mlp(m.layout.sa1, in));
        }
        f1.push_back(acc);
        xyz1.push_back(xyz[c]);
    }

    const std::size_t m2 = std::min(m.config.sa2.n_sample, xyz1.size());
    const std::size_t k2 = std::min(m.config.sa2.k_neighbors, xyz1.size());
    std::vector<double> global(m.config.encoder_width, lowest);
    for (auto c : oracle::fps(xyz1, m2))
    {
        std::vector<double> acc(m.layout.sa2.out(), lowest);
        for (auto j : oracle::knn(xyz1, c, k2))
        {
            std::vector<double> in{xyz1[j].x() - xyz1[c].x(), xyz1[j].y() - xyz1[c].y(), xyz1[j].z() - xyz1[c].z()};
            in.insert(in.end(), f1[j].begin(), f1[j].end());
            pool(acc, mlp(m.layout.sa2, in));
        }
        std::vector<double> in{xyz1[c].x(), xyz1[c].y(), xyz1[c].z()};
        in.insert(in.end(), acc.begin(), acc.end());
        pool(global, mlp(m.layout.encoder, in));
    }

    std::vector<double> a = global;
    for (std::size_t l = 0; l < m.layout.head.size(); ++l)
    {
        a = dense(m.layout.head[l], a, false);
        if (!m.layout.head_bn.empty())
        {
            const auto &bn = m.layout.head_bn[l];
            for (std::size_t i = 0; i < a.size(); ++i)
            {
                const auto ii = static_cast<Eigen::Index>(i);
                a[i] = (a[i] - m.bn_stats[l].mean(ii)) / std::sqrt(m.bn_stats[l].var(ii) + nn::BatchNorm::eps) *
                           p[bn.gamma + i] +
                       p[bn.beta + i];
            }
        }
        for (auto &v : a)
            v = std::max(0.0, v);
    }
    const double z = dense(m.layout.out, a, false)[0];
    return std::log1p(std::exp(z));
}

EstimatorModel toy_model(std::uint64_t seed, bool bn = false)
{
    auto cfg = fixture::toy_network();
    cfg.batchnorm_enabled = bn;
    return EstimatorModel(cfg, seed, fixture::test_domain());
}

Mat3 random_rotation(std::mt19937_64 &rng)
{
    std::normal_distribution<double> nd;
    Eigen::Quaterniond q(nd(rng), nd(rng), nd(rng), nd(rng));
    return q.normalized().toRotationMatrix();
}
} // namespace

TEST_CASE("input rows carry link-frame coordinates and propagation features", "[estimator]")
{
    PointCloud one;
    PointRecord r;
    r.position = Vec3(1, 2, 0);
    r.color = Vec3(0.2, 0.4, 0.6);
    r.normal = Vec3(0, 0, 1);
    one.points.push_back(r);
    const LinkGeometry g(Vec3(0, 0, 1), Vec3(4, 0, 1));
    const auto x = build_input(one, g, 3, 1);
    REQUIRE(x.rows.rows() == 3);
    REQUIRE(x.rows.cols() == 14);
    CHECK(x.presence_count == 1);
    const auto f = framing(g);
    const Vec3 local = f.apply(r.position);
    const Vec3 n = f.rotate(*r.normal);
    const auto lf = link_features(r, g);
    for (Eigen::Index row = 0; row < 3; ++row)
    {
        CHECK(x.rows(row, 0) == local.x());
        CHECK(x.rows(row, 1) == local.y());
        CHECK(x.rows(row, 2) == local.z());
        CHECK(x.rows(row, 3) == 0.2);
        CHECK(x.rows(row, 5) == 0.6);
        CHECK(x.rows(row, 6) == n.x());
        CHECK(x.rows(row, 8) == n.z());
        CHECK(x.rows(row, 9) == lf.dist_tx);
        CHECK(x.rows(row, 10) == lf.dist_rx);
        CHECK(x.rows(row, 11) == lf.cos_incident);
        CHECK(x.rows(row, 12) == lf.cos_outgoing);
        CHECK(x.rows(row, 13) == 1.0);
    }
    const auto cc = build_input(one, g, 2, 1, FeatureSet::coords_color);
    CHECK(cc.rows.cols() == 6);
    CHECK(build_input(PointCloud{}, g, 4, 1).empty());
    CHECK_THROWS_AS(build_input(one, g, 0, 1), std::invalid_argument);
}

TEST_CASE("forward pass matches a straight-loop reference", "[estimator]")
{
    for (bool bn : {false, true})
        for (std::uint64_t seed : {1u, 2u, 3u})
        {
            auto m = toy_model(seed, bn);
            if (bn)
            {
                std::mt19937_64 rng(seed);
                std::uniform_real_distribution<double> u(0.5, 2.0);
                for (auto &s : m.bn_stats)
                    for (Eigen::Index i = 0; i < s.mean.size(); ++i)
                    {
                        s.mean(i) = u(rng) - 1.0;
                        s.var(i) = u(rng);
                    }
            }
            const auto cloud = fixture::random_cloud(30, seed + 10);
            const auto x = build_input(cloud, fixture::toy_link(), m.config.n_input, seed);
            const std::vector<FeaturizedSet> sets{x};
            fit_normalizer(m, sets);
            const double got = forward_domain(m, prepare(m, x));
            CHECK(got == Approx(reference_forward(m, x)).epsilon(1e-12));
        }
}

TEST_CASE("loss gradients match central differences", "[estimator]")
{
    for (std::uint64_t seed : {1u, 2u})
    {
        auto m = toy_model(seed);
        const auto batch = fixture::toy_batch(m, 4, seed);
        const auto r = fixture::gradient_check(m, batch.samples(), m.domain.floor_linear);
        CHECK(r.max_rel_error < 1e-4);
        CHECK(r.checked > m.params.size() / 2);
    }
}

TEST_CASE("loss masks empty regions and clamps at the floor", "[estimator]")
{
    auto m = toy_model(4);
    auto batch = fixture::toy_batch(m, 3, 4);
    auto s = batch.samples();
    const auto full = loss(m, s, m.domain.floor_linear);
    CHECK(full.active == 3);

    // A masked sample does not contribute.
    auto masked = s;
    masked.push_back({nullptr, 100.0, false});
    const auto with_mask = loss(m, masked, m.domain.floor_linear);
    CHECK(with_mask.value == full.value);
    CHECK(with_mask.grad == full.grad);

    std::vector<LossSample> none{{nullptr, 2.0, false}};
    const auto empty = loss(m, none, m.domain.floor_linear);
    CHECK(empty.value == 0.0);
    CHECK(empty.active == 0);
    CHECK(std::all_of(empty.grad.begin(), empty.grad.end(), [](double g) { return g == 0.0; }));

    // Push the output below the floor: loss is (t - t_min)^2 and the gradient vanishes.
    m.params[m.layout.out.b] = -50.0;
    const auto low = loss(m, std::span(s).first(1), m.domain.floor_linear);
    const double tmin = m.domain.to_domain(m.domain.floor_linear);
    CHECK(low.value == Approx((s[0].target - tmin) * (s[0].target - tmin)));
    CHECK(std::all_of(low.grad.begin(), low.grad.end(), [](double g) { return g == 0.0; }));
}

TEST_CASE("output is invariant to row order", "[estimator]")
{
    auto m = toy_model(5);
    const auto cloud = fixture::random_cloud(40, 9);
    auto x = build_input(cloud, fixture::toy_link(), m.config.n_input, 3);
    const std::vector<FeaturizedSet> sets{x};
    fit_normalizer(m, sets);
    const double base = forward(m, x);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 10; ++t)
    {
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(x.rows.rows()));
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        FeaturizedSet y = x;
        for (std::size_t i = 0; i < perm.size(); ++i)
            y.rows.row(static_cast<Eigen::Index>(i)) = x.rows.row(perm[i]);
        CHECK(forward(m, y) == base);
    }
    // Shuffling the source cloud leaves the featurised input unchanged.
    auto shuffled = cloud;
    std::shuffle(shuffled.points.begin(), shuffled.points.end(), rng);
    CHECK(build_input(shuffled, fixture::toy_link(), m.config.n_input, 3).rows == x.rows);
}

TEST_CASE("output is invariant to translations of the scene", "[estimator]")
{
    auto m = toy_model(6);
    const auto cloud = fixture::random_cloud(40, 12);
    const auto link = fixture::toy_link();
    const auto x = build_input(cloud, link, m.config.n_input, 3);
    const std::vector<FeaturizedSet> sets{x};
    fit_normalizer(m, sets);
    const double base = forward(m, x);
    for (int t = 0; t < 5; ++t)
    {
        const Vec3 shift(3.0 * t, -2.0, 7.5);
        PointCloud moved = cloud;
        for (auto &p : moved.points)
            p.position += shift;
        const LinkGeometry g(link.tx() + shift, link.rx() + shift);
        CHECK(std::abs(forward(m, build_input(moved, g, m.config.n_input, 3)) - base) <
              1e-9 * std::max(1.0, std::abs(base)));
    }
}

TEST_CASE("rotating the scene only rolls the input about the link axis", "[estimator]")
{
    const auto cloud = fixture::random_cloud(40, 12);
    const auto link = fixture::toy_link();
    const auto x = build_input(cloud, link, 24, 3);
    std::mt19937_64 rng(2);
    for (int t = 0; t < 5; ++t)
    {
        const Mat3 R = random_rotation(rng);
        PointCloud moved = cloud;
        for (auto &p : moved.points)
        {
            p.position = R * p.position;
            if (p.normal)
                p.normal = R * *p.normal;
        }
        const auto y = build_input(moved, LinkGeometry(R * link.tx(), R * link.rx()), 24, 3);
        REQUIRE(y.rows.rows() == x.rows.rows());
        for (Eigen::Index i = 0; i < x.rows.rows(); ++i)
        {
            CHECK(std::abs(y.rows(i, 0) - x.rows(i, 0)) < 1e-9);
            CHECK(std::abs(std::hypot(y.rows(i, 1), y.rows(i, 2)) - std::hypot(x.rows(i, 1), x.rows(i, 2))) < 1e-9);
        }
    }
}

TEST_CASE("training on one sample drives its loss down", "[estimator]")
{
    auto m = toy_model(7);
    auto batch = fixture::toy_batch(m, 1, 7);
    std::vector<TrainSample> samples(1);
    samples[0].input = batch.inputs[0];
    samples[0].present = true;
    samples[0].target_linear = m.domain.to_linear(3.5);
    TrainingConfig cfg;
    cfg.epochs = 200;
    cfg.learning_rate = 0.01;
    cfg.alpha_min_linear = m.domain.floor_linear;
    const auto r = train(m, samples, cfg);
    REQUIRE(r.loss_trace.size() == 200);
    CHECK(r.loss_trace.back() < 1e-3 * r.loss_trace.front());
    CHECK(evaluate_loss(m, samples, cfg.alpha_min_linear) < 1e-3 * r.loss_trace.front());
    // Strict descent until the fit reaches rounding level.
    for (std::size_t e = 1; e < r.loss_trace.size() && r.loss_trace[e - 1] > 1e-20; ++e)
        CHECK(r.loss_trace[e] < r.loss_trace[e - 1]);
}

TEST_CASE("zero learning rate leaves parameters unchanged", "[estimator]")
{
    auto m = toy_model(7);
    auto batch = fixture::toy_batch(m, 4, 7);
    std::vector<TrainSample> samples;
    for (std::size_t i = 0; i < 4; ++i)
        samples.push_back({batch.inputs[i], m.domain.to_linear(batch.targets[i]), true});
    const auto before = m.params;
    TrainingConfig cfg;
    cfg.epochs = 5;
    cfg.learning_rate = 0.0;
    cfg.alpha_min_linear = m.domain.floor_linear;
    const auto r = train(m, samples, cfg);
    CHECK(m.params == before);
    for (double l : r.loss_trace)
        CHECK(l == r.loss_trace.front());
}

TEST_CASE("a short trailing batch joins the one before it", "[estimator]")
{
    using R = std::vector<std::pair<std::size_t, std::size_t>>;
    CHECK(batch_ranges(9, 4) == R{{0, 4}, {4, 9}});
    CHECK(batch_ranges(10, 4) == R{{0, 4}, {4, 8}, {8, 10}});
    CHECK(batch_ranges(8, 4) == R{{0, 4}, {4, 8}});
    CHECK(batch_ranges(3, 4) == R{{0, 3}});
    CHECK(batch_ranges(10210, 32).back() == std::pair<std::size_t, std::size_t>{10176, 10210});
    CHECK(batch_ranges(0, 4).empty());
}

TEST_CASE("training is deterministic for a fixed seed", "[estimator]")
{
    auto run = [](std::uint64_t seed, bool bn) {
        auto m = toy_model(3, bn);
        m.config.dropout_rate = 0.3;
        auto batch = fixture::toy_batch(m, 6, 3);
        std::vector<TrainSample> samples;
        for (std::size_t i = 0; i < batch.inputs.size(); ++i)
            samples.push_back({batch.inputs[i], m.domain.to_linear(batch.targets[i]), true});
        samples.push_back({PreparedInput{}, m.domain.floor_linear, false});
        TrainingConfig cfg;
        cfg.epochs = 5;
        cfg.batch_size = 4;
        cfg.seed = seed;
        cfg.alpha_min_linear = m.domain.floor_linear;
        train(m, samples, cfg);
        return m.params;
    };
    CHECK(run(1, true) == run(1, true));
    CHECK(run(1, false) == run(1, false));
    CHECK(run(1, true) != run(2, true));
}

TEST_CASE("divergent training raises a numeric error", "[estimator]")
{
    auto m = toy_model(8);
    auto batch = fixture::toy_batch(m, 2, 8);
    std::vector<TrainSample> samples;
    for (std::size_t i = 0; i < 2; ++i)
        samples.push_back({batch.inputs[i], m.domain.to_linear(batch.targets[i]), true});
    TrainingConfig cfg;
    cfg.epochs = 50;
    cfg.learning_rate = 1e200;
    cfg.alpha_min_linear = m.domain.floor_linear;
    CHECK_THROWS_AS(train(m, samples, cfg), NumericError);
    std::vector<TrainSample> empty{{PreparedInput{}, 1.0, false}};
    CHECK_THROWS_AS(train(m, empty, cfg), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bit for bit", "[estimator][io]")
{
    auto m = toy_model(9, true);
    auto batch = fixture::toy_batch(m, 3, 9);
    m.bn_stats[0].mean(0) = 0.125;
    m.bn_stats[0].var(1) = 1.0 / 3.0;
    const auto path = temp_path("model.ckpt");
    save_model(path, m);
    const auto back = load_model(path);
    CHECK(back.params == m.params);
    CHECK(back.normalizer.coord_scale == m.normalizer.coord_scale);
    CHECK(back.normalizer.mean == m.normalizer.mean);
    CHECK(back.bn_stats[0].var == m.bn_stats[0].var);
    for (const auto &in : batch.inputs)
        CHECK(forward_domain(back, in) == forward_domain(m, in));

    std::ofstream(temp_path("junk.ckpt")) << "not a model\n";
    CHECK_THROWS_AS(load_model(temp_path("junk.ckpt")), ParseError);
    CHECK_THROWS_AS(load_model(temp_path("absent.ckpt")), IoError);
}

TEST_CASE("gain domain maps the floor to one", "[estimator]")
{
    auto d = fixture::test_domain();
    CHECK(d.to_domain(d.floor_linear) == Approx(1.0));
    CHECK(d.to_domain(10.0 * d.floor_linear) == Approx(3.0)); // +20 dB at 10 dB per unit
    for (double a : {1e-6, 1e-3, 0.2})
        CHECK(d.to_linear(d.to_domain(a)) == Approx(a).epsilon(1e-12));
    d.scale = TargetScale::linear;
    CHECK(d.to_domain(d.floor_linear) == 1.0);
    CHECK(d.to_linear(4.0) == Approx(4.0 * d.floor_linear));
}

TEST_CASE("location split is seeded, disjoint and covers every location", "[estimator]")
{
    TrainingConfig cfg;
    cfg.split_fraction = 0.8;
    const auto s = split_by_location(200, cfg);
    CHECK(s.train.size() == 160);
    CHECK(s.test.size() == 40);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 200);
    const auto again = split_by_location(200, cfg);
    CHECK(again.train == s.train);
    cfg.seed = 2;
    CHECK(split_by_location(200, cfg).train != s.train);
    cfg.split_fraction = 0.99;
    CHECK(split_by_location(3, cfg).test.size() == 1);
    CHECK_THROWS_AS(split_by_location(1, cfg), std::invalid_argument);
}

TEST_CASE("empty regions predict the floor", "[estimator]")
{
    auto m = toy_model(10);
    CHECK(predict_gain(m, FeaturizedSet{}, 1e-5) == 1e-5);
    CHECK(predict_gain(m, PointCloud{}, fixture::toy_link(), 0, 1, 2e-5) == 2e-5);
}

TEST_CASE("network configuration rejects inconsistent sizes", "[estimator]")
{
    auto c = fixture::toy_network();
    CHECK_NOTHROW(c.validate());
    auto bad = c;
    bad.sa1.n_sample = 100;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.sa2.k_neighbors = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.dropout_rate = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.sa1.mlp_widths.clear();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
