// SPDX-License-Identifier: Apache-2.0
// ckm - channel knowledge maps from environmental point clouds

// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
// The scene and the learning setup come from samples/acceptance; every threshold is below.

#include "ckm/ckm.hpp"
#include "ckm/run_config.hpp"
#include "support/cli_runner.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

using namespace ckm;
namespace fs = std::filesystem;

namespace
{

// Thresholds.
constexpr std::size_t selector_points = 100000; // per link
constexpr std::size_t selector_links = 20;
constexpr double selector_seconds = 5.0;
constexpr std::size_t framing_links = 1000;
constexpr double framing_tol = 1e-9;
constexpr std::size_t partition_points = 10000;
constexpr std::size_t partition_links = 10;
constexpr std::size_t gradient_seeds = 5;
constexpr double gradient_tol = 1e-4;
constexpr double gradient_seconds = 60.0;
constexpr std::size_t permutation_sets = 100;
constexpr double permutation_tol = 1e-6;
constexpr double end_to_end_gain = 0.40; // required reduction against the bin-mean predictor
constexpr double end_to_end_seconds = 30.0 * 60.0;
constexpr std::size_t radio_map_observations = 40;
constexpr double kriging_exact_tol_db = 1e-6;
constexpr double sweep_sparse_ratio = 0.001;
constexpr std::size_t image_draws = 100;
constexpr double image_tol_m = 1e-9;
constexpr std::size_t reciprocity_pairs = 100;

const fs::path samples_dir = CKM_SAMPLES_DIR;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4)
{
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

struct Outcome
{
    bool pass = false;
    std::string detail;
};

Vec3 uniform_vec(std::mt19937_64 &rng, double half)
{
    std::uniform_real_distribution<double> u(-half, half);
    return Vec3(u(rng), u(rng), u(rng));
}

// ---------------------------------------------------------------------------
// Geometry and selector

Outcome selector_oracle()
{
    std::mt19937_64 rng(101);
    ChannelConfig cfg;
    std::normal_distribution<double> nd(0.0, 1.0);
    std::size_t agree = 0, total = 0, assigned = 0;
    double fast_seconds = 0.0;
    for (std::size_t l = 0; l < selector_links; ++l)
    {
        const Vec3 tx = uniform_vec(rng, 20.0), rx = uniform_vec(rng, 20.0);
        const LinkGeometry g(tx, rx);
        const double spread = 0.5 * g.d0() + 0.5 * cfg.bin_length() * static_cast<double>(cfg.pdp_length);
        PointCloud cloud;
        cloud.points.resize(selector_points);
        for (auto &p : cloud.points)
            p.position = 0.5 * (tx + rx) + spread * Vec3(nd(rng), nd(rng), nd(rng)) / 1.5;
        const auto t0 = Clock::now();
        const auto parts = partition_cloud(cloud, g, cfg);
        fast_seconds += seconds_since(t0);
        for (std::size_t i = 0; i < cloud.size(); ++i)
        {
            const auto want =
                oracle::region_by_inequalities(cloud.points[i].position, tx, rx, cfg.bin_length(), cfg.pdp_length);
            const auto got = parts.bin[i] == RegionAssignment::none ? std::optional<std::size_t>{}
                                                                     : std::optional<std::size_t>(parts.bin[i]);
            agree += got == want;
            assigned += want.has_value();
            ++total;
        }
    }
    return {agree == total && fast_seconds < selector_seconds,
            std::to_string(agree) + "/" + std::to_string(total) + " points agree (" + std::to_string(assigned) +
                " inside a shell), fast path " + fmt(fast_seconds) + " s (limit " + fmt(selector_seconds) + " s)"};
}

Outcome framing_invariant()
{
    std::mt19937_64 rng(202);
    double end_err = 0.0, ortho_err = 0.0;
    for (std::size_t i = 0; i < framing_links; ++i)
    {
        const Vec3 tx = uniform_vec(rng, 50.0), rx = uniform_vec(rng, 50.0);
        const double d0 = (rx - tx).norm();
        const auto f = framing(tx, rx);
        end_err = std::max(end_err, (f.apply(tx) - Vec3(-0.5 * d0, 0, 0)).cwiseAbs().maxCoeff());
        end_err = std::max(end_err, (f.apply(rx) - Vec3(0.5 * d0, 0, 0)).cwiseAbs().maxCoeff());
        ortho_err = std::max(ortho_err, (f.rotation.transpose() * f.rotation - Mat3::Identity()).cwiseAbs().maxCoeff());
        ortho_err = std::max(ortho_err, std::abs(f.rotation.determinant() - 1.0));
    }
    return {end_err < framing_tol && ortho_err < framing_tol,
            "endpoint error " + fmt(end_err) + " m, orthonormality residual " + fmt(ortho_err) + " (limit " +
                fmt(framing_tol) + ")"};
}

Outcome partition_property()
{
    std::mt19937_64 rng(303);
    ChannelConfig cfg;
    std::normal_distribution<double> nd(0.0, 1.0);
    bool ok = true;
    std::size_t inside = 0;
    for (std::size_t l = 0; l < partition_links; ++l)
    {
        const Vec3 tx = uniform_vec(rng, 15.0), rx = uniform_vec(rng, 15.0);
        const LinkGeometry g(tx, rx);
        const double d_k = g.d0() + static_cast<double>(cfg.pdp_length) * cfg.bin_length();
        PointCloud cloud;
        cloud.points.resize(partition_points);
        for (auto &p : cloud.points)
            p.position = 0.5 * (tx + rx) + 0.4 * d_k * Vec3(nd(rng), nd(rng), nd(rng));
        const auto parts = partition_cloud(cloud, g, cfg);

        std::vector<int> seen(cloud.size(), 0);
        for (const auto &m : parts.members)
            for (auto i : m)
                ++seen[i];
        for (std::size_t i = 0; i < cloud.size(); ++i)
        {
            const Vec3 &p = cloud.points[i].position;
            const bool want = (p - tx).norm() + (p - rx).norm() < d_k;
            inside += want;
            ok = ok && seen[i] <= 1 && (seen[i] == 1) == want;
        }
    }
    return {ok, std::to_string(partition_links) + " clouds of " + std::to_string(partition_points) + " points, " +
                    std::to_string(inside) + " inside d_K, bins disjoint and covering: " + (ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// Estimator properties

Outcome gradient_check()
{
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (auto fs : {FeatureSet::full, FeatureSet::coords_color})
        for (std::size_t seed = 1; seed <= gradient_seeds; ++seed)
        {
            EstimatorModel m(fixture::toy_network(fs), seed, fixture::test_domain());
            const auto batch = fixture::toy_batch(m, 6, 40 + seed);
            const auto r = fixture::gradient_check(m, batch.samples(), m.domain.floor_linear);
            worst = std::max(worst, r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
        }
    const double t = seconds_since(t0);
    return {worst < gradient_tol && t < gradient_seconds && checked > 0,
            "max relative error " + fmt(worst) + " over " + std::to_string(checked) + " coordinates (" +
                std::to_string(skipped) + " at kinks skipped), " + fmt(t) + " s (limits " + fmt(gradient_tol) +
                ", " + fmt(gradient_seconds) + " s)"};
}

Outcome permutation_invariance()
{
    auto cfg = fixture::toy_network();
    cfg.batchnorm_enabled = true;
    EstimatorModel m(cfg, 5, fixture::test_domain());
    std::mt19937_64 rng(505);
    std::uniform_int_distribution<std::size_t> size(1, 80);
    std::vector<FeaturizedSet> sets;
    for (std::size_t i = 0; i < permutation_sets; ++i)
        sets.push_back(build_input(fixture::random_cloud(size(rng), 900 + i), fixture::toy_link(), cfg.n_input, i));
    fit_normalizer(m, sets);
    double worst = 0.0;
    for (const auto &x : sets)
    {
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(x.rows.rows()));
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        FeaturizedSet y = x;
        for (std::size_t i = 0; i < perm.size(); ++i)
            y.rows.row(static_cast<Eigen::Index>(i)) = x.rows.row(perm[i]);
        worst = std::max(worst, std::abs(forward(m, y) - forward(m, x)));
    }
    return {worst < permutation_tol,
            std::to_string(permutation_sets) + " sets, max output difference " + fmt(worst) + " (limit " +
                fmt(permutation_tol) + ")"};
}

// ---------------------------------------------------------------------------
// Scene experiments

struct Experiment
{
    RunConfig rc;
    PipelineConfig pc;
    SynthScene scene;
    SynthDataset data;
    ObservationSet train, test;
};

Experiment load_experiment()
{
    Experiment e;
    e.rc.load_file(samples_dir / "acceptance" / "run.txt");
    e.pc = e.rc.pipeline();
    e.scene = load_scene(e.rc.path("scene"));
    const auto loc = random_locations(e.rc.count("receivers.count"), e.rc.vec3("receivers.min"),
                                      e.rc.vec3("receivers.max"), e.rc.seed("receivers.seed"));
    e.data = generate_dataset(e.scene, loc, e.pc.channel);
    const auto s = split_by_location(e.data.observations.size(), e.pc.training);
    e.train = select_locations(e.data.observations, s.train);
    e.test = select_locations(e.data.observations, s.test);
    return e;
}

Outcome end_to_end(const Experiment &e)
{
    const auto t0 = Clock::now();
    const auto fit = fit_estimator(e.data.cloud, e.scene.tx, e.train, e.pc);
    const auto loc = locations_of(e.test);
    const auto est = evaluate("estimator", predict_locations(fit.model, e.data.cloud, e.scene.tx, loc, e.pc), e.test);
    const double t = seconds_since(t0);
    const auto friis = evaluate("friis", friis_predictions(e.scene.tx, loc, e.pc.channel), e.test);
    const auto mean = evaluate("bin_mean", bin_mean_predictions(e.train, loc, e.pc.channel), e.test);
    const auto &trace = fit.training.loss_trace;
    const double bound = (1.0 - end_to_end_gain) * mean.pdp_rmse.mean;
    const bool pass = est.pdp_rmse.mean <= bound && est.pdp_rmse.mean < friis.pdp_rmse.mean &&
                      trace.back() < trace.front() && t < end_to_end_seconds;
    return {pass, std::to_string(e.train.size()) + "/" + std::to_string(e.test.size()) +
                      " locations, held-out mean PDP RMSE " + fmt(est.pdp_rmse.mean) + " dB vs bin-mean " +
                      fmt(mean.pdp_rmse.mean) + " dB (needs <= " + fmt(bound) + ") and Friis " +
                      fmt(friis.pdp_rmse.mean) + " dB; loss " + fmt(trace.front()) + " -> " + fmt(trace.back()) +
                      ", " + fmt(t) + " s (limit " + fmt(end_to_end_seconds) + " s)"};
}

bool shadowed(const SynthScene &scene, const Vec3 &x)
{
    for (const auto &b : scene.blockers)
        if (segment_hits_box(scene.tx, x, b.lo, b.hi))
            return true;
    return false;
}

Outcome radio_map_vs_kriging(const Experiment &e)
{
    // The observations: a seeded subset of the receivers, the same for both methods.
    auto tc = e.pc.training;
    tc.split_fraction = static_cast<double>(radio_map_observations) / static_cast<double>(e.data.observations.size());
    const auto s = split_by_location(e.data.observations.size(), tc);
    const auto obs = select_locations(e.data.observations, s.train);

    // Held-out cells: grid cells whose line of sight crosses a blocker.
    const auto grid = e.rc.grid();
    std::vector<Vec3> cells;
    ObservationSet truth;
    for (std::size_t iy = 0; iy < grid.ny; ++iy)
        for (std::size_t ix = 0; ix < grid.nx; ++ix)
        {
            const Vec3 x = grid.location(ix, iy);
            if (!shadowed(e.scene, x))
                continue;
            cells.push_back(x);
            truth.push_back({x, oracle_pdp(e.scene, x, e.pc.channel).pdp});
        }

    std::vector<Vec3> loc;
    std::vector<double> p;
    for (const auto &o : obs)
    {
        loc.push_back(o.location);
        p.push_back(to_db(received_power(o.pdp), Scale::power));
    }
    const auto kfit = kriging_fit(loc, p, e.scene.tx, e.rc.seed("kriging.seed"));
    double exact = 0.0;
    for (std::size_t i = 0; i < loc.size(); ++i)
        exact = std::max(exact, std::abs(kriging_predict(kfit, loc[i]) - p[i]));
    const auto krig = evaluate("kriging", kriging_predictions(obs, e.scene.tx, cells, e.rc.seed("kriging.seed")), truth);

    // Same network and step budget as the end-to-end run, over fewer locations.
    auto pc = e.pc;
    pc.training.epochs = e.pc.training.epochs * e.train.size() / obs.size();
    const auto fit = fit_estimator(e.data.cloud, e.scene.tx, obs, pc);
    const auto est = evaluate("estimator", predict_locations(fit.model, e.data.cloud, e.scene.tx, cells, pc), truth);

    const bool pass = !cells.empty() && est.radio_map_rmse_db <= krig.radio_map_rmse_db && exact < kriging_exact_tol_db;
    return {pass, std::to_string(obs.size()) + " observations, " + std::to_string(cells.size()) +
                      " shadowed cells: radio-map RMSE " + fmt(est.radio_map_rmse_db) + " dB vs Kriging " +
                      fmt(krig.radio_map_rmse_db) + " dB; Kriging at observations within " + fmt(exact) +
                      " dB (limit " + fmt(kriging_exact_tol_db) + ")"};
}

Outcome density_sweep_trend(const Experiment &e)
{
    const std::vector<double> ratios{sweep_sparse_ratio, 1.0};
    const auto rows =
        density_sweep(e.data.cloud, e.scene.tx, e.train, e.test, ratios, e.pc, e.rc.seed("sweep.seed"));
    auto find = [&](double ratio, FeatureSet fs) {
        for (const auto &r : rows)
            if (r.ratio == ratio && r.features == fs)
                return r;
        throw std::logic_error("missing sweep row");
    };
    const auto sparse = find(sweep_sparse_ratio, FeatureSet::full);
    const auto dense = find(1.0, FeatureSet::full);
    const auto cc = find(1.0, FeatureSet::coords_color);
    const double a = sparse.report.pdp_rmse.mean, b = dense.report.pdp_rmse.mean, c = cc.report.pdp_rmse.mean;
    return {a >= b && b <= c, "mean PDP RMSE " + fmt(a) + " dB at ratio " + fmt(sweep_sparse_ratio) + " (" +
                                  std::to_string(sparse.points) + " points) vs " + fmt(b) + " dB at 1.0; coords+color " +
                                  fmt(c) + " dB at 1.0"};
}

// ---------------------------------------------------------------------------
// Oracle self-checks and determinism

Outcome image_method()
{
    std::mt19937_64 rng(909);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    std::size_t draws = 0, attempts = 0;
    double worst = 0.0;
    while (draws < image_draws && attempts < 100 * image_draws)
    {
        ++attempts;
        Reflector r;
        r.corner = Vec3(u(rng), u(rng), u(rng));
        r.edge_u = Vec3(u(rng), u(rng), u(rng));
        r.edge_v = Vec3(u(rng), u(rng), u(rng));
        const Vec3 n = r.normal();
        const Vec3 mid = r.corner + 0.5 * (r.edge_u + r.edge_v);
        const Vec3 a = mid + 0.2 * r.edge_u + (1.0 + std::abs(u(rng))) * n;
        const Vec3 b = mid - 0.2 * r.edge_v + (1.0 + std::abs(u(rng))) * n;
        const auto sp = specular_point(r, a, b);
        if (!sp)
            continue;
        const Vec3 q = oracle::specular_by_minimisation(r.corner, r.edge_u, r.edge_v, a, b);
        const double image = (a - *sp).norm() + (*sp - b).norm();
        const double numeric = (a - q).norm() + (q - b).norm();
        worst = std::max(worst, std::abs(image - numeric));
        ++draws;
    }

    const auto scene = load_scene(samples_dir / "acceptance" / "scene.txt");
    ChannelConfig cfg;
    std::uniform_real_distribution<double> ux(0.5, 30.0), uz(0.5, 6.0);
    bool reciprocal = true;
    std::size_t paths = 0;
    for (std::size_t i = 0; i < reciprocity_pairs; ++i)
    {
        const Vec3 a(ux(rng), ux(rng), uz(rng)), b(ux(rng), ux(rng), uz(rng));
        const auto ab = trace_paths(scene, a, b, cfg);
        const auto ba = trace_paths(scene, b, a, cfg);
        reciprocal = reciprocal && ab.size() == ba.size();
        for (std::size_t j = 0; reciprocal && j < ab.size(); ++j)
            reciprocal = ab[j].length == ba[j].length && ab[j].amplitude == ba[j].amplitude;
        paths += ab.size();
    }
    return {draws == image_draws && worst < image_tol_m && reciprocal,
            std::to_string(draws) + " draws, max length difference " + fmt(worst) + " m (limit " + fmt(image_tol_m) +
                "); " + std::to_string(paths) + " paths over " + std::to_string(reciprocity_pairs) +
                " swapped pairs " + (reciprocal ? "identical" : "differ")};
}

Outcome cli_determinism()
{
    const auto config = samples_dir / "quickstart" / "run.txt";
    const auto a = cli::fresh_dir("ckm_acceptance_a");
    const auto b = cli::fresh_dir("ckm_acceptance_b");
    if (cli::pipeline(config, a) != 0 || cli::pipeline(config, b) != 0)
        return {false, "pipeline failed"};
    const auto sa = cli::snapshot(a), sb = cli::snapshot(b);
    std::size_t compared = 0, differing = 0;
    for (const auto &[name, bytes] : sa)
    {
        const auto ext = fs::path(name).extension();
        if (ext != ".csv" && ext != ".pgm")
            continue;
        ++compared;
        differing += !sb.count(name) || sb.at(name) != bytes;
    }
    return {differing == 0 && compared > 0 && sa.size() == sb.size(),
            std::to_string(compared) + " CSV/PGM files compared, " + std::to_string(differing) + " differ"};
}

} // namespace

// With arguments, only the listed criteria run.
int main(int argc, char **argv)
{
    std::set<int> only;
    for (int i = 1; i < argc; ++i)
        only.insert(std::atoi(argv[i]));
    int failed = 0;
    auto report = [&](int id, const char *name, const std::function<Outcome()> &fn) {
        if (!only.empty() && !only.count(id))
            return;
        Outcome o;
        try
        {
            o = fn();
        }
        catch (const std::exception &ex)
        {
            o = {false, std::string("exception: ") + ex.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " [" << name << "] " << o.detail
                  << std::endl;
    };

    report(1, "selector oracle", selector_oracle);
    report(2, "framing", framing_invariant);
    report(3, "partition", partition_property);
    report(4, "gradient check", gradient_check);
    report(5, "permutation invariance", permutation_invariance);

    std::optional<Experiment> e;
    if (only.empty() || only.count(6) || only.count(7) || only.count(8))
    {
        try
        {
            e = load_experiment();
        }
        catch (const std::exception &ex)
        {
            std::cout << "acceptance scene unavailable: " << ex.what() << std::endl;
        }
    }
    auto with_scene = [&](Outcome (*fn)(const Experiment &)) {
        return [&, fn]() -> Outcome {
            if (!e)
                return {false, "no acceptance scene"};
            return fn(*e);
        };
    };
    report(6, "end-to-end", with_scene(end_to_end));
    report(7, "radio map vs Kriging", with_scene(radio_map_vs_kriging));
    report(8, "density sweep", with_scene(density_sweep_trend));
    report(9, "image method", image_method);
    report(10, "CLI determinism", cli_determinism);

    std::cout << (failed == 0 ? std::string("all criteria passed")
                              : std::to_string(failed) + (failed == 1 ? " criterion failed" : " criteria failed"))
              << std::endl;
    return failed == 0 ? 0 : 1;
}
