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

// ckm: command-line pipeline.
//
//   ckm synth     --config run.txt     scene cloud, observations, oracle paths
//   ckm select    --config run.txt     per-bin region PLY files for one receiver
//   ckm train     --config run.txt     estimator checkpoint and loss trace
//   ckm construct --config run.txt     CKM over the configured grid
//   ckm evaluate  --config run.txt     held-out report for every method
//   ckm sweep     --config run.txt     RMSE against cloud density
//   ckm plot      --config run.txt     PGM heatmap or PDP trace
//
// Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.

#include "ckm/ckm.hpp"
#include "ckm/run_config.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

namespace
{

using namespace ckm;

enum Exit
{
    ok = 0,
    failure = 1,
    config_error = 2,
    io_error = 3,
    numeric_error = 4
};

void log(const std::string &msg) { std::cerr << "ckm: " << msg << '\n'; }

Vec3 transmitter(const RunConfig &rc)
{
    if (rc.has("tx"))
        return rc.vec3("tx");
    if (rc.has("scene"))
        return load_scene(rc.path("scene")).tx;
    throw ConfigError("missing required key 'tx' (or 'scene')");
}

PointCloud environment(const RunConfig &rc)
{
    if (rc.has("cloud"))
    {
        auto c = load_points(rc.path("cloud"));
        try
        {
            c.validate();
        }
        catch (const std::invalid_argument &ex)
        {
            throw ParseError(rc.path("cloud").string() + ": " + ex.what(), 0);
        }
        return c;
    }
    if (rc.has("scene"))
        return sample_scene_cloud(load_scene(rc.path("scene")));
    throw ConfigError("missing required key 'cloud' (or 'scene')");
}

std::filesystem::path checkpoint(const RunConfig &rc)
{
    const auto p = rc.input("model", "model.ckpt");
    if (!std::filesystem::exists(p))
        throw ConfigError("checkpoint not found: " + p.string() + " (run 'ckm train' or set 'model')");
    return p;
}

struct Split
{
    ObservationSet train, test;
};

Split split_observations(const ObservationSet &obs, const PipelineConfig &pc)
{
    const auto s = split_by_location(obs.size(), pc.training);
    return {select_locations(obs, s.train), select_locations(obs, s.test)};
}

ObservationSet observations(const RunConfig &rc, const ChannelConfig &ch, const Vec3 &tx)
{
    return load_observations(rc.input("observations", "observations.csv"), ch, tx);
}

int cmd_synth(const RunConfig &rc)
{
    const auto scene = load_scene(rc.path("scene"));
    const auto ch = rc.channel();
    const auto loc =
        random_locations(rc.count("receivers.count"), rc.vec3("receivers.min"), rc.vec3("receivers.max"),
                         rc.seed("receivers.seed"));
    const auto ds = generate_dataset(scene, loc, ch);
    const auto dir = rc.out_dir();
    save_ply(dir / "scene_cloud.ply", ds.cloud);
    save_observations(dir / "observations.csv", ds.observations);
    save_paths_csv(dir / "oracle_paths.csv", ds.paths);
    log("synth: " + std::to_string(ds.cloud.size()) + " points, " + std::to_string(ds.observations.size()) +
        " observations");
    return ok;
}

int cmd_select(const RunConfig &rc)
{
    const auto ch = rc.channel();
    const auto cloud = environment(rc);
    const LinkGeometry geom(transmitter(rc), rc.vec3("select.rx"));
    const auto parts = partition_cloud(cloud, geom, ch);
    const auto dir = rc.out_dir();
    if (rc.has("select.bin"))
    {
        const auto k = rc.count("select.bin");
        save_ply(dir / region_file_name(k), region_subset(cloud, parts, k));
    }
    else
        export_regions(dir, cloud, parts);

    auto out = io::open_out(dir / "regions.csv");
    out << "bin,points\n";
    for (std::size_t k = 0; k < parts.bins(); ++k)
        out << k << ',' << parts.members[k].size() << '\n';
    out << "none," << parts.unassigned() << '\n';
    io::finish(out, dir / "regions.csv");
    return ok;
}

int cmd_train(const RunConfig &rc)
{
    const auto pc = rc.pipeline();
    const auto tx = transmitter(rc);
    const auto cloud = environment(rc);
    const auto obs = observations(rc, pc.channel, tx);
    const auto s = split_by_location(obs.size(), pc.training);
    const auto train = select_locations(obs, s.train);
    log("train: " + std::to_string(train.size()) + " training locations, " + std::to_string(cloud.size()) +
        " points");
    const auto fit = fit_estimator(cloud, tx, train, pc, [&](std::size_t e, double l) {
        log("epoch " + std::to_string(e) + " loss " + io::fmt_sig(l, 6));
    });
    const auto dir = rc.out_dir();
    save_model(dir / "model.ckpt", fit.model);
    save_loss_trace(dir / "loss_trace.csv", fit.training.loss_trace);

    auto out = io::open_out(dir / "split.csv");
    out << "index,x,y,z,set\n";
    std::vector<std::string> tag(obs.size(), "test");
    for (auto i : s.train)
        tag[i] = "train";
    for (std::size_t i = 0; i < obs.size(); ++i)
        out << i << ',' << io::fmt_exact(obs[i].location.x()) << ',' << io::fmt_exact(obs[i].location.y()) << ','
            << io::fmt_exact(obs[i].location.z()) << ',' << tag[i] << '\n';
    io::finish(out, dir / "split.csv");
    return ok;
}

int cmd_construct(const RunConfig &rc)
{
    const auto pc = rc.pipeline();
    const auto model = load_model(checkpoint(rc));
    const auto grid = construct_pdp_map(model, environment(rc), transmitter(rc), rc.grid(), pc.channel, pc.input_seed);
    save_ckm_csv(rc.out_dir() / "ckm.csv", grid);
    return ok;
}

int cmd_evaluate(const RunConfig &rc)
{
    const auto pc = rc.pipeline();
    const auto model = load_model(checkpoint(rc));
    const auto tx = transmitter(rc);
    const auto cloud = environment(rc);
    const auto split = split_observations(observations(rc, pc.channel, tx), pc);
    const auto loc = locations_of(split.test);

    std::vector<EvaluationReport> reports;
    reports.push_back(evaluate("estimator", predict_locations(model, cloud, tx, loc, pc), split.test));
    reports.push_back(evaluate("friis", friis_predictions(tx, loc, pc.channel), split.test));
    reports.push_back(evaluate("bin_mean", bin_mean_predictions(split.train, loc, pc.channel), split.test));
    reports.push_back(
        evaluate("kriging", kriging_predictions(split.train, tx, loc, rc.seed("kriging.seed")), split.test));
    const auto dir = rc.out_dir();
    save_report_csv(dir / "report.csv", reports);
    save_summary_csv(dir / "summary.csv", reports);
    for (const auto &r : reports)
    {
        std::cout << r.method << ": ";
        if (r.pdp_rmse.count > 0) // Kriging predicts power only
            std::cout << "mean PDP RMSE " << io::fmt_sig(r.pdp_rmse.mean, 4) << " dB, ";
        std::cout << "radio-map RMSE " << io::fmt_sig(r.radio_map_rmse_db, 4) << " dB\n";
    }
    return ok;
}

int cmd_sweep(const RunConfig &rc)
{
    const auto pc = rc.pipeline();
    const auto tx = transmitter(rc);
    const auto cloud = environment(rc);
    const auto split = split_observations(observations(rc, pc.channel, tx), pc);
    const auto ratios = rc.values().get_doubles("sweep.ratios");
    for (double r : ratios)
        if (!(r > 0.0 && r <= 1.0))
            throw ConfigError("sweep.ratios must lie in (0, 1]");
    const auto rows = density_sweep(cloud, tx, split.train, split.test, ratios, pc, rc.seed("sweep.seed"),
                                    [](const SweepRow &r) {
                                        log("sweep: ratio " + io::fmt_sig(r.ratio, 4) + " " + to_string(r.features) +
                                            " mean PDP RMSE " + io::fmt_sig(r.report.pdp_rmse.mean, 4) + " dB");
                                    });
    save_sweep_csv(rc.out_dir() / "sweep.csv", rows);
    return ok;
}

int cmd_plot(const RunConfig &rc)
{
    const auto kind = rc.str("plot.kind");
    const auto table = load_ckm_csv(rc.path("plot.input"));
    if (kind == "heatmap")
    {
        const auto out = rc.has("plot.output") ? rc.path("plot.output") : rc.out_dir() / "heatmap.pgm";
        const double lo = rc.num("plot.min_db"), hi = rc.num("plot.max_db");
        if (!(hi > lo))
            throw ConfigError("plot.max_db must exceed plot.min_db");
        save_pgm(out, table.nx, table.ny, table.power_db, lo, hi);
        return ok;
    }
    if (kind == "trace")
    {
        const auto ch = rc.channel();
        const auto ix = rc.count("plot.ix"), iy = rc.count("plot.iy");
        if (ix >= table.nx || iy >= table.ny)
            throw ConfigError("plot.ix/plot.iy outside the map");
        const auto &g = table.gains[iy * table.nx + ix];
        const auto out = rc.has("plot.output") ? rc.path("plot.output") : rc.out_dir() / "trace.csv";
        save_pdp_trace(out, g, ch);
        return ok;
    }
    throw ConfigError("plot.kind must be 'heatmap' or 'trace'");
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{"Channel knowledge maps from environmental point clouds"};
    app.require_subcommand(1);
    std::string config;
    std::string out_dir;
    long long seed = -1;
    std::vector<std::string> assignments;
    app.add_option("--config", config, "Run configuration (key = value file)");
    app.add_option("--seed", seed, "Global seed")->check(CLI::NonNegativeNumber);
    app.add_option("--out-dir", out_dir, "Output directory");
    app.add_option("--set", assignments, "Override a configuration key (key=value)");

    const std::vector<std::pair<std::string, int (*)(const RunConfig &)>> commands{
        {"synth", cmd_synth},         {"select", cmd_select},     {"train", cmd_train}, {"construct", cmd_construct},
        {"evaluate", cmd_evaluate},   {"sweep", cmd_sweep},       {"plot", cmd_plot}};
    for (const auto &[name, fn] : commands)
        app.add_subcommand(name)->fallthrough();

    try
    {
        app.parse(argc, argv);
    }
    catch (const CLI::CallForHelp &e)
    {
        return app.exit(e);
    }
    catch (const CLI::ParseError &e)
    {
        app.exit(e);
        return config_error;
    }

    try
    {
        RunConfig rc;
        if (!config.empty())
            rc.load_file(config);
        rc.apply_environment();
        for (const auto &a : assignments)
            rc.apply_assignment(a);
        if (seed >= 0)
            rc.set("seed", std::to_string(seed), std::filesystem::current_path());
        if (!out_dir.empty())
            rc.set("out_dir", out_dir, std::filesystem::current_path());

        for (const auto &[name, fn] : commands)
            if (app.got_subcommand(name))
                return fn(rc);
        return failure;
    }
    catch (const ConfigError &e)
    {
        log(std::string("configuration error: ") + e.what());
        return config_error;
    }
    catch (const std::invalid_argument &e)
    {
        log(std::string("configuration error: ") + e.what());
        return config_error;
    }
    catch (const ParseError &e)
    {
        log(std::string("input error: ") + e.what());
        return io_error;
    }
    catch (const IoError &e)
    {
        log(std::string("I/O error: ") + e.what());
        return io_error;
    }
    catch (const NumericError &e)
    {
        log(std::string("numeric failure: ") + e.what());
        return numeric_error;
    }
    catch (const std::domain_error &e)
    {
        log(std::string("numeric failure: ") + e.what());
        return numeric_error;
    }
    catch (const std::exception &e)
    {
        log(std::string("error: ") + e.what());
        return failure;
    }
}
