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

#ifndef CKM_PIPELINE_HPP
#define CKM_PIPELINE_HPP

#include "ckm/ckm_builder.hpp"
#include "ckm/core.hpp"
#include "ckm/estimator.hpp"
#include "ckm/kriging.hpp"
#include "ckm/pointcloud.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

// End-to-end experiment steps: sample construction, training, prediction at held-out
// locations and the density sweep.

namespace ckm
{

struct PipelineConfig
{
    ChannelConfig channel;
    NetworkConfig network;
    TrainingConfig training;
    TargetScale target_scale = TargetScale::decibel;
    std::uint64_t input_seed = 7; // downsampling draws of the estimator inputs

    void validate() const
    {
        channel.validate();
        network.validate();
        training.validate();
    }
};

// Training samples of every (location, bin) pair. Inputs are normalised with the model's
// normaliser, which is fitted here on the same inputs.
inline std::vector<TrainSample> make_training_samples(EstimatorModel &model, const PointCloud &cloud, const Vec3 &tx,
                                                      const ObservationSet &train, const PipelineConfig &cfg)
{
    std::vector<FeaturizedSet> inputs;
    std::vector<double> targets;
    inputs.reserve(train.size() * cfg.channel.pdp_length);
    for (const auto &o : train)
    {
        auto sets = link_inputs(cloud, LinkGeometry(tx, o.location), cfg.channel, model.config, cfg.input_seed);
        for (std::size_t k = 0; k < sets.size(); ++k)
        {
            inputs.push_back(std::move(sets[k]));
            targets.push_back(o.pdp[k]);
        }
    }
    fit_normalizer(model, inputs);
    std::vector<TrainSample> samples(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i)
    {
        samples[i].target_linear = targets[i];
        samples[i].present = !inputs[i].empty();
        if (samples[i].present)
            samples[i].input = prepare(model, inputs[i]);
        inputs[i] = FeaturizedSet{};
    }
    return samples;
}

struct FitResult
{
    EstimatorModel model;
    TrainResult training;
};

inline FitResult fit_estimator(const PointCloud &cloud, const Vec3 &tx, const ObservationSet &train,
                               const PipelineConfig &cfg, const std::function<void(std::size_t, double)> &on_epoch = {})
{
    cfg.validate();
    GainDomain domain;
    domain.scale = cfg.target_scale;
    domain.floor_linear = cfg.channel.noise_floor_linear();
    FitResult r{EstimatorModel(cfg.network, cfg.training.seed, domain), {}};
    const auto samples = make_training_samples(r.model, cloud, tx, train, cfg);
    init_output_bias(r.model, samples);
    auto tc = cfg.training;
    tc.alpha_min_linear = cfg.channel.noise_floor_linear();
    r.training = ckm::train(r.model, samples, tc, on_epoch);
    return r;
}

inline std::vector<Prediction> predict_locations(const EstimatorModel &model, const PointCloud &cloud, const Vec3 &tx,
                                                 std::span<const Vec3> locations, const PipelineConfig &cfg)
{
    std::vector<Prediction> out;
    out.reserve(locations.size());
    for (const auto &x : locations)
        out.push_back(pdp_prediction(x, predict_pdp(model, cloud, tx, x, cfg.channel, cfg.input_seed)));
    return out;
}

inline std::vector<Vec3> locations_of(const ObservationSet &obs)
{
    std::vector<Vec3> out;
    out.reserve(obs.size());
    for (const auto &o : obs)
        out.push_back(o.location);
    return out;
}

inline std::vector<Prediction> friis_predictions(const Vec3 &tx, std::span<const Vec3> locations,
                                                 const ChannelConfig &cfg)
{
    std::vector<Prediction> out;
    for (const auto &x : locations)
        out.push_back(pdp_prediction(x, friis_pdp(tx, x, cfg)));
    return out;
}

inline std::vector<Prediction> bin_mean_predictions(const ObservationSet &train, std::span<const Vec3> locations,
                                                    const ChannelConfig &cfg)
{
    const auto mean = bin_mean_pdp(train, cfg);
    std::vector<Prediction> out;
    for (const auto &x : locations)
        out.push_back(pdp_prediction(x, mean));
    return out;
}

// Regression kriging of received power fitted on the training locations.
inline std::vector<Prediction> kriging_predictions(const ObservationSet &train, const Vec3 &tx,
                                                   std::span<const Vec3> locations, std::uint64_t seed)
{
    std::vector<Vec3> loc;
    std::vector<double> p;
    for (const auto &o : train)
    {
        loc.push_back(o.location);
        p.push_back(to_db(received_power(o.pdp), Scale::power));
    }
    const auto fit = kriging_fit(loc, p, tx, seed);
    std::vector<Prediction> out;
    for (const auto &x : locations)
    {
        Prediction pr;
        pr.location = x;
        pr.power_db = kriging_predict(fit, x);
        out.push_back(pr);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Density sweep

struct SweepRow
{
    double ratio = 1.0;
    FeatureSet features = FeatureSet::full;
    std::size_t points = 0;
    EvaluationReport report;
};

// For every ratio: downsample the cloud, retrain with both feature sets and evaluate on the
// held-out observations.
inline std::vector<SweepRow> density_sweep(const PointCloud &cloud, const Vec3 &tx, const ObservationSet &train,
                                           const ObservationSet &test, std::span<const double> ratios,
                                           const PipelineConfig &cfg, std::uint64_t seed,
                                           const std::function<void(const SweepRow &)> &on_row = {})
{
    const auto test_loc = locations_of(test);
    std::vector<SweepRow> rows;
    for (double ratio : ratios)
    {
        if (!(ratio > 0.0 && ratio <= 1.0))
            throw std::invalid_argument("density_sweep: ratios must lie in (0, 1].");
        const auto sub = random_downsample(cloud, ratio, seed);
        for (auto fs : {FeatureSet::full, FeatureSet::coords_color})
        {
            auto c = cfg;
            c.network.features = fs;
            const auto fit = fit_estimator(sub, tx, train, c);
            const auto pred = predict_locations(fit.model, sub, tx, test_loc, c);
            SweepRow row{ratio, fs, sub.size(), evaluate("estimator", pred, test)};
            if (on_row)
                on_row(row);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

inline void save_sweep_csv(const std::filesystem::path &path, std::span<const SweepRow> rows)
{
    auto out = io::open_out(path);
    out << "ratio,features,points,mean_pdp_rmse_db,median_pdp_rmse_db,radio_map_rmse_db\n";
    for (const auto &r : rows)
        out << io::fmt_exact(r.ratio) << ',' << to_string(r.features) << ',' << r.points << ','
            << io::fmt_exact(r.report.pdp_rmse.mean) << ',' << io::fmt_exact(r.report.pdp_rmse.median) << ','
            << io::fmt_exact(r.report.radio_map_rmse_db) << '\n';
    io::finish(out, path);
}

} // namespace ckm

#endif
