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

#ifndef CKM_RUN_CONFIG_HPP
#define CKM_RUN_CONFIG_HPP

#include "ckm/ckm_builder.hpp"
#include "ckm/error.hpp"
#include "ckm/estimator.hpp"
#include "ckm/keyvalue.hpp"
#include "ckm/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

// Flat run configuration shared by every subcommand. Values come from an optional key-value
// file, then CKM_* environment variables, then command-line assignments; later sources win.
// Relative paths are resolved against the directory of the file that set them (the working
// directory for environment and command-line values).

namespace ckm
{

inline const std::vector<std::string> &run_config_keys()
{
    static const std::vector<std::string> keys{
        "seed",
        "out_dir",
        "scene",
        "cloud",
        "observations",
        "model",
        "tx",
        "channel.speed_of_light",
        "channel.sample_interval",
        "channel.pdp_length",
        "channel.noise_floor_db",
        "channel.carrier_frequency",
        "network.n_input",
        "network.sa1.n_sample",
        "network.sa1.k_neighbors",
        "network.sa1.mlp_widths",
        "network.sa2.n_sample",
        "network.sa2.k_neighbors",
        "network.sa2.mlp_widths",
        "network.encoder_width",
        "network.head_widths",
        "network.dropout_rate",
        "network.batchnorm",
        "network.features",
        "network.target_scale",
        "network.input_seed",
        "training.learning_rate",
        "training.epochs",
        "training.batch_size",
        "training.split_fraction",
        "training.seed",
        "receivers.count",
        "receivers.min",
        "receivers.max",
        "receivers.seed",
        "grid.origin",
        "grid.dx",
        "grid.dy",
        "grid.nx",
        "grid.ny",
        "grid.z",
        "select.rx",
        "select.bin",
        "sweep.ratios",
        "sweep.seed",
        "kriging.seed",
        "plot.input",
        "plot.kind",
        "plot.min_db",
        "plot.max_db",
        "plot.ix",
        "plot.iy",
        "plot.output",
    };
    return keys;
}

// Environment variable for a key: CKM_ + upper case, '.' -> '_'.
inline std::string env_name(const std::string &key)
{
    std::string s = "CKM_";
    for (char c : key)
        s += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

class RunConfig
{
    // Validation failures of typed settings become configuration errors.
    template <typename F>
    static auto guard(F &&f)
    {
        try
        {
            return f();
        }
        catch (const std::invalid_argument &ex)
        {
            throw ConfigError(ex.what());
        }
    }

public:
    RunConfig() : kv_(KeyValueFile::parse("", "<defaults>")) {}

    static bool known(const std::string &key)
    {
        const auto &k = run_config_keys();
        return std::find(k.begin(), k.end(), key) != k.end();
    }

    void load_file(const std::filesystem::path &path)
    {
        auto file = KeyValueFile::load(path);
        const auto base = std::filesystem::absolute(path).parent_path();
        for (const auto &e : file.entries())
        {
            if (!known(e.key))
                throw ConfigError(file.where(e) + ": unknown key '" + e.key + "'");
            set(e.key, e.value, base);
        }
    }

    // getenv-style lookup, injectable for tests.
    template <typename Lookup>
    void apply_environment(Lookup &&lookup)
    {
        for (const auto &key : run_config_keys())
            if (const char *v = lookup(env_name(key).c_str()))
                set(key, v, std::filesystem::current_path());
    }

    void apply_environment()
    {
        apply_environment([](const char *name) { return std::getenv(name); });
    }

    // "key=value" from the command line.
    void apply_assignment(const std::string &assignment)
    {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key=value, got '" + assignment + "'");
        const std::string key(io::trim(assignment.substr(0, eq)));
        if (!known(key))
            throw ConfigError("unknown key '" + key + "'");
        set(key, std::string(io::trim(assignment.substr(eq + 1))), std::filesystem::current_path());
    }

    void set(const std::string &key, const std::string &value, const std::filesystem::path &base)
    {
        if (!known(key))
            throw ConfigError("unknown key '" + key + "'");
        kv_.set(key, value);
        base_[key] = base;
    }

    bool has(const std::string &key) const { return kv_.has(key); }
    const KeyValueFile &values() const { return kv_; }

    std::string str(const std::string &key) const { return kv_.get_string(key); }
    double num(const std::string &key) const { return kv_.get_double(key); }
    double num(const std::string &key, double fallback) const { return kv_.get_double(key, fallback); }

    std::size_t count(const std::string &key) const
    {
        const auto v = kv_.get_int(key);
        if (v < 0)
            throw ConfigError("'" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    }
    std::size_t count(const std::string &key, std::size_t fallback) const
    {
        return has(key) ? count(key) : fallback;
    }

    std::vector<std::size_t> counts(const std::string &key) const
    {
        std::vector<std::size_t> out;
        for (double d : kv_.get_doubles(key))
        {
            if (!(d >= 0.0) || d != std::floor(d))
                throw ConfigError("'" + key + "' must be a list of non-negative integers");
            out.push_back(static_cast<std::size_t>(d));
        }
        return out;
    }

    Vec3 vec3(const std::string &key) const { return kv_.get_vec3(key); }

    std::uint64_t seed(const std::string &key) const
    {
        const std::string k = has(key) ? key : "seed";
        if (!has(k))
            return 1;
        const auto v = kv_.get_int(k);
        if (v < 0)
            throw ConfigError("'" + k + "' must be non-negative");
        return static_cast<std::uint64_t>(v);
    }

    std::filesystem::path path(const std::string &key) const
    {
        std::filesystem::path p = str(key);
        if (p.is_relative())
        {
            const auto it = base_.find(key);
            if (it != base_.end())
                p = it->second / p;
        }
        return p;
    }

    std::filesystem::path out_dir() const { return has("out_dir") ? path("out_dir") : std::filesystem::path("."); }

    // Input path: the configured one, or `name` inside the output directory.
    std::filesystem::path input(const std::string &key, const std::string &name) const
    {
        return has(key) ? path(key) : out_dir() / name;
    }

    ChannelConfig channel() const
    {
        ChannelConfig c;
        c.speed_of_light = num("channel.speed_of_light", c.speed_of_light);
        c.sample_interval = num("channel.sample_interval", c.sample_interval);
        c.pdp_length = count("channel.pdp_length", c.pdp_length);
        c.noise_floor_db = num("channel.noise_floor_db", c.noise_floor_db);
        c.carrier_frequency = num("channel.carrier_frequency", c.carrier_frequency);
        guard([&] { c.validate(); });
        return c;
    }

    PipelineConfig pipeline() const
    {
        PipelineConfig p;
        p.channel = channel();
        auto &n = p.network;
        n.n_input = count("network.n_input", n.n_input);
        n.sa1.n_sample = count("network.sa1.n_sample", n.sa1.n_sample);
        n.sa1.k_neighbors = count("network.sa1.k_neighbors", n.sa1.k_neighbors);
        if (has("network.sa1.mlp_widths"))
            n.sa1.mlp_widths = counts("network.sa1.mlp_widths");
        n.sa2.n_sample = count("network.sa2.n_sample", n.sa2.n_sample);
        n.sa2.k_neighbors = count("network.sa2.k_neighbors", n.sa2.k_neighbors);
        if (has("network.sa2.mlp_widths"))
            n.sa2.mlp_widths = counts("network.sa2.mlp_widths");
        n.encoder_width = count("network.encoder_width", n.encoder_width);
        if (has("network.head_widths"))
            n.head_widths = counts("network.head_widths");
        n.dropout_rate = num("network.dropout_rate", n.dropout_rate);
        n.batchnorm_enabled = count("network.batchnorm", n.batchnorm_enabled ? 1 : 0) != 0;
        if (has("network.features"))
            n.features = guard([&] { return parse_feature_set(str("network.features")); });
        if (has("network.target_scale"))
        {
            const auto s = str("network.target_scale");
            if (s != "decibel" && s != "linear")
                throw ConfigError("network.target_scale must be 'decibel' or 'linear'");
            p.target_scale = s == "decibel" ? TargetScale::decibel : TargetScale::linear;
        }
        p.input_seed = has("network.input_seed") ? seed("network.input_seed") : p.input_seed;

        auto &t = p.training;
        t.learning_rate = num("training.learning_rate", t.learning_rate);
        t.epochs = count("training.epochs", t.epochs);
        t.batch_size = count("training.batch_size", t.batch_size);
        t.split_fraction = num("training.split_fraction", t.split_fraction);
        t.seed = seed("training.seed");
        t.alpha_min_linear = p.channel.noise_floor_linear();
        guard([&] { p.validate(); });
        return p;
    }

    GridSpec grid() const
    {
        GridSpec g;
        g.origin = vec3("grid.origin");
        g.dx = num("grid.dx");
        g.dy = num("grid.dy");
        g.nx = count("grid.nx");
        g.ny = count("grid.ny");
        g.z = num("grid.z", g.origin.z());
        guard([&] { g.validate(); });
        return g;
    }

private:
    KeyValueFile kv_;
    std::map<std::string, std::filesystem::path> base_;
};

} // namespace ckm

#endif
