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

#ifndef CKM_KEYVALUE_HPP
#define CKM_KEYVALUE_HPP

#include "ckm/core.hpp"
#include "ckm/error.hpp"
#include "ckm/io_util.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ckm
{

// Flat `key = value` text: one pair per line, '#' starts a comment, blank lines ignored.
// Keys keep their first-seen order; a repeated key is an error.
class KeyValueFile
{
public:
    struct Entry
    {
        std::string key;
        std::string value;
        std::size_t line = 0; // 0 for values set programmatically
    };

    static KeyValueFile parse(std::string_view text, const std::string &origin = "<text>")
    {
        KeyValueFile kv;
        kv.origin_ = origin;
        std::size_t lineno = 0;
        std::size_t start = 0;
        while (start <= text.size())
        {
            const auto nl = text.find('\n', start);
            auto line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string_view::npos)
                line = line.substr(0, hash);
            line = io::trim(line);
            if (!line.empty())
            {
                const auto eq = line.find('=');
                if (eq == std::string_view::npos)
                    throw ParseError(origin + ": expected 'key = value'", lineno);
                const auto key = io::trim(line.substr(0, eq));
                if (key.empty())
                    throw ParseError(origin + ": empty key", lineno);
                if (kv.find(key))
                    throw ParseError(origin + ": duplicate key '" + std::string(key) + "'", lineno);
                kv.entries_.push_back({std::string(key), std::string(io::trim(line.substr(eq + 1))), lineno});
            }
            if (nl == std::string_view::npos)
                break;
            start = nl + 1;
        }
        return kv;
    }

    static KeyValueFile load(const std::filesystem::path &path)
    {
        auto in = io::open_in(path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse(text, path.string());
    }

    const std::vector<Entry> &entries() const { return entries_; }
    const std::string &origin() const { return origin_; }

    const Entry *find(std::string_view key) const
    {
        for (const auto &e : entries_)
            if (e.key == key)
                return &e;
        return nullptr;
    }

    bool has(std::string_view key) const { return find(key) != nullptr; }

    // Insert or replace.
    void set(const std::string &key, const std::string &value)
    {
        for (auto &e : entries_)
            if (e.key == key)
            {
                e.value = value;
                e.line = 0;
                return;
            }
        entries_.push_back({key, value, 0});
    }

    const Entry &require(std::string_view key) const
    {
        if (const auto *e = find(key))
            return *e;
        throw ConfigError(origin_ + ": missing required key '" + std::string(key) + "'");
    }

    std::string get_string(std::string_view key) const { return require(key).value; }

    double get_double(std::string_view key) const
    {
        const auto &e = require(key);
        double v = 0.0;
        if (!io::try_parse_double(e.value, v))
            throw ConfigError(where(e) + ": '" + e.key + "' is not a number");
        return v;
    }

    long long get_int(std::string_view key) const
    {
        const auto &e = require(key);
        try
        {
            return io::parse_int(e.value);
        }
        catch (const ParseError &)
        {
            throw ConfigError(where(e) + ": '" + e.key + "' is not an integer");
        }
    }

    std::vector<double> get_doubles(std::string_view key) const
    {
        const auto &e = require(key);
        std::vector<double> out;
        std::string v = e.value;
        for (auto &ch : v)
            if (ch == ',')
                ch = ' ';
        for (auto t : io::tokens(v))
        {
            double d = 0.0;
            if (!io::try_parse_double(t, d))
                throw ConfigError(where(e) + ": '" + e.key + "' must be a list of numbers");
            out.push_back(d);
        }
        return out;
    }

    Vec3 get_vec3(std::string_view key) const
    {
        const auto v = get_doubles(key);
        if (v.size() != 3)
            throw ConfigError(where(require(key)) + ": '" + std::string(key) + "' needs three numbers");
        return {v[0], v[1], v[2]};
    }

    double get_double(std::string_view key, double fallback) const { return has(key) ? get_double(key) : fallback; }
    long long get_int(std::string_view key, long long fallback) const { return has(key) ? get_int(key) : fallback; }
    std::string get_string(std::string_view key, const std::string &fallback) const
    {
        return has(key) ? get_string(key) : fallback;
    }

    std::string where(const Entry &e) const
    {
        return e.line ? origin_ + ":" + std::to_string(e.line) : origin_;
    }

private:
    std::string origin_;
    std::vector<Entry> entries_;
};

} // namespace ckm

#endif
