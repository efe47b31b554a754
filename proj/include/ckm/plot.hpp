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

#ifndef CKM_PLOT_HPP
#define CKM_PLOT_HPP

#include "ckm/core.hpp"
#include "ckm/io_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ckm
{

// Linear gray level of v in [lo, hi]: round((v - lo) / (hi - lo) * 255) after clipping.
// NaN maps to 0.
inline std::uint8_t gray_level(double v, double lo, double hi)
{
    if (std::isnan(v))
        return 0;
    const double c = std::clamp(v, lo, hi);
    return static_cast<std::uint8_t>(std::lround((c - lo) / (hi - lo) * 255.0));
}

// Binary 8-bit PGM of an nx x ny map stored row-major (index iy * nx + ix). The first image
// row is the largest y.
inline void save_pgm(const std::filesystem::path &path, std::size_t nx, std::size_t ny, std::span<const double> values,
                     double lo, double hi)
{
    if (values.size() != nx * ny)
        throw std::invalid_argument("save_pgm: value count does not match nx * ny.");
    if (!(hi > lo))
        throw std::invalid_argument("save_pgm: need max > min.");
    auto out = io::open_out(path);
    out << "P5\n" << nx << ' ' << ny << "\n255\n";
    std::vector<char> row(nx);
    for (std::size_t r = 0; r < ny; ++r)
    {
        const std::size_t iy = ny - 1 - r;
        for (std::size_t ix = 0; ix < nx; ++ix)
            row[ix] = static_cast<char>(gray_level(values[iy * nx + ix], lo, hi));
        out.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    io::finish(out, path);
}

// PDP trace: bin,toa_ns,gain_db with arrival times relative to the first bin.
inline void save_pdp_trace(const std::filesystem::path &path, std::span<const double> gains,
                           const ChannelConfig &cfg)
{
    auto out = io::open_out(path);
    out << "bin,toa_ns,gain_db\n";
    const double floor = cfg.noise_floor_linear();
    for (std::size_t k = 0; k < gains.size(); ++k)
        out << k << ',' << io::fmt_exact(static_cast<double>(k) * cfg.sample_interval * 1e9) << ','
            << io::fmt_exact(to_db(std::max(gains[k], floor), Scale::amplitude)) << '\n';
    io::finish(out, path);
}

} // namespace ckm

#endif
