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

#ifndef CKM_ERROR_HPP
#define CKM_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

// Precondition violations throw std::invalid_argument / std::domain_error.
// The types below cover failures that callers (mostly the CLI) need to tell apart.

namespace ckm
{

// Malformed input file. Carries the 1-based line number when known (0 otherwise).
class ParseError : public std::runtime_error
{
public:
    ParseError(const std::string &what, std::size_t line = 0)
        : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line)
    {
    }
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// Missing or unreadable/unwritable file.
class IoError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

// Bad or incomplete run configuration.
class ConfigError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values during optimisation, singular systems that could not be repaired.
class NumericError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

} // namespace ckm

#endif
