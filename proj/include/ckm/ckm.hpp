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

#ifndef CKM_CKM_HPP
#define CKM_CKM_HPP

#include "ckm/ckm_builder.hpp"
#include "ckm/core.hpp"
#include "ckm/error.hpp"
#include "ckm/estimator.hpp"
#include "ckm/keyvalue.hpp"
#include "ckm/kriging.hpp"
#include "ckm/nn.hpp"
#include "ckm/pipeline.hpp"
#include "ckm/plot.hpp"
#include "ckm/pointcloud.hpp"
#include "ckm/selector.hpp"
#include "ckm/synthlab.hpp"

#endif
