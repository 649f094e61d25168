// Copyright 2026 The selfdistill Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Convenience header pulling in the whole library except the CLI.
#pragma once

#include "selfdistill/core_types.hpp"
#include "selfdistill/curation.hpp"
#include "selfdistill/errors.hpp"
#include "selfdistill/io_formats.hpp"
#include "selfdistill/keypoints.hpp"
#include "selfdistill/metrics.hpp"
#include "selfdistill/orchestrator.hpp"
#include "selfdistill/plugin_protocol.hpp"
#include "selfdistill/pseudolabel.hpp"
#include "selfdistill/sim_detector.hpp"
#include "selfdistill/subprocess.hpp"
