/* Copyright 2026 The imbalance-forge Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include "imbalance_forge/diffmath.hpp"
#include "imbalance_forge/errors.hpp"
#include "imbalance_forge/io.hpp"
#include "imbalance_forge/label_map.hpp"
#include "imbalance_forge/losses.hpp"
#include "imbalance_forge/manifest.hpp"
#include "imbalance_forge/metrics.hpp"
#include "imbalance_forge/parallel.hpp"
#include "imbalance_forge/rng.hpp"
#include "imbalance_forge/sampling.hpp"
#include "imbalance_forge/schedule.hpp"
#include "imbalance_forge/synth.hpp"
#include "imbalance_forge/tensor.hpp"
#include "imbalance_forge/trainer.hpp"
