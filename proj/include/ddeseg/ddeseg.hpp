// Copyright 2026 The DDESeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "ddeseg/checkpoint.hpp"
#include "ddeseg/config.hpp"
#include "ddeseg/core/grad_check.hpp"
#include "ddeseg/derivation.hpp"
#include "ddeseg/elimination.hpp"
#include "ddeseg/grad_suite.hpp"
#include "ddeseg/kmeans.hpp"
#include "ddeseg/losses_metrics.hpp"
#include "ddeseg/model.hpp"
#include "ddeseg/semantic_memory.hpp"
#include "ddeseg/synth.hpp"
#include "ddeseg/train.hpp"
