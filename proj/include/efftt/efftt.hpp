/*
 * Copyright (c) 2026, The efftt authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include "efftt/common.hpp"
#include "efftt/tt_core.hpp"
#include "efftt/lookup.hpp"
#include "efftt/backward.hpp"
#include "efftt/reorder.hpp"
#include "efftt/data.hpp"
#include "efftt/model.hpp"
#include "efftt/checkpoint.hpp"
#include "efftt/pipeline.hpp"
#include "efftt/cli.hpp"
