// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "kvedit/checkpoint.hpp"
#include "kvedit/dataset.hpp"
#include "kvedit/errors.hpp"
#include "kvedit/experiments.hpp"
#include "kvedit/flow.hpp"
#include "kvedit/image_io.hpp"
#include "kvedit/inf_edit.hpp"
#include "kvedit/kv_cache.hpp"
#include "kvedit/kv_edit.hpp"
#include "kvedit/mask.hpp"
#include "kvedit/metrics.hpp"
#include "kvedit/model.hpp"
#include "kvedit/partition.hpp"
#include "kvedit/rng.hpp"
#include "kvedit/tensor.hpp"
#include "kvedit/tensor_io.hpp"
#include "kvedit/train.hpp"
