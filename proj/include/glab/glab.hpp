// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "glab/core/binary_io.hpp"
#include "glab/core/crc64.hpp"
#include "glab/core/error.hpp"
#include "glab/core/grad_check.hpp"
#include "glab/core/linalg.hpp"
#include "glab/core/ops.hpp"
#include "glab/core/parameter_store.hpp"
#include "glab/core/random.hpp"
#include "glab/core/tensor.hpp"

#include "glab/ablation.hpp"
#include "glab/bridge.hpp"
#include "glab/checkpoint.hpp"
#include "glab/config.hpp"
#include "glab/curriculum.hpp"
#include "glab/decoder.hpp"
#include "glab/encoder.hpp"
#include "glab/losses.hpp"
#include "glab/metrics.hpp"
#include "glab/model.hpp"
#include "glab/nn.hpp"
#include "glab/optim.hpp"
#include "glab/synthdata.hpp"
