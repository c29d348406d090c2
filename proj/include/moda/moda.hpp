// Copyright (c) 2026 the moda authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moda/aligner.hpp"
#include "moda/attention.hpp"
#include "moda/config.hpp"
#include "moda/diagnostics.hpp"
#include "moda/errors.hpp"
#include "moda/masks.hpp"
#include "moda/matrix.hpp"
#include "moda/modality.hpp"
#include "moda/model.hpp"
#include "moda/rng.hpp"
#include "moda/synthetic.hpp"
#include "moda/train.hpp"
