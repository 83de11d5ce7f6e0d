// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "acm/activation.hpp"
#include "acm/calib.hpp"
#include "acm/coefficients.hpp"
#include "acm/dtype.hpp"
#include "acm/error.hpp"
#include "acm/hash.hpp"
#include "acm/merge.hpp"
#include "acm/mi.hpp"
#include "acm/parallel.hpp"
#include "acm/philox.hpp"
#include "acm/taskvector.hpp"
#include "acm/tensorstore.hpp"
#include "acm/toy.hpp"

namespace acm {

inline constexpr const char* kVersion = "0.3.0";

}  // namespace acm
