#pragma once

// Growth curve modeling with missing longitudinal data: FIML, two-stage
// robust estimation, and a median-based Bayesian sampler, plus the Monte
// Carlo harness comparing them.

#define GCM_VERSION "0.1.0"

#include "gcm/csv.hpp"
#include "gcm/datagen.hpp"
#include "gcm/distributions.hpp"
#include "gcm/fiml.hpp"
#include "gcm/geweke.hpp"
#include "gcm/model.hpp"
#include "gcm/optimize.hpp"
#include "gcm/param_transform.hpp"
#include "gcm/rmb.hpp"
#include "gcm/rng.hpp"
#include "gcm/simstudy.hpp"
#include "gcm/tsre.hpp"
#include "gcm/types.hpp"
