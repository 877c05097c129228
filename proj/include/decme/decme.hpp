#pragma once

#include "decme/common.hpp"
#include "decme/rng.hpp"
#include "decme/linalg_spectral.hpp"
#include "decme/line_search.hpp"
#include "decme/em_core.hpp"
#include "decme/models.hpp"
#include "decme/dm_probe.hpp"
#include "decme/verify.hpp"
#include "decme/bench.hpp"
