// Umbrella header.
#pragma once

#include "sigmatch/core.hpp"
#include "sigmatch/embedder.hpp"
#include "sigmatch/featurestore.hpp"
#include "sigmatch/losses.hpp"
#include "sigmatch/matcher.hpp"
#include "sigmatch/metrics.hpp"
#include "sigmatch/mining.hpp"
#include "sigmatch/plot.hpp"
#include "sigmatch/trainer.hpp"
