#pragma once

// Umbrella header.
#include "dwgl/autodiff.hpp"
#include "dwgl/checkpoint.hpp"
#include "dwgl/cli.hpp"
#include "dwgl/config.hpp"
#include "dwgl/data.hpp"
#include "dwgl/error.hpp"
#include "dwgl/network.hpp"
#include "dwgl/optim.hpp"
#include "dwgl/pipeline.hpp"
#include "dwgl/pruning.hpp"
#include "dwgl/regularizer.hpp"
#include "dwgl/report.hpp"
#include "dwgl/rng.hpp"
#include "dwgl/tensor.hpp"
