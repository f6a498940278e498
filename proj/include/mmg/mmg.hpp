#pragma once

#include "mmg/channel.hpp"
#include "mmg/checkpoint.hpp"
#include "mmg/config.hpp"
#include "mmg/denoiser.hpp"
#include "mmg/error.hpp"
#include "mmg/estimator.hpp"
#include "mmg/harness.hpp"
#include "mmg/mlp.hpp"
#include "mmg/optim.hpp"
#include "mmg/rng.hpp"
#include "mmg/tasks.hpp"
#include "mmg/training.hpp"
