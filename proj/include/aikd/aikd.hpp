#pragma once

#include "aikd/aggregate.hpp"
#include "aikd/augment.hpp"
#include "aikd/checkpoint.hpp"
#include "aikd/config.hpp"
#include "aikd/data.hpp"
#include "aikd/divergence.hpp"
#include "aikd/losses.hpp"
#include "aikd/metrics.hpp"
#include "aikd/models.hpp"
#include "aikd/optim.hpp"
#include "aikd/training.hpp"
