#pragma once

#include "deepedm/rng.hpp"
#include "deepedm/tensor.hpp"
#include "deepedm/nn.hpp"
#include "deepedm/timeseries.hpp"
#include "deepedm/dynamics.hpp"
#include "deepedm/embedding.hpp"
#include "deepedm/simplex.hpp"
#include "deepedm/model.hpp"
#include "deepedm/loss.hpp"
#include "deepedm/train.hpp"
#include "deepedm/metrics.hpp"
#include "deepedm/harness.hpp"
