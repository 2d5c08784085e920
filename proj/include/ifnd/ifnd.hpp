#pragma once

#include "ifnd/embedding.hpp"
#include "ifnd/error.hpp"
#include "ifnd/harness.hpp"
#include "ifnd/losses.hpp"
#include "ifnd/matrix.hpp"
#include "ifnd/metrics.hpp"
#include "ifnd/pseudo_labels.hpp"
#include "ifnd/trainer.hpp"
