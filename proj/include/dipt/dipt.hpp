#pragma once

#include "errors.hpp"
#include "graph.hpp"
#include "inference.hpp"
#include "influence.hpp"
#include "metrics.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "seed_prior.hpp"
#include "serialize.hpp"
#include "simulators.hpp"
#include "text_io.hpp"
#include "training.hpp"
#include "tree.hpp"
