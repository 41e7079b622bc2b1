#pragma once

#include "mobhfl/analysis.hpp"
#include "mobhfl/datasets.hpp"
#include "mobhfl/engine.hpp"
#include "mobhfl/errors.hpp"
#include "mobhfl/mobility.hpp"
#include "mobhfl/models.hpp"
#include "mobhfl/param_vector.hpp"
#include "mobhfl/rng.hpp"
