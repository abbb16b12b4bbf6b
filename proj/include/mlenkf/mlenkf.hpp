#pragma once

#include "enkf.hpp"
#include "harness.hpp"
#include "models.hpp"
#include "multilevel.hpp"
#include "parallel.hpp"
#include "reference.hpp"
#include "rng.hpp"
