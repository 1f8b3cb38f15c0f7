#pragma once

#include "dii/error.hpp"
#include "dii/linalg.hpp"
#include "dii/rng.hpp"
#include "dii/autodiff.hpp"
#include "dii/optim.hpp"
#include "dii/models.hpp"
#include "dii/intervention.hpp"
#include "dii/illusion.hpp"
#include "dii/metrics.hpp"
#include "dii/tasks.hpp"
#include "dii/das.hpp"
#include "dii/experiments.hpp"
#include "dii/io.hpp"
