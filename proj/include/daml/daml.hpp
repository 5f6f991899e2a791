#pragma once

// Umbrella header.

#include "daml/core.hpp"
#include "daml/dynamics.hpp"
#include "daml/model_error.hpp"
#include "daml/surrogate.hpp"
#include "daml/lbfgs.hpp"
#include "daml/ensemble_da.hpp"
#include "daml/metrics.hpp"
#include "daml/em_trainer.hpp"
#include "daml/harness/config.hpp"
#include "daml/harness/io.hpp"
#include "daml/harness/experiment.hpp"
