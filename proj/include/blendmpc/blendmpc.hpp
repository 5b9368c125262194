#pragma once

// Umbrella header for the core library. The network front end lives in net/server.hpp.

#include "types.hpp"
#include "dynamics.hpp"
#include "safety.hpp"
#include "human_model.hpp"
#include "qp.hpp"
#include "nmpc.hpp"
#include "arbitration.hpp"
#include "adaptation.hpp"
#include "operator.hpp"
#include "scenario.hpp"
#include "simulation.hpp"
#include "batch.hpp"
#include "service.hpp"
