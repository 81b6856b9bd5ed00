#pragma once

#include "fleetlens/aggregation.hpp"
#include "fleetlens/backend.hpp"
#include "fleetlens/curation.hpp"
#include "fleetlens/digest.hpp"
#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"
#include "fleetlens/evaluation.hpp"
#include "fleetlens/ingestion.hpp"
#include "fleetlens/random.hpp"
#include "fleetlens/serialize.hpp"
#include "fleetlens/service.hpp"
#include "fleetlens/store.hpp"
#include "fleetlens/timeutil.hpp"
