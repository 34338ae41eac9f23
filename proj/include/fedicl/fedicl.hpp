#pragma once

/// Umbrella header for the whole library.

#include "fedicl/core.hpp"
#include "fedicl/lsa.hpp"
#include "fedicl/theory.hpp"
#include "fedicl/data.hpp"
#include "fedicl/backend.hpp"
#include "fedicl/remote.hpp"
#include "fedicl/protocol.hpp"
#include "fedicl/experiment.hpp"
