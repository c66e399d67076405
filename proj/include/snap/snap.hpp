#pragma once

#include "snap/kernels.hpp"
#include "snap/pattern.hpp"
#include "snap/cells.hpp"
#include "snap/readout.hpp"
#include "snap/engines.hpp"
#include "snap/optim.hpp"
#include "snap/tasks.hpp"
#include "snap/costmodel.hpp"
#include "snap/harness.hpp"
#include "snap/checks.hpp"
