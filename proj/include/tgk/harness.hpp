#pragma once

#include "tgk/harness/config.hpp"
#include "tgk/harness/dataset.hpp"
#include "tgk/harness/experiment.hpp"
#include "tgk/harness/model.hpp"
#include "tgk/harness/parallel.hpp"
