#pragma once

#include "ttstream/metrics.hpp"
#include "ttstream/runner.hpp"
#include "ttstream/svb_engine.hpp"
#include "ttstream/synthetic.hpp"
#include "ttstream/tensor_data.hpp"
#include "ttstream/tt_posterior.hpp"
