#pragma once

#include "teachcut/changepoint.hpp"
#include "teachcut/diagnostics.hpp"
#include "teachcut/errors.hpp"
#include "teachcut/json_io.hpp"
#include "teachcut/margin.hpp"
#include "teachcut/pipeline.hpp"
#include "teachcut/random.hpp"
#include "teachcut/reweight.hpp"
#include "teachcut/rollout.hpp"
#include "teachcut/segmentation.hpp"
#include "teachcut/synthetic.hpp"
