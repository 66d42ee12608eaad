#pragma once

#include "crowdloss/annotation.hpp"
#include "crowdloss/common.hpp"
#include "crowdloss/config.hpp"
#include "crowdloss/loss.hpp"
#include "crowdloss/metrics.hpp"
#include "crowdloss/mixture.hpp"
#include "crowdloss/model.hpp"
#include "crowdloss/synth.hpp"
#include "crowdloss/train.hpp"
