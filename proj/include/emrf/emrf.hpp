#pragma once

#include "emrf/blocks.hpp"
#include "emrf/checkpoint.hpp"
#include "emrf/common.hpp"
#include "emrf/config.hpp"
#include "emrf/em.hpp"
#include "emrf/image.hpp"
#include "emrf/image_io.hpp"
#include "emrf/metrics.hpp"
#include "emrf/model.hpp"
#include "emrf/nn.hpp"
#include "emrf/params.hpp"
#include "emrf/rain.hpp"
#include "emrf/tensor.hpp"
#include "emrf/train.hpp"
