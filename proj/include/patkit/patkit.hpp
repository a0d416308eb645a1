#pragma once

#include "patkit/attention.hpp"
#include "patkit/checkpoint.hpp"
#include "patkit/common.hpp"
#include "patkit/config.hpp"
#include "patkit/dataio.hpp"
#include "patkit/embedding.hpp"
#include "patkit/geometry.hpp"
#include "patkit/model.hpp"
#include "patkit/nn.hpp"
#include "patkit/rng.hpp"
#include "patkit/sampling.hpp"
#include "patkit/tensor.hpp"
