#pragma once

#include "ctfm/autograd.hpp"
#include "ctfm/backbone.hpp"
#include "ctfm/checkpoint.hpp"
#include "ctfm/config.hpp"
#include "ctfm/cost.hpp"
#include "ctfm/data.hpp"
#include "ctfm/error.hpp"
#include "ctfm/gradcheck.hpp"
#include "ctfm/layers.hpp"
#include "ctfm/lwam.hpp"
#include "ctfm/lwfpm.hpp"
#include "ctfm/metrics.hpp"
#include "ctfm/model.hpp"
#include "ctfm/module.hpp"
#include "ctfm/ops.hpp"
#include "ctfm/rng.hpp"
#include "ctfm/tensor.hpp"
#include "ctfm/train.hpp"
