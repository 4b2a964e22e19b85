#pragma once

#include "ctfm/ops/basic.hpp"
#include "ctfm/ops/linalg.hpp"
#include "ctfm/ops/nn.hpp"
