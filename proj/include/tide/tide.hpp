#pragma once

#include "tide/errors.hpp"
#include "tide/rng.hpp"
#include "tide/tensor.hpp"
#include "tide/ops.hpp"
#include "tide/nn.hpp"
#include "tide/optim.hpp"
#include "tide/checkpoint.hpp"
#include "tide/geometry.hpp"
#include "tide/hungarian.hpp"
#include "tide/image.hpp"
#include "tide/data.hpp"
#include "tide/backbone.hpp"
#include "tide/fusion.hpp"
#include "tide/head.hpp"
#include "tide/model.hpp"
#include "tide/loss.hpp"
#include "tide/eval.hpp"
#include "tide/config.hpp"
#include "tide/train.hpp"
#include "tide/commands.hpp"
