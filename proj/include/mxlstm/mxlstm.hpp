#pragma once

#include "mxlstm/tensor.hpp"
#include "mxlstm/autodiff.hpp"
#include "mxlstm/geometry.hpp"
#include "mxlstm/gaussian.hpp"
#include "mxlstm/scene.hpp"
#include "mxlstm/model.hpp"
#include "mxlstm/data.hpp"
#include "mxlstm/training.hpp"
#include "mxlstm/evaluation.hpp"
#include "mxlstm/config.hpp"
#include "mxlstm/checkpoint.hpp"
