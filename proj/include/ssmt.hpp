#pragma once

#include "ssmt/errors.hpp"
#include "ssmt/tensor.hpp"
#include "ssmt/autodiff.hpp"
#include "ssmt/optim.hpp"
#include "ssmt/data.hpp"
#include "ssmt/tasks.hpp"
#include "ssmt/graph_memory.hpp"
#include "ssmt/model.hpp"
#include "ssmt/losses.hpp"
#include "ssmt/config.hpp"
#include "ssmt/checkpoint.hpp"
#include "ssmt/maml.hpp"
#include "ssmt/trainer.hpp"
#include "ssmt/eval.hpp"
