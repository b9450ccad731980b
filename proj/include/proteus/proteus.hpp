#pragma once

// umbrella header

#include "proteus/ablate.hpp"
#include "proteus/autodiff.hpp"
#include "proteus/checkpoint.hpp"
#include "proteus/cli.hpp"
#include "proteus/config.hpp"
#include "proteus/dataset.hpp"
#include "proteus/distill.hpp"
#include "proteus/eval.hpp"
#include "proteus/gradcheck.hpp"
#include "proteus/lbfgs.hpp"
#include "proteus/mask.hpp"
#include "proteus/optim.hpp"
#include "proteus/rng.hpp"
#include "proteus/tensor.hpp"
#include "proteus/train.hpp"
#include "proteus/vit.hpp"
