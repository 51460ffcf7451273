#pragma once

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "ops.hpp"
#include "gradcheck.hpp"
#include "optim.hpp"
#include "attention.hpp"
#include "backbone.hpp"
#include "checkpoint.hpp"
#include "data.hpp"
#include "train.hpp"
#include "verify.hpp"
#include "experiments.hpp"
