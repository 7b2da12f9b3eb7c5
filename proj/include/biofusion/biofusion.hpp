#pragma once

#include "biofusion/checkpoint.hpp"
#include "biofusion/coxph.hpp"
#include "biofusion/data.hpp"
#include "biofusion/errors.hpp"
#include "biofusion/fusion.hpp"
#include "biofusion/gradcheck.hpp"
#include "biofusion/metrics.hpp"
#include "biofusion/optim.hpp"
#include "biofusion/rng.hpp"
#include "biofusion/survival.hpp"
#include "biofusion/synthetic.hpp"
#include "biofusion/tensor.hpp"
#include "biofusion/training.hpp"
