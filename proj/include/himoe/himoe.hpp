#pragma once

#include "himoe/autodiff.hpp"
#include "himoe/checkpoint.hpp"
#include "himoe/config.hpp"
#include "himoe/diagnostics.hpp"
#include "himoe/errors.hpp"
#include "himoe/expert.hpp"
#include "himoe/losses.hpp"
#include "himoe/numerics.hpp"
#include "himoe/params.hpp"
#include "himoe/routing.hpp"
#include "himoe/synthetic.hpp"
#include "himoe/trace.hpp"
#include "himoe/trainer.hpp"
#include "himoe/variants.hpp"
