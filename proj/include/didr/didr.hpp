#pragma once

// Everything in one include.

#include "didr/allocator.hpp"
#include "didr/errors.hpp"
#include "didr/rng.hpp"

#include "didr/grad_core/adam.hpp"
#include "didr/grad_core/mlp.hpp"
#include "didr/grad_core/serialize.hpp"
#include "didr/grad_core/tape.hpp"

#include "didr/analytic/gmm.hpp"
#include "didr/analytic/quadrature.hpp"
#include "didr/analytic/tilted.hpp"
#include "didr/analytic/velocity.hpp"

#include "didr/diffusion/chains.hpp"
#include "didr/diffusion/forward.hpp"
#include "didr/diffusion/models.hpp"

#include "didr/drp/drp.hpp"
#include "didr/theory/theory.hpp"
#include "didr/align/pipeline.hpp"

#include "didr/exp/config.hpp"
#include "didr/exp/csv.hpp"
#include "didr/exp/run.hpp"
