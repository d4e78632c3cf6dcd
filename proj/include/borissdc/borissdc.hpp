#pragma once

// Everything in one include.

#include "borissdc/errors.hpp"
#include "borissdc/vec3.hpp"
#include "borissdc/verlet_matrices.hpp"
#include "borissdc/quadrature.hpp"
#include "borissdc/fields.hpp"
#include "borissdc/boris_kernel.hpp"
#include "borissdc/integrators.hpp"
#include "borissdc/linear_analysis.hpp"
#include "borissdc/harness.hpp"
