#pragma once

#include "mac/combine.hpp"
#include "mac/data_io.hpp"
#include "mac/error.hpp"
#include "mac/loss.hpp"
#include "mac/matrix.hpp"
#include "mac/mlp.hpp"
#include "mac/parallel.hpp"
#include "mac/rng.hpp"
#include "mac/synth.hpp"
#include "mac/trainer.hpp"
