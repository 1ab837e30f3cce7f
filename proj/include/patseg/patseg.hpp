#pragma once

#include "patseg/adam.hpp"
#include "patseg/cascade.hpp"
#include "patseg/checkpoint.hpp"
#include "patseg/cli.hpp"
#include "patseg/errors.hpp"
#include "patseg/gradcheck.hpp"
#include "patseg/image.hpp"
#include "patseg/imgproc.hpp"
#include "patseg/metrics.hpp"
#include "patseg/ops.hpp"
#include "patseg/patterns.hpp"
#include "patseg/rng.hpp"
#include "patseg/synth.hpp"
#include "patseg/tensor.hpp"
#include "patseg/trainer.hpp"
