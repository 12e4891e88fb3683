#pragma once

// Umbrella header for the inference-time fingerprinting toolkit.

#include "exitprint/arch.hpp"
#include "exitprint/attacks.hpp"
#include "exitprint/dataset.hpp"
#include "exitprint/experiment.hpp"
#include "exitprint/fingerprint.hpp"
#include "exitprint/layers.hpp"
#include "exitprint/model.hpp"
#include "exitprint/parallel.hpp"
#include "exitprint/rng.hpp"
#include "exitprint/runner.hpp"
#include "exitprint/serialize.hpp"
#include "exitprint/tensor.hpp"
#include "exitprint/train.hpp"
#include "exitprint/verify.hpp"
