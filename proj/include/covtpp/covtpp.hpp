#pragma once

// Umbrella header.

#include "covtpp/autodiff.hpp"
#include "covtpp/config.hpp"
#include "covtpp/data.hpp"
#include "covtpp/decoder.hpp"
#include "covtpp/encoder.hpp"
#include "covtpp/errors.hpp"
#include "covtpp/fisan.hpp"
#include "covtpp/gradcheck.hpp"
#include "covtpp/model.hpp"
#include "covtpp/model_check.hpp"
#include "covtpp/parallel.hpp"
#include "covtpp/param_store.hpp"
#include "covtpp/serialize.hpp"
#include "covtpp/simulator.hpp"
#include "covtpp/tensor.hpp"
#include "covtpp/train.hpp"
