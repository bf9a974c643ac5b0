#pragma once

#include "adsam/checkpoint.hpp"
#include "adsam/config.hpp"
#include "adsam/data.hpp"
#include "adsam/deform.hpp"
#include "adsam/errors.hpp"
#include "adsam/fusion.hpp"
#include "adsam/losses.hpp"
#include "adsam/metrics.hpp"
#include "adsam/model.hpp"
#include "adsam/nn_ops.hpp"
#include "adsam/ops.hpp"
#include "adsam/optim.hpp"
#include "adsam/png_io.hpp"
#include "adsam/random.hpp"
#include "adsam/tensor.hpp"
#include "adsam/trainer.hpp"
