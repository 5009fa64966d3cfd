#pragma once

#include "dpcnet/attention.hpp"
#include "dpcnet/autodiff.hpp"
#include "dpcnet/config.hpp"
#include "dpcnet/data.hpp"
#include "dpcnet/errors.hpp"
#include "dpcnet/fft.hpp"
#include "dpcnet/gradcheck.hpp"
#include "dpcnet/gradcheck_suite.hpp"
#include "dpcnet/layers.hpp"
#include "dpcnet/losses.hpp"
#include "dpcnet/metrics.hpp"
#include "dpcnet/model.hpp"
#include "dpcnet/ops.hpp"
#include "dpcnet/random.hpp"
#include "dpcnet/tensor.hpp"
#include "dpcnet/training.hpp"
