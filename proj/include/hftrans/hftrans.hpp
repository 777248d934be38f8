#pragma once

#include "hftrans/checkpoint.hpp"
#include "hftrans/complexity.hpp"
#include "hftrans/config.hpp"
#include "hftrans/conv.hpp"
#include "hftrans/grad_check.hpp"
#include "hftrans/grad_suite.hpp"
#include "hftrans/kfold.hpp"
#include "hftrans/losses.hpp"
#include "hftrans/metrics.hpp"
#include "hftrans/model.hpp"
#include "hftrans/ops.hpp"
#include "hftrans/optim.hpp"
#include "hftrans/phantom.hpp"
#include "hftrans/preprocess.hpp"
#include "hftrans/random.hpp"
#include "hftrans/tensor.hpp"
#include "hftrans/train.hpp"
#include "hftrans/volume.hpp"
#include "hftrans/volume_io.hpp"
