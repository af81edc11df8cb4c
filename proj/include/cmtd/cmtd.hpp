#pragma once

#include "cmtd/error.hpp"
#include "cmtd/rng.hpp"
#include "cmtd/tensor.hpp"
#include "cmtd/autodiff.hpp"
#include "cmtd/gradcheck.hpp"
#include "cmtd/model.hpp"
#include "cmtd/container.hpp"
#include "cmtd/weights.hpp"
#include "cmtd/data.hpp"
#include "cmtd/train.hpp"
#include "cmtd/batch.hpp"
#include "cmtd/attacks.hpp"
#include "cmtd/defence.hpp"
#include "cmtd/eval.hpp"
