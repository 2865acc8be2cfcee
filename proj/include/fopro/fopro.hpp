// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fopro/core.hpp"
#include "fopro/datagen.hpp"
#include "fopro/nn.hpp"
#include "fopro/model.hpp"
#include "fopro/prototypes.hpp"
#include "fopro/losses.hpp"
#include "fopro/curation.hpp"
#include "fopro/config.hpp"
#include "fopro/optim.hpp"
#include "fopro/trainer.hpp"
#include "fopro/checkpoint.hpp"
#include "fopro/eval.hpp"
