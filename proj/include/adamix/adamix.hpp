#pragma once

#include "adamix/ablation.hpp"
#include "adamix/adaptation.hpp"
#include "adamix/checkpoint.hpp"
#include "adamix/commands.hpp"
#include "adamix/config.hpp"
#include "adamix/data.hpp"
#include "adamix/errors.hpp"
#include "adamix/gradcheck.hpp"
#include "adamix/mixture.hpp"
#include "adamix/ops.hpp"
#include "adamix/plot.hpp"
#include "adamix/rng.hpp"
#include "adamix/tensor.hpp"
#include "adamix/training.hpp"
#include "adamix/transformer.hpp"
