#pragma once

#include "rtl/adversary.hpp"
#include "rtl/autodiff.hpp"
#include "rtl/datasets.hpp"
#include "rtl/error.hpp"
#include "rtl/harness.hpp"
#include "rtl/models.hpp"
#include "rtl/statistics.hpp"
#include "rtl/tensor.hpp"
#include "rtl/trainer.hpp"
#include "rtl/transfer.hpp"
