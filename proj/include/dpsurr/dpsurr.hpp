#pragma once

#include "distributions.hpp"
#include "dpm.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "report.hpp"
#include "stage1.hpp"
#include "study.hpp"
#include "surrogacy.hpp"
#include "trialgen.hpp"
