#pragma once

#include "envformer/eval/rollout_length.hpp"
#include "envformer/eval/report.hpp"
