#pragma once

#include "envformer/worldmodel/config.hpp"
#include "envformer/worldmodel/ensemble.hpp"
#include "envformer/worldmodel/model.hpp"
#include "envformer/worldmodel/oracles.hpp"
#include "envformer/worldmodel/training.hpp"
#include "envformer/worldmodel/transformer.hpp"
