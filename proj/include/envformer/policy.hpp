#pragma once

#include "envformer/policy/config.hpp"
#include "envformer/policy/actor.hpp"
#include "envformer/policy/critic.hpp"
#include "envformer/policy/cql.hpp"
#include "envformer/policy/training.hpp"
