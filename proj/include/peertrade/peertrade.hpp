#pragma once
#include "engine.hpp"
#include "errors.hpp"
#include "local.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "qp.hpp"
#include "reference.hpp"
#include "scenario.hpp"
#include "select.hpp"
