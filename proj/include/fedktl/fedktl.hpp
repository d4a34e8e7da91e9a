#pragma once

#include "fedktl/autograd.hpp"
#include "fedktl/client.hpp"
#include "fedktl/config.hpp"
#include "fedktl/datagen.hpp"
#include "fedktl/error.hpp"
#include "fedktl/etf.hpp"
#include "fedktl/generator.hpp"
#include "fedktl/gradcheck.hpp"
#include "fedktl/knowledge.hpp"
#include "fedktl/mmd.hpp"
#include "fedktl/module.hpp"
#include "fedktl/optim.hpp"
#include "fedktl/orchestrator.hpp"
#include "fedktl/rng.hpp"
#include "fedktl/server.hpp"
#include "fedktl/tensor.hpp"
