#pragma once

#include "dualburst/burst.hpp"
#include "dualburst/container.hpp"
#include "dualburst/ensemble.hpp"
#include "dualburst/errors.hpp"
#include "dualburst/gradcheck.hpp"
#include "dualburst/net.hpp"
#include "dualburst/parallel.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/scene.hpp"
#include "dualburst/sensor.hpp"
#include "dualburst/tensor.hpp"
#include "dualburst/trainer.hpp"
