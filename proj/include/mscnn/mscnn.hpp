#pragma once

#include "mscnn/checkpoint.hpp"
#include "mscnn/density.hpp"
#include "mscnn/io.hpp"
#include "mscnn/layers.hpp"
#include "mscnn/metrics.hpp"
#include "mscnn/model.hpp"
#include "mscnn/optimizer.hpp"
#include "mscnn/rng.hpp"
#include "mscnn/tensor.hpp"
#include "mscnn/trainer.hpp"
