#pragma once

#include "pavlm/autodiff.hpp"
#include "pavlm/dataset.hpp"
#include "pavlm/decoder.hpp"
#include "pavlm/encoder.hpp"
#include "pavlm/errors.hpp"
#include "pavlm/ingest.hpp"
#include "pavlm/instruction.hpp"
#include "pavlm/layers.hpp"
#include "pavlm/losses.hpp"
#include "pavlm/metrics.hpp"
#include "pavlm/params.hpp"
#include "pavlm/pointcloud.hpp"
#include "pavlm/rng.hpp"
#include "pavlm/synthetic.hpp"
#include "pavlm/training.hpp"
#include "pavlm/vis.hpp"
