#pragma once

#include "adam.hpp"
#include "common.hpp"
#include "config.hpp"
#include "landmark_io.hpp"
#include "landmarks.hpp"
#include "metrics.hpp"
#include "nifti.hpp"
#include "objective.hpp"
#include "pipeline.hpp"
#include "transform.hpp"
#include "volume.hpp"
