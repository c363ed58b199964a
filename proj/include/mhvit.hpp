#pragma once

#include "mhvit/attention.hpp"
#include "mhvit/binary_io.hpp"
#include "mhvit/checkpoint.hpp"
#include "mhvit/error.hpp"
#include "mhvit/eval/evaluate.hpp"
#include "mhvit/eval/heatmap.hpp"
#include "mhvit/eval/kappa.hpp"
#include "mhvit/hvit.hpp"
#include "mhvit/image_io.hpp"
#include "mhvit/optim.hpp"
#include "mhvit/params.hpp"
#include "mhvit/pipeline/features.hpp"
#include "mhvit/pipeline/folds.hpp"
#include "mhvit/pipeline/regions.hpp"
#include "mhvit/pipeline/slide_io.hpp"
#include "mhvit/pipeline/synth.hpp"
#include "mhvit/raster.hpp"
#include "mhvit/tensor.hpp"
#include "mhvit/train.hpp"
#include "mhvit/app/experiment.hpp"
