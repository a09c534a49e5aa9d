#pragma once

// Everything except file I/O (dataset_io.hpp, cli.hpp), which needs OpenCV.

#include "dehaze/attention.hpp"
#include "dehaze/autograd.hpp"
#include "dehaze/checkpoint.hpp"
#include "dehaze/config.hpp"
#include "dehaze/depth_proxy.hpp"
#include "dehaze/error.hpp"
#include "dehaze/haze_synth.hpp"
#include "dehaze/layers.hpp"
#include "dehaze/losses.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/module.hpp"
#include "dehaze/networks.hpp"
#include "dehaze/octave.hpp"
#include "dehaze/ops.hpp"
#include "dehaze/optim.hpp"
#include "dehaze/rng.hpp"
#include "dehaze/scenes.hpp"
#include "dehaze/ssim.hpp"
#include "dehaze/tensor.hpp"
#include "dehaze/trainer.hpp"
