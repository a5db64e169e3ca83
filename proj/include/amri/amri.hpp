#pragma once

#include "amri/attention.hpp"
#include "amri/autodiff.hpp"
#include "amri/checksum.hpp"
#include "amri/config.hpp"
#include "amri/data.hpp"
#include "amri/error.hpp"
#include "amri/explain.hpp"
#include "amri/gradcheck.hpp"
#include "amri/image_io.hpp"
#include "amri/layers.hpp"
#include "amri/metrics.hpp"
#include "amri/model.hpp"
#include "amri/rng.hpp"
#include "amri/selftest.hpp"
#include "amri/synth.hpp"
#include "amri/tensor.hpp"
#include "amri/training.hpp"
#include "amri/weights.hpp"
