#pragma once

#include "metat2/autograd.hpp"
#include "metat2/batch.hpp"
#include "metat2/checkpoint.hpp"
#include "metat2/dataset.hpp"
#include "metat2/diffusion.hpp"
#include "metat2/errors.hpp"
#include "metat2/grid.hpp"
#include "metat2/io.hpp"
#include "metat2/meta_trainer.hpp"
#include "metat2/metrics.hpp"
#include "metat2/nn.hpp"
#include "metat2/pipeline.hpp"
#include "metat2/predictor.hpp"
#include "metat2/rng.hpp"
#include "metat2/stats.hpp"
