#pragma once

#include "pathadapt/adapter.hpp"
#include "pathadapt/attention.hpp"
#include "pathadapt/conv.hpp"
#include "pathadapt/datadir.hpp"
#include "pathadapt/heads.hpp"
#include "pathadapt/io.hpp"
#include "pathadapt/metrics.hpp"
#include "pathadapt/mil.hpp"
#include "pathadapt/pathfit.hpp"
#include "pathadapt/random.hpp"
#include "pathadapt/seg.hpp"
#include "pathadapt/synth.hpp"
#include "pathadapt/tensor.hpp"
#include "pathadapt/tiling.hpp"
#include "pathadapt/trainer.hpp"
#include "pathadapt/vit.hpp"
