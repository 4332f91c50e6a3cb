#pragma once

#include "plka/checkpoint.hpp"
#include "plka/config.hpp"
#include "plka/data/episodes.hpp"
#include "plka/data/image.hpp"
#include "plka/data/scene.hpp"
#include "plka/data/superpixels.hpp"
#include "plka/encoder.hpp"
#include "plka/error.hpp"
#include "plka/fusion_loss.hpp"
#include "plka/gradcheck.hpp"
#include "plka/harness.hpp"
#include "plka/lka.hpp"
#include "plka/model.hpp"
#include "plka/ops.hpp"
#include "plka/optim.hpp"
#include "plka/params.hpp"
#include "plka/proto_head.hpp"
#include "plka/rng.hpp"
#include "plka/serialize.hpp"
#include "plka/tensor.hpp"
