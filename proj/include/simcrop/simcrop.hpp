#pragma once

#include "simcrop/config.hpp"
#include "simcrop/error.hpp"
#include "simcrop/eval.hpp"
#include "simcrop/gradcheck.hpp"
#include "simcrop/model.hpp"
#include "simcrop/objectives.hpp"
#include "simcrop/optim.hpp"
#include "simcrop/rng.hpp"
#include "simcrop/serialize.hpp"
#include "simcrop/synthetic.hpp"
#include "simcrop/tensor.hpp"
#include "simcrop/text.hpp"
#include "simcrop/trainer.hpp"
#include "simcrop/volume.hpp"
