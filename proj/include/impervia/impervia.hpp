#pragma once

#include "impervia/autograd.hpp"
#include "impervia/camarkov.hpp"
#include "impervia/checkpoint.hpp"
#include "impervia/clustering.hpp"
#include "impervia/config.hpp"
#include "impervia/denoiser.hpp"
#include "impervia/diffusion.hpp"
#include "impervia/digest.hpp"
#include "impervia/errors.hpp"
#include "impervia/evaluation.hpp"
#include "impervia/numerics.hpp"
#include "impervia/raster.hpp"
#include "impervia/store.hpp"
#include "impervia/synthetic.hpp"
#include "impervia/transition.hpp"
