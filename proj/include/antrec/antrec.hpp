#pragma once

#include "antrec/adaptation.hpp"
#include "antrec/autodiff.hpp"
#include "antrec/checkpoint.hpp"
#include "antrec/config.hpp"
#include "antrec/dataio.hpp"
#include "antrec/digest.hpp"
#include "antrec/error.hpp"
#include "antrec/eval.hpp"
#include "antrec/intent.hpp"
#include "antrec/irl.hpp"
#include "antrec/model.hpp"
#include "antrec/objective.hpp"
#include "antrec/optim.hpp"
#include "antrec/params.hpp"
#include "antrec/probe.hpp"
#include "antrec/training.hpp"
