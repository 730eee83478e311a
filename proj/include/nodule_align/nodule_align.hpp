#pragma once

#include "nodule_align/annotations.hpp"
#include "nodule_align/ccp.hpp"
#include "nodule_align/checkpoint.hpp"
#include "nodule_align/cli.hpp"
#include "nodule_align/config.hpp"
#include "nodule_align/encoders.hpp"
#include "nodule_align/evaluation.hpp"
#include "nodule_align/explain.hpp"
#include "nodule_align/fixtures.hpp"
#include "nodule_align/losses.hpp"
#include "nodule_align/model.hpp"
#include "nodule_align/optim.hpp"
#include "nodule_align/preprocessing.hpp"
#include "nodule_align/training.hpp"
