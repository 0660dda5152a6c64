#pragma once

#include "clbench/adam.hpp"
#include "clbench/adversarial.hpp"
#include "clbench/autodiff.hpp"
#include "clbench/checkpoint.hpp"
#include "clbench/corpus.hpp"
#include "clbench/diag.hpp"
#include "clbench/encoder.hpp"
#include "clbench/metrics.hpp"
#include "clbench/objectives.hpp"
#include "clbench/projection.hpp"
#include "clbench/report.hpp"
#include "clbench/rng.hpp"
#include "clbench/step.hpp"
#include "clbench/tokenizer.hpp"
#include "clbench/trainer.hpp"
