#pragma once

// Everything in one include.

#include "stlr/errors.hpp"
#include "stlr/tensor.hpp"
#include "stlr/autograd.hpp"
#include "stlr/layers.hpp"
#include "stlr/model.hpp"
#include "stlr/corpus.hpp"
#include "stlr/textpipe.hpp"
#include "stlr/seq2seq.hpp"
#include "stlr/adapters.hpp"
#include "stlr/optim.hpp"
#include "stlr/trainer.hpp"
#include "stlr/decoding.hpp"
#include "stlr/textcnn.hpp"
#include "stlr/discbase.hpp"
#include "stlr/judges.hpp"
#include "stlr/metrics.hpp"
#include "stlr/experiment.hpp"
