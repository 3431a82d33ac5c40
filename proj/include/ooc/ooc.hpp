#pragma once

#include "ooc/common.hpp"
#include "ooc/corpus.hpp"
#include "ooc/decision.hpp"
#include "ooc/embedding.hpp"
#include "ooc/evaluation.hpp"
#include "ooc/featurizer.hpp"
#include "ooc/genclient.hpp"
#include "ooc/image.hpp"
#include "ooc/matrix.hpp"
#include "ooc/pipeline.hpp"
#include "ooc/sanitizer.hpp"
#include "ooc/similarity.hpp"
