// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "laysum/corpus.hpp"
#include "laysum/digest.hpp"
#include "laysum/embedstore.hpp"
#include "laysum/error.hpp"
#include "laysum/genclient.hpp"
#include "laysum/io.hpp"
#include "laysum/metrics.hpp"
#include "laysum/promptkit.hpp"
#include "laysum/retrieval.hpp"
#include "laysum/runner.hpp"
#include "laysum/svg.hpp"
#include "laysum/tokenizer.hpp"
#include "laysum/version.hpp"
