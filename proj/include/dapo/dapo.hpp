#pragma once

#include "dapo/rng.hpp"
#include "dapo/mdp.hpp"
#include "dapo/policy.hpp"
#include "dapo/sampling.hpp"
#include "dapo/exact_values.hpp"
#include "dapo/csv.hpp"
#include "dapo/io.hpp"
#include "dapo/instances.hpp"
#include "dapo/critic.hpp"
#include "dapo/dataset.hpp"
#include "dapo/objective.hpp"
#include "dapo/kkt.hpp"
#include "dapo/iterate.hpp"
#include "dapo/theory_checks.hpp"
#include "dapo/pipeline.hpp"
