#pragma once

#include "unihead/numkit/cost_counter.hpp"
#include "unihead/numkit/digest.hpp"
#include "unihead/numkit/errors.hpp"
#include "unihead/numkit/init.hpp"
#include "unihead/numkit/kernels.hpp"
#include "unihead/numkit/kinks.hpp"
#include "unihead/numkit/param_store.hpp"
#include "unihead/numkit/parallel.hpp"
#include "unihead/numkit/rng.hpp"
#include "unihead/numkit/tape.hpp"
#include "unihead/numkit/tensor.hpp"
#include "unihead/numkit/uht.hpp"

#include "unihead/cit.hpp"
#include "unihead/dat.hpp"
#include "unihead/deform.hpp"
#include "unihead/head.hpp"

#include "unihead/goldens.hpp"
#include "unihead/gradcheck.hpp"
#include "unihead/invariants.hpp"
#include "unihead/manifest.hpp"
#include "unihead/oracle.hpp"
#include "unihead/oracle_checks.hpp"
#include "unihead/profiler.hpp"
#include "unihead/version.hpp"
