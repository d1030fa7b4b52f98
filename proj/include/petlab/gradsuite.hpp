#pragma once

// Randomised finite-difference checks over the primitives, the backbone,
// each reference method and each masked insertion.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "petlab/autodiff.hpp"

namespace petlab {

struct GradCase {
  std::string name;
  std::string group;  // primitive | backbone | pet | apet
  GradCheckReport report;
};

// At least one case per primitive, the full backbone, the four methods and
// the three insertion ops; `rounds` repeats the whole set with fresh draws.
std::vector<GradCase> run_gradcheck_suite(std::uint64_t seed, std::size_t rounds = 1,
                                          const GradCheckOptions& options = {});

}  // namespace petlab
