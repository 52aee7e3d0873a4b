#pragma once

// Central-difference verification of every differentiable op and every
// training objective, over many random seeds.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fedsynth::ad {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;  // worst over seeds
  std::size_t checked = 0;     // elements compared, summed over seeds
  bool passed = true;
};

struct GradCheckSuite {
  std::vector<GradCheckCase> cases;  // in a fixed order
  std::size_t seeds = 0;
  double tolerance = 1e-4;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Runs every case for seeds base_seed .. base_seed + seeds - 1.
GradCheckSuite run_grad_check_suite(std::size_t seeds, std::uint64_t base_seed, double tolerance = 1e-4);

}  // namespace fedsynth::ad
