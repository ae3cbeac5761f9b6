// SPDX-License-Identifier: Apache-2.0
//
// Release-gate gradient audit: central-difference checks for every
// differentiable op plus the shared-weight gradient decomposition, with
// the worst relative error recorded per op.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ks {

struct GradCheckEntry {
  std::string op;
  int instances = 0;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_pass = false;
  double seconds = 0.0;
};

// `corrupt_op` is a fault-injection hook for tests: the named op's measured
// error is inflated past tolerance so the failure path stays exercised.
GradCheckReport gradcheck_suite(uint64_t seed = 0, int instances_per_op = 100,
                                const std::string& corrupt_op = "");

std::string format_report(const GradCheckReport& report);

}  // namespace ks
