#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fedcp {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;  // worst error / counts on success, the reason on failure
};

// Central-difference probe: perturbs each coordinate of x0 by +-h, compares
// (f(x+h) - f(x-h)) / 2h against analytic[i], and returns the worst relative
// error. The denominator is floored at 1e-4 so near-zero gradients are judged
// on absolute error.
double fd_max_rel_err(const std::function<double(std::span<const double>)>& f,
                      std::span<const double> x0,
                      std::span<const double> analytic, double h = 1e-5);

// The built-in check suite: gradient checks for every op and the full local
// objective, policy invariants, kernel-distance identities, partition audits
// and determinism probes. Budgeted to finish well under a minute.
std::vector<CheckResult> run_selftests();

bool all_passed(const std::vector<CheckResult>& results);
std::string render_check_table(const std::vector<CheckResult>& results);

}  // namespace fedcp
