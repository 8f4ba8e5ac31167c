#pragma once

// Self-check suites behind `osvi verify` and the acceptance binary.
//   grad       finite-difference checks of every op and a tiny end-to-end model
//   leakage    object keys get zero attention weight under guidance
//   structure  residual identity, per-frame isolation, memory softmax, passthrough
//   loss       total additivity, region-loss cancellation, detach contract
//   metrics    metrics against the definition-literal oracles

#include <string>
#include <vector>

namespace osvi {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::vector<CheckResult> checks;
  double seconds = 0.0;
  bool passed() const;
};

const std::vector<std::string>& suite_names();
/// Unknown names → ContractError.
SuiteResult run_suite(const std::string& name);

}  // namespace osvi
