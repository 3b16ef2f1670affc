#pragma once

// Randomized property suites over geometry, tape gradients and the objective.
// Shared by the `selftest` command and the acceptance harness.

#include <cstdint>
#include <string>
#include <vector>

namespace hydra::selftest {

struct PropertyResult {
  std::string name;
  std::size_t checks = 0;
  std::size_t failures = 0;
  double worst = 0.0;  // largest observed error for this property
  double tolerance = 0.0;
  std::string detail;  // first failing case

  bool passed() const { return checks > 0 && failures == 0; }
};

struct SuiteResult {
  std::string name;
  std::vector<PropertyResult> properties;
  double seconds = 0.0;

  bool passed() const;
  std::size_t checks() const;
};

#ifdef HYDRA_SELFTEST_INJECT_FAULT
inline constexpr bool kInjectFaultDefault = true;
#else
inline constexpr bool kInjectFaultDefault = false;
#endif

struct Options {
  std::uint64_t seed = 20240501;
  std::size_t geometry_checks = 10000;
  // Test hook: perturbs log_map0 output inside the round-trip property.
  bool inject_roundtrip_fault = kInjectFaultDefault;
};

SuiteResult geometry_suite(const Options& opt = {});
SuiteResult gradient_suite(const Options& opt = {});
SuiteResult objective_suite(const Options& opt = {});
std::vector<SuiteResult> run_all(const Options& opt = {});

// One "PASS|FAIL suite/property ..." line per property.
std::string format(const SuiteResult& suite);

}  // namespace hydra::selftest
