#pragma once

// Differential detection matrix: every scenario under every protection
// mode, plus the built-in demonstration program and scenarios.

#include "pcan/attack.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace pcan {

struct Scenario {
  std::string name;
  AttackScript script;
};

/// main -> handle, relay -> handle, other. `handle` and `other` share the
/// same locals (len, name[16], key[16]) but have different function ids;
/// the second `handle` runs one frame deeper, at a different SP.
const std::string &builtin_program_text();
Program builtin_program();

/// Scenario files shipped with the tool, as (name, JSON text).
const std::vector<std::pair<std::string, std::string>> &builtin_scenario_texts();
std::vector<Scenario> builtin_scenarios();

struct DetectionMatrix {
  std::uint64_t seed = 0;
  std::vector<std::string> modes;
  std::vector<std::string> scenarios;
  /// outcomes[scenario][mode]
  std::vector<std::vector<Outcome>> outcomes;

  Outcome at(std::string_view scenario, std::string_view mode) const;
  /// Scenarios detected under pcan_standalone but not under none.
  std::vector<std::string> pcan_only() const;
};

nlohmann::json to_json(const DetectionMatrix &matrix);

DetectionMatrix differential_matrix(const Program &program,
                                    const std::vector<Scenario> &scenarios,
                                    const std::vector<ProtectionMode> &modes,
                                    std::uint64_t seed, unsigned workers = 1,
                                    const VmConfig &config = {});

} // namespace pcan
