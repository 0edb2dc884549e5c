#include "pcan/matrix.hpp"

#include "pcan/error.hpp"
#include "parallel.hpp"

#include <algorithm>

namespace pcan {

using nlohmann::json;

const std::string &builtin_program_text() {
  static const std::string text = R"({
  "entry": "main",
  "functions": [
    {
      "name": "main",
      "locals": [{"name": "argc", "kind": "scalar", "size": 8}],
      "body": [
        {"op": "write", "target": "argc", "offset": 0, "bytes": "0100000000000000"},
        {"op": "call", "target": "handle"},
        {"op": "call", "target": "relay"},
        {"op": "call", "target": "other"},
        {"op": "return"}
      ]
    },
    {
      "name": "relay",
      "locals": [{"name": "tmp", "kind": "scalar", "size": 8}],
      "body": [
        {"op": "write", "target": "tmp", "offset": 0, "bytes": "0200000000000000"},
        {"op": "call", "target": "handle"},
        {"op": "return"}
      ]
    },
    {
      "name": "handle",
      "locals": [
        {"name": "len", "kind": "scalar", "size": 8},
        {"name": "name", "kind": "buffer", "size": 16},
        {"name": "key", "kind": "buffer", "size": 16}
      ],
      "body": [
        {"op": "write", "target": "name", "offset": 0, "bytes": "616c6963650000000000000000000000"},
        {"op": "write", "target": "key", "offset": 0, "bytes": "73656372657400000000000000000000"},
        {"op": "write", "target": "len", "offset": 0, "bytes": "0500000000000000"},
        {"op": "return"}
      ]
    },
    {
      "name": "other",
      "locals": [
        {"name": "len", "kind": "scalar", "size": 8},
        {"name": "name", "kind": "buffer", "size": 16},
        {"name": "key", "kind": "buffer", "size": 16}
      ],
      "body": [
        {"op": "write", "target": "name", "offset": 0, "bytes": "626f6200000000000000000000000000"},
        {"op": "write", "target": "key", "offset": 0, "bytes": "68756e74657232000000000000000000"},
        {"op": "write", "target": "len", "offset": 0, "bytes": "0300000000000000"},
        {"op": "return"}
      ]
    }
  ]
}
)";
  return text;
}

Program builtin_program() { return parse_program(builtin_program_text()); }

const std::vector<std::pair<std::string, std::string>> &
builtin_scenario_texts() {
  static const std::vector<std::pair<std::string, std::string>> texts = {
      {"linear_overflow", R"([
  {"action": "overflow", "function": "handle", "instance": 0, "at": 2,
   "buffer": "name", "payload": "41", "repeat": 33}
]
)"},
      {"fig3_local_overflow", R"([
  {"action": "overflow", "function": "handle", "instance": 0, "at": 2,
   "buffer": "name", "payload": "41", "repeat": 32}
]
)"},
      {"return_smash", R"([
  {"action": "overflow", "function": "handle", "instance": 0, "at": 3,
   "buffer": "key", "payload": "41", "repeat": 64}
]
)"},
      {"string_overflow", R"([
  {"action": "string_overflow", "function": "handle", "instance": 0, "at": 3,
   "buffer": "key", "payload": "41", "repeat": 24}
]
)"},
      {"harvest_replay", R"([
  {"action": "harvest_and_replay", "function": "handle", "instance": 0,
   "at": 3, "buffer": "name", "through": "return", "fill": "41"}
]
)"},
      {"string_harvest_replay", R"([
  {"action": "harvest_and_replay", "function": "handle", "instance": 0,
   "at": 3, "buffer": "name", "through": "return", "fill": "41",
   "string": true}
]
)"},
      {"cross_frame_replay", R"([
  {"action": "substitute_canary",
   "donor": {"function": "handle", "instance": 0, "at": 3},
   "victim": {"function": "handle", "instance": 1, "at": 3},
   "buffer": "key", "through": "return", "fill": "41"}
]
)"},
      {"cross_function_replay", R"([
  {"action": "substitute_canary",
   "donor": {"function": "handle", "instance": 0, "at": 3},
   "victim": {"function": "other", "instance": 0, "at": 3},
   "buffer": "key", "through": "return", "fill": "41"}
]
)"},
      {"harvest_global_reference", R"([
  {"action": "substitute_canary",
   "donor": {"function": "handle", "instance": 0, "at": 3},
   "victim": {"function": "other", "instance": 0, "at": 3},
   "buffer": "key", "through": "anchor", "fill": "41"}
]
)"},
  };
  return texts;
}

std::vector<Scenario> builtin_scenarios() {
  std::vector<Scenario> out;
  for (const auto &[name, text] : builtin_scenario_texts())
    out.push_back({name, parse_script(text)});
  return out;
}

Outcome DetectionMatrix::at(std::string_view scenario,
                            std::string_view mode) const {
  auto s = std::find(scenarios.begin(), scenarios.end(), scenario);
  auto m = std::find(modes.begin(), modes.end(), mode);
  if (s == scenarios.end() || m == modes.end())
    throw InvariantError("no matrix cell for " + std::string(scenario) + "/" +
                         std::string(mode));
  return outcomes[static_cast<std::size_t>(s - scenarios.begin())]
                 [static_cast<std::size_t>(m - modes.begin())];
}

std::vector<std::string> DetectionMatrix::pcan_only() const {
  std::vector<std::string> out;
  const auto has = [&](std::string_view m) {
    return std::find(modes.begin(), modes.end(), m) != modes.end();
  };
  if (!has("pcan_standalone") || !has("none"))
    return out;
  for (const std::string &s : scenarios)
    if (at(s, "pcan_standalone") == Outcome::Detected &&
        at(s, "none") != Outcome::Detected)
      out.push_back(s);
  return out;
}

json to_json(const DetectionMatrix &m) {
  json rows = json::array();
  for (std::size_t s = 0; s < m.scenarios.size(); ++s) {
    json cells = json::object();
    for (std::size_t k = 0; k < m.modes.size(); ++k)
      cells[m.modes[k]] = to_string(m.outcomes[s][k]);
    rows.push_back({{"scenario", m.scenarios[s]}, {"outcomes", cells}});
  }
  return {{"seed", m.seed},
          {"modes", m.modes},
          {"rows", std::move(rows)},
          {"detected_by_pcan_not_by_none", m.pcan_only()}};
}

DetectionMatrix differential_matrix(const Program &program,
                                    const std::vector<Scenario> &scenarios,
                                    const std::vector<ProtectionMode> &modes,
                                    std::uint64_t seed, unsigned workers,
                                    const VmConfig &config) {
  DetectionMatrix m;
  m.seed = seed;
  std::vector<InstrumentedProgram> programs;
  for (const ProtectionMode &mode : modes) {
    m.modes.emplace_back(to_string(mode.scheme));
    programs.push_back(instrument_program(program, mode, config.layout));
  }
  for (const Scenario &s : scenarios)
    m.scenarios.push_back(s.name);
  m.outcomes.assign(scenarios.size(),
                    std::vector<Outcome>(modes.size(), Outcome::Clean));

  const std::uint64_t cells = scenarios.size() * modes.size();
  parallel_for(cells, workers, [&](std::uint64_t i) {
    const std::size_t s = i / modes.size();
    const std::size_t k = i % modes.size();
    for (const AttackAction &a : scenarios[s].script.actions)
      if (std::holds_alternative<BruteForceAction>(a))
        throw ScriptError("scenario '" + scenarios[s].name +
                          "': brute_force belongs in a campaign, not the "
                          "matrix");
    m.outcomes[s][k] = execute_on(programs[k], make_state(seed, config),
                                  scenarios[s].script, seed)
                           .outcome;
  });
  return m;
}

} // namespace pcan
