#include "helpers.hpp"

#include "pcan/attack.hpp"
#include "pcan/error.hpp"
#include "pcan/matrix.hpp"

#include <gtest/gtest.h>

using namespace pcan;

namespace {

const ProtectionMode kStandalone{Scheme::PcanStandalone, 8};
const ProtectionMode kCombined{Scheme::PcanCombined, 8};
const ProtectionMode kNone{Scheme::None, 8};
const ProtectionMode kStackGuard{Scheme::StackGuard, 8};

AttackScript scenario(const std::string &name) {
  for (const Scenario &s : builtin_scenarios())
    if (s.name == name)
      return s.script;
  throw std::runtime_error("no scenario " + name);
}

Outcome outcome(const std::string &name, const ProtectionMode &mode,
                std::uint64_t seed = 1) {
  return execute_script(builtin_program(), mode, scenario(name), seed).outcome;
}

} // namespace

TEST(ScriptParse, AllActionKinds) {
  const AttackScript s = parse_script(R"([
    {"action": "overflow", "function": "f", "instance": 2, "at": 1,
     "buffer": "b", "payload": "4142", "repeat": 3},
    {"action": "string_overflow", "function": "f", "at": 0, "buffer": "b",
     "payload": "41"},
    {"action": "over_read", "function": "f", "at": 0, "buffer": "b",
     "slot": "C1"},
    {"action": "over_read", "function": "f", "at": 0, "buffer": "b",
     "offset": 8, "length": 16},
    {"action": "harvest_and_replay", "function": "f", "at": 0, "buffer": "b",
     "through": "return", "string": true,
     "patches": [{"slot": "return", "bytes": "00"}]},
    {"action": "substitute_canary", "donor": {"function": "f", "at": 0},
     "victim": {"function": "g", "instance": 1, "at": 2}, "buffer": "b"},
    {"action": "brute_force", "function": "f", "at": 0, "buffer": "b",
     "strategy": "random", "restart": "rekey", "budget": 5}
  ])");
  ASSERT_EQ(s.actions.size(), 7u);
  const auto &o = std::get<OverflowAction>(s.actions[0]);
  EXPECT_EQ(o.where, (FramePoint{"f", 2, 1}));
  EXPECT_EQ(o.payload, (std::vector<std::uint8_t>{0x41, 0x42, 0x41, 0x42,
                                                  0x41, 0x42}));
  EXPECT_EQ(std::get<OverReadAction>(s.actions[2]).slot, "C1");
  EXPECT_EQ(std::get<OverReadAction>(s.actions[3]).length, 16u);
  const auto &h = std::get<HarvestReplayAction>(s.actions[4]);
  EXPECT_TRUE(h.string);
  EXPECT_EQ(h.fill, 0x41);
  EXPECT_EQ(std::get<SubstituteCanaryAction>(s.actions[5]).through, "return");
  const auto &b = std::get<BruteForceAction>(s.actions[6]);
  EXPECT_EQ(b.strategy, GuessStrategy::Random);
  EXPECT_EQ(b.restart, RestartModel::Rekey);
  EXPECT_EQ(b.budget, 5u);

  EXPECT_EQ(parse_script(to_json(s).dump()), s);
}

TEST(ScriptParse, Rejections) {
  EXPECT_THROW(parse_script("{}"), ParseError);
  EXPECT_THROW(parse_script(R"([{"action": "teleport"}])"), ParseError);
  EXPECT_THROW(parse_script(R"([{"action": "overflow", "function": "f",
      "at": 0, "buffer": "b", "payload": "41", "bogus": 1}])"),
               ParseError);
  EXPECT_THROW(parse_script(R"([{"action": "string_overflow", "function": "f",
      "at": 0, "buffer": "b", "payload": "4100"}])"),
               ParseError);
  EXPECT_THROW(parse_script(R"([{"action": "harvest_and_replay",
      "function": "f", "at": 0, "buffer": "b", "through": "C1",
      "length": 8}])"),
               ParseError);
  EXPECT_THROW(parse_script(R"([{"action": "brute_force", "function": "f",
      "at": 0, "buffer": "b", "strategy": "psychic"}])"),
               Error);
  EXPECT_THROW(load_script("/nonexistent.json"), ConfigError);
}

TEST(ScriptParse, ShippedScenarioFilesMatchBuiltins) {
  for (const auto &[name, text] : builtin_scenario_texts()) {
    const auto path = test::source_path("scenarios/" + name + ".json");
    EXPECT_EQ(load_script(path), parse_script(text)) << name;
  }
  EXPECT_EQ(load_program(test::source_path("corpus/demo.json")),
            builtin_program());
}

TEST(Execute, UnknownFunctionOrBufferRejected) {
  const Program p = builtin_program();
  EXPECT_THROW(execute_script(p, kStandalone, parse_script(R"([
    {"action": "overflow", "function": "nope", "at": 0, "buffer": "name",
     "payload": "41"}])"),
                              1),
               ScriptError);
  EXPECT_THROW(execute_script(p, kStandalone, parse_script(R"([
    {"action": "overflow", "function": "handle", "at": 0, "buffer": "len",
     "payload": "41"}])"),
                              1),
               ScriptError);
}

TEST(Execute, UnfiredActionIsScriptError) {
  EXPECT_THROW(execute_script(builtin_program(), kStandalone, parse_script(R"([
    {"action": "overflow", "function": "handle", "instance": 9, "at": 0,
     "buffer": "name", "payload": "41"}])"),
                              1),
               ScriptError);
}

TEST(Execute, InBoundsWriteIsClean) {
  const AttackResult r =
      execute_script(builtin_program(), kStandalone, parse_script(R"([
    {"action": "overflow", "function": "handle", "at": 3, "buffer": "name",
     "payload": "41", "repeat": 16}])"),
                     1);
  EXPECT_EQ(r.outcome, Outcome::Clean);
}

TEST(Execute, OverReadLeaksTrueCanary) {
  const Program p = builtin_program();
  const AttackResult r = execute_script(p, kStandalone, parse_script(R"([
    {"action": "over_read", "function": "handle", "at": 3, "buffer": "name",
     "slot": "C1"}])"),
                                        4);
  EXPECT_EQ(r.outcome, Outcome::Clean);
  ASSERT_FALSE(r.transcript.empty());
  const auto &bytes = r.transcript.front().bytes;
  ASSERT_EQ(bytes.size(), 8u);
  std::uint64_t leaked = 0;
  for (int i = 7; i >= 0; --i)
    leaked = (leaked << 8) | bytes[i];
  // A chained canary is a signed stack pointer: address bits point into
  // the stack and the PAC field holds a tag.
  EXPECT_EQ(leaked & pa::kAddressMask,
            (leaked & pa::kAddressMask) & ~std::uint64_t{7});
  EXPECT_GT(leaked & pa::kAddressMask, 0x7fff'0000'0000ULL);
}

TEST(Execute, ScenarioExpectations) {
  EXPECT_EQ(outcome("fig3_local_overflow", kNone),
            Outcome::UndetectedCorruption);
  EXPECT_EQ(outcome("fig3_local_overflow", kStackGuard),
            Outcome::UndetectedCorruption);
  EXPECT_EQ(outcome("fig3_local_overflow", kStandalone), Outcome::Detected);
  EXPECT_EQ(outcome("fig3_local_overflow", kCombined), Outcome::Detected);

  EXPECT_EQ(outcome("harvest_replay", kStackGuard), Outcome::Bypassed);
  EXPECT_EQ(outcome("harvest_replay", kStandalone), Outcome::Bypassed);
  EXPECT_EQ(outcome("cross_frame_replay", kStackGuard), Outcome::Bypassed);
  EXPECT_EQ(outcome("cross_function_replay", kStackGuard), Outcome::Bypassed);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    EXPECT_EQ(outcome("cross_frame_replay", kStandalone, seed),
              Outcome::Detected);
    EXPECT_EQ(outcome("cross_function_replay", kCombined, seed),
              Outcome::Detected);
  }
  EXPECT_EQ(outcome("return_smash", kNone), Outcome::Crashed);
  EXPECT_EQ(outcome("harvest_global_reference", kCombined),
            Outcome::NotApplicable);
}

TEST(Execute, DetectionFaultsCarryDataKey) {
  const AttackResult r = execute_script(builtin_program(), kStandalone,
                                        scenario("linear_overflow"), 1);
  ASSERT_EQ(r.outcome, Outcome::Detected);
  ASSERT_TRUE(r.report.fault.has_value());
  EXPECT_TRUE(r.report.fault->during_verification);
  EXPECT_EQ(r.report.fault->function, "handle");
}

TEST(Classify, Rules) {
  RunReport r;
  r.status = RunStatus::Exited;
  EXPECT_EQ(classify(r), Outcome::Clean);
  r.events.push_back({1, "local_overwrite", "f", "n", std::nullopt});
  EXPECT_EQ(classify(r), Outcome::UndetectedCorruption);
  r.events.push_back({2, "canary_overwrite", "f", "C1", std::nullopt});
  EXPECT_EQ(classify(r), Outcome::Bypassed);

  r.status = RunStatus::Faulted;
  r.fault = Fault{FaultKind::InvalidAccess, "f", "", std::nullopt,
                  std::nullopt, false};
  EXPECT_EQ(classify(r), Outcome::Crashed);
  r.fault->key = pa::KeyId::DA;
  EXPECT_EQ(classify(r), Outcome::Detected);
  r.fault = Fault{FaultKind::CanaryMismatch, "f", "C0", std::nullopt,
                  std::nullopt, true};
  EXPECT_EQ(classify(r), Outcome::Detected);
}

TEST(Sweep, PcanCatchesEveryLength) {
  const Program p = load_program(test::source_path("corpus/suite.json"));
  for (const ProtectionMode &mode : {kStandalone, kCombined}) {
    const auto rows = linear_overflow_sweep(p, mode, 24, 3);
    ASSERT_FALSE(rows.empty());
    for (const SweepRow &row : rows)
      EXPECT_TRUE(row.outcome == Outcome::Detected && row.caught_before_return)
          << to_string(mode.scheme) << " " << row.function << "."
          << row.buffer << " +" << row.length << " -> "
          << to_string(row.outcome);
  }
}

TEST(Sweep, UnprotectedRunMissesShortOverflows) {
  const Program p = load_program(test::source_path("corpus/suite.json"));
  const auto rows = linear_overflow_sweep(p, kNone, 8, 3);
  std::size_t missed = 0;
  for (const SweepRow &row : rows)
    if (row.outcome != Outcome::Detected)
      ++missed;
  EXPECT_EQ(missed, rows.size());
}

TEST(Execute, CanonicalReturnOverwriteIsHijack) {
  const AttackResult r =
      execute_script(builtin_program(), kNone, parse_script(R"([
    {"action": "overflow", "function": "handle", "at": 3, "buffer": "key",
     "payload": "414141414141414141414141414141410021400000000000"}])"),
                     1);
  EXPECT_EQ(r.outcome, Outcome::UndetectedCorruption);
  bool hijack = false;
  for (const Event &e : r.report.events)
    hijack |= e.kind == "control_flow_hijack";
  EXPECT_TRUE(hijack);
}
