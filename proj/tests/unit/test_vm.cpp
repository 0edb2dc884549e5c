#include "helpers.hpp"

#include "pcan/error.hpp"
#include "pcan/vm.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <map>
#include <random>

using namespace pcan;

namespace {

Program suite() { return load_program(test::source_path("corpus/suite.json")); }

OpCounts parse_counts(const std::string &field) {
  OpCounts c;
  std::sscanf(field.c_str(), "%lu/%lu/%lu/%lu", &c.pac_ops, &c.loads,
              &c.stores, &c.compares);
  return c;
}

bool has_event(const RunReport &r, const std::string &kind) {
  for (const Event &e : r.events)
    if (e.kind == kind)
      return true;
  return false;
}

} // namespace

TEST(VmConfig, Validation) {
  EXPECT_NO_THROW(VmConfig{}.validate());
  VmConfig bad;
  bad.pac_width = 12;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.stack_top = 0x7fff'ffff'f008ULL;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.stack_size = 100;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Memory, UnwrittenAndUnmappedBytesFault) {
  VmState s = make_state(1);
  const std::uint64_t a = s.sp - 64;
  EXPECT_THROW(load64(s, a), GuestFault);
  store64(s, a, 0x1122334455667788ULL);
  EXPECT_EQ(load64(s, a), 0x1122334455667788ULL);
  try {
    load64(s, 0x1000);
    FAIL();
  } catch (const GuestFault &gf) {
    EXPECT_EQ(gf.fault.kind, FaultKind::InvalidAccess);
  }
  try {
    store64(s, 0x1000, 1);
    FAIL();
  } catch (const GuestFault &gf) {
    EXPECT_EQ(gf.fault.kind, FaultKind::InvalidAccess);
  }
}

TEST(Memory, CorruptedPointerDereferenceFaultsWithKey) {
  VmState s = make_state(2);
  const std::uint64_t a = s.sp - 64;
  store64(s, a, 7);
  const pa::Modifier m{99};
  const pa::Pointer good = pa::pacda(pa::Pointer{a}, m, s.keys);
  const pa::Pointer bad = pa::autda(good, pa::Modifier{100}, s.keys);
  try {
    load64(s, bad.value);
    FAIL();
  } catch (const GuestFault &gf) {
    EXPECT_EQ(gf.fault.kind, FaultKind::TranslationFault);
    EXPECT_EQ(gf.fault.key, pa::KeyId::DA);
  }
  EXPECT_EQ(load64(s, pa::autda(good, m, s.keys).value), 7u);
}

TEST(Process, ForkKeepsSecretsRekeyReplacesThem) {
  const VmState parent = make_state(10);
  const VmState child = fork_snapshot(parent);
  EXPECT_EQ(child.keys.da, parent.keys.da);
  EXPECT_EQ(child.global_reference, parent.global_reference);
  EXPECT_EQ(load64(child, kReferenceAddress), parent.global_reference);

  const VmState fresh = rekey(parent, 11);
  EXPECT_NE(fresh.keys.da, parent.keys.da);
  EXPECT_NE(fresh.global_reference, parent.global_reference);
  EXPECT_EQ(load64(fresh, kReferenceAddress), fresh.global_reference);
  EXPECT_EQ(fresh.sp, parent.sp);

  VmState faulted = make_state(3);
  faulted.status = RunStatus::Faulted;
  EXPECT_THROW(fork_snapshot(faulted), Error);
}

TEST(Process, ReferenceCanaryIsEleventhDraw) {
  std::mt19937_64 rng(123);
  rng.discard(10);
  EXPECT_EQ(make_state(123).global_reference, rng());
}

class BenignRuns : public ::testing::TestWithParam<Scheme> {};

TEST_P(BenignRuns, NoFalsePositives) {
  const Program program = suite();
  for (unsigned width : {4u, 8u, 16u})
    for (bool rearrange : {true, false})
      for (std::uint64_t seed = 0; seed < 25; ++seed) {
        VmConfig config;
        config.pac_width = width;
        config.layout.rearrange = rearrange;
        const RunReport r = run(program, {GetParam(), 8}, seed, config);
        ASSERT_EQ(r.status, RunStatus::Exited)
            << "seed " << seed << " width " << width;
        for (const Event &e : r.events)
          EXPECT_TRUE(e.kind == "call" || e.kind == "return")
              << e.kind << " in " << e.function;
      }
}

INSTANTIATE_TEST_SUITE_P(
    Schemes, BenignRuns,
    ::testing::ValuesIn(all_schemes()),
    [](const ::testing::TestParamInfo<Scheme> &info) {
      return std::string(to_string(info.param));
    });

TEST(Counts, MatchOracleOnEveryCorpusFunction) {
  const Program program = suite();
  std::map<std::string, RunReport> reports;
  for (const auto &row : test::read_rows(test::fixture_path("layouts.txt"))) {
    const std::string key = row[0] + row[1];
    if (!reports.count(key)) {
      VmConfig config;
      config.layout.rearrange = row[1] == "1";
      reports[key] = run(program, {parse_scheme(row[0]), 8}, 5, config);
    }
    const auto counts = instruction_counts(reports[key]);
    const auto it = counts.find(row[2]);
    ASSERT_NE(it, counts.end()) << row[2] << " never ran";
    EXPECT_EQ(it->second.prologue_per_call, parse_counts(row[5]))
        << row[0] << " " << row[2];
    EXPECT_EQ(it->second.epilogue_per_call, parse_counts(row[6]))
        << row[0] << " " << row[2];
  }
}

TEST(Counts, StandaloneFormula) {
  const Program program = suite();
  const RunReport r = run(program, {Scheme::PcanStandalone, 8}, 1);
  for (const auto &[name, row] : instruction_counts(r)) {
    const std::uint64_t n = program.function(name).buffer_count();
    EXPECT_EQ(row.prologue_per_call, (OpCounts{n + 1, 0, n + 1, 0})) << name;
    EXPECT_EQ(row.epilogue_per_call, (OpCounts{n + 1, n + 1, 0, 1})) << name;
  }
}

TEST(Run, DeterministicReports) {
  const Program program = suite();
  for (Scheme s : all_schemes())
    EXPECT_EQ(to_json(run(program, {s, 8}, 77)).dump(),
              to_json(run(program, {s, 8}, 77)).dump());
}

TEST(Run, BuggyProgramUnderEachMode) {
  const Program program =
      load_program(test::source_path("corpus/overflow.json"));
  // The write runs over the saved return with ASCII bytes, so the return
  // branch lands on a non-canonical address.
  for (Scheme s : {Scheme::None, Scheme::StackGuard, Scheme::Terminator}) {
    const RunReport r = run(program, {s, 8}, 1);
    ASSERT_EQ(r.status, RunStatus::Faulted) << to_string(s);
    EXPECT_TRUE(has_event(r, "return_overwrite"));
    EXPECT_EQ(r.fault->kind, FaultKind::TranslationFault);
    EXPECT_EQ(r.fault->slot, "return");
    EXPECT_FALSE(r.fault->key.has_value());
    EXPECT_FALSE(r.fault->during_verification);
  }

  for (Scheme s : {Scheme::StrongHeuristic, Scheme::PcanStandalone,
                   Scheme::PcanCombined}) {
    const RunReport r = run(program, {s, 8}, 1);
    ASSERT_EQ(r.status, RunStatus::Faulted) << to_string(s);
    EXPECT_EQ(r.fault->function, "copy_name");
    EXPECT_TRUE(r.fault->during_verification);
  }
  const RunReport pcan = run(program, {Scheme::PcanStandalone, 8}, 1);
  EXPECT_EQ(pcan.fault->kind, FaultKind::TranslationFault);
  EXPECT_EQ(pcan.fault->key, pa::KeyId::DA);
  EXPECT_EQ(pcan.fault->slot, "C1");
}

TEST(Run, UnboundedRecursionOverflowsStack) {
  const Program program = parse_program(R"({"entry": "r", "functions": [
    {"name": "r", "locals": [{"name": "b", "kind": "buffer", "size": 200}],
     "body": [{"op": "call", "target": "r"}]}]})");
  const RunReport report = run(program, {Scheme::PcanStandalone, 8}, 1);
  ASSERT_EQ(report.status, RunStatus::Faulted);
  EXPECT_EQ(report.fault->kind, FaultKind::StackOverflow);
}

TEST(Run, ReportJsonShape) {
  const RunReport r = run(suite(), {Scheme::PcanCombined, 8}, 3);
  const auto j = to_json(r);
  EXPECT_EQ(j.at("mode"), "pcan_combined");
  EXPECT_EQ(j.at("status"), "exited");
  EXPECT_TRUE(j.at("events").is_array());
  EXPECT_TRUE(j.contains("counts"));
}
