#pragma once

// Monte Carlo campaigns. Every trial owns an independent process whose seed
// is derived from the master seed and the trial index, so results do not
// depend on how trials are spread over workers.

#include "pcan/attack.hpp"

#include "json.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace pcan {

/// Seed of trial `index` under `master` (splitmix64 of the pair).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// Binomial proportion with a 3-sigma interval.
struct Proportion {
  std::uint64_t hits = 0;
  std::uint64_t total = 0;

  double rate() const;
  double sigma() const;
  double lower() const;
  double upper() const;
};

nlohmann::json to_json(const Proportion &p);

struct BruteForceTarget {
  FramePoint where;
  std::string buffer;
  std::optional<std::string> slot;
};

struct CampaignConfig {
  RestartModel restart = RestartModel::Fork;
  GuessStrategy strategy = GuessStrategy::ByteByByte;
  std::uint64_t trials = 100;
  /// Attempts per trial; 0 picks 4096 for fork and 1 for rekey.
  std::uint64_t budget = 0;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  VmConfig vm;

  std::uint64_t effective_budget() const;
};

struct TrialResult {
  std::uint64_t seed = 0;
  std::uint64_t attempts = 0;
  /// Attempts that ended in a fault.
  std::uint64_t faulted = 0;
  bool bypassed = false;
};

struct CampaignResult {
  std::string mode;
  std::string slot;
  CampaignConfig config;
  std::uint64_t budget = 0;
  std::uint64_t trials = 0;
  /// Attempts that faulted, summed over trials.
  std::uint64_t detected = 0;
  /// Trials that reached a bypass within the budget.
  std::uint64_t bypassed = 0;
  std::uint64_t total_attempts = 0;
  double mean_attempts_to_bypass = 0;
  double median_attempts_to_bypass = 0;
  std::uint64_t max_attempts_to_bypass = 0;
  /// Successful attempts over all attempts.
  Proportion per_attempt;
  std::vector<TrialResult> per_trial;
};

nlohmann::json to_json(const CampaignResult &result, bool with_trials = false);

/// One attacker trial against a fresh process: repeated overflows from
/// `target.buffer` guessing the value of the target slot until an attempt
/// runs to completion with the slot fully overwritten or the budget runs
/// out. An attempt that faults is the only feedback the attacker gets.
TrialResult brute_force_trial(const InstrumentedProgram &program,
                              const BruteForceTarget &target,
                              const CampaignConfig &config,
                              std::uint64_t trial_seed);

CampaignResult brute_force_campaign(const Program &program,
                                    const ProtectionMode &mode,
                                    const BruteForceTarget &target,
                                    const CampaignConfig &config);

/// Single brute_force action run as a one-trial campaign.
AttackResult run_brute_force(const Program &program, const ProtectionMode &mode,
                             const BruteForceAction &action, std::uint64_t seed,
                             const VmConfig &config);

struct ScriptCampaignResult {
  std::string mode;
  std::uint64_t seed = 0;
  std::uint64_t trials = 0;
  std::map<std::string, std::uint64_t> outcomes;
  /// Trials classified as bypassed.
  Proportion accepted;
  /// Trials whose canary chain authenticated, whether or not the final
  /// comparison then caught the substitution.
  Proportion chain_authenticated;
};

nlohmann::json to_json(const ScriptCampaignResult &result);

/// Runs `script` once per trial, each in a process with fresh keys.
ScriptCampaignResult script_campaign(const Program &program,
                                     const ProtectionMode &mode,
                                     const AttackScript &script,
                                     std::uint64_t trials, std::uint64_t seed,
                                     unsigned workers = 1,
                                     const VmConfig &config = {});

} // namespace pcan
