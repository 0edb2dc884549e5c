#include "pcan/campaign.hpp"

#include "pcan/error.hpp"
#include "parallel.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace pcan {

using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + (index + 1) * 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Proportion::rate() const {
  return total == 0 ? 0.0
                    : static_cast<double>(hits) / static_cast<double>(total);
}

double Proportion::sigma() const {
  if (total == 0)
    return 0.0;
  const double p = rate();
  return std::sqrt(p * (1.0 - p) / static_cast<double>(total));
}

double Proportion::lower() const { return std::max(0.0, rate() - 3 * sigma()); }
double Proportion::upper() const { return std::min(1.0, rate() + 3 * sigma()); }

json to_json(const Proportion &p) {
  return {{"hits", p.hits},       {"total", p.total},
          {"rate", p.rate()},     {"sigma", p.sigma()},
          {"ci3_low", p.lower()}, {"ci3_high", p.upper()}};
}

std::uint64_t CampaignConfig::effective_budget() const {
  if (budget != 0)
    return budget;
  return restart == RestartModel::Fork ? 4096 : 1;
}

namespace {

/// What the attacker knows about the value held by a slot: guesses are
/// `known | (random & unknown)`.
struct GuessSpace {
  std::uint64_t known = 0;
  std::uint64_t unknown = 0;
};

std::uint64_t field_mask(unsigned width, unsigned shift) {
  const std::uint64_t m =
      width >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << width) - 1;
  return m << shift;
}

GuessSpace guess_space(const FrameView &view, std::size_t slot_index,
                       const pa::PacKeySet &keys) {
  const InstrumentedFunction &fn = view.function;
  const Slot &slot = fn.layout.slots[slot_index];
  const CanaryPlan &plan = fn.plan;
  switch (slot.role) {
  case SlotRole::Canary: {
    // C_i = pacda(&C_{i-1}): the address is public, only the tag is not.
    const std::size_t prev = plan.chain.at(slot.canary_index - 1);
    return {view.frame.sp + fn.layout.slots[prev].offset,
            field_mask(keys.pac_width, pa::kPacShift)};
  }
  case SlotRole::AnchorC0:
    switch (plan.c0_kind) {
    case C0Kind::PacgaAnchor:
      return {0, field_mask(keys.ga_width, 32)};
    case C0Kind::TerminatorConstant:
      return {kTerminatorCanary, 0};
    default:
      return {0, ~std::uint64_t{0}};
    }
  case SlotRole::SavedReturn:
    if (plan.c0_kind == C0Kind::SignedReturnAddress)
      return {view.frame.return_address,
              field_mask(keys.pac_width, pa::kPacShift)};
    return {view.frame.return_address, 0};
  default:
    throw ScriptError("brute_force target '" + slot.label() +
                      "' is not a canary, anchor or return slot");
  }
}

std::size_t resolve_target(const InstrumentedFunction &fn,
                           const BruteForceTarget &target) {
  const auto &layout = fn.layout;
  const auto buf = layout.find_local(target.buffer);
  if (!buf || layout.slots[*buf].role != SlotRole::Buffer)
    throw ScriptError("'" + target.buffer + "' is not a buffer of '" +
                      fn.def.name + "'");
  if (target.slot) {
    auto idx = layout.resolve(*target.slot);
    if (!idx)
      throw ScriptError("slot '" + *target.slot + "' does not exist in the " +
                        std::string(to_string(fn.plan.mode.scheme)) +
                        " layout of " + fn.def.name);
    if (layout.slots[*idx].offset < layout.slots[*buf].end())
      throw ScriptError("slot '" + *target.slot + "' lies below buffer '" +
                        target.buffer + "'");
    return *idx;
  }
  for (std::size_t i = *buf + 1; i < layout.slots.size(); ++i) {
    const SlotRole role = layout.slots[i].role;
    if (role == SlotRole::Canary || role == SlotRole::AnchorC0)
      return i;
  }
  return layout.saved_return();
}

class GuessObserver : public ExecutionObserver {
public:
  GuessObserver(const BruteForceTarget &target, std::size_t buffer,
                std::size_t slot, const std::vector<std::uint8_t> &prefix,
                std::uint64_t random_bits, bool whole_value)
      : target_(target), buffer_(buffer), slot_(slot), prefix_(prefix),
        random_bits_(random_bits), whole_value_(whole_value) {}

  void before_op(Machine &machine, const FrameView &view) override {
    if (fired_ || view.frame.function != target_.where.function ||
        view.frame.instance != target_.where.instance ||
        view.frame.pc != target_.where.at)
      return;
    fired_ = true;
    const auto &slots = view.function.layout.slots;
    const Slot &buf = slots[buffer_];
    const Slot &slot = slots[slot_];
    std::vector<std::uint8_t> payload(slot.offset - buf.offset, 0x41);
    if (whole_value_) {
      const GuessSpace space = guess_space(view, slot_, machine.state().keys);
      guess_ = space.known | (random_bits_ & space.unknown);
      for (unsigned i = 0; i < 8; ++i)
        payload.push_back(static_cast<std::uint8_t>(guess_ >> (8 * i)));
    } else {
      payload.insert(payload.end(), prefix_.begin(), prefix_.end());
    }
    machine.overflow_write(view.frame.sp + buf.offset, payload, view.depth,
                           buffer_);
  }

  bool fired() const { return fired_; }

private:
  const BruteForceTarget &target_;
  std::size_t buffer_;
  std::size_t slot_;
  const std::vector<std::uint8_t> &prefix_;
  std::uint64_t random_bits_;
  bool whole_value_;
  bool fired_ = false;
  std::uint64_t guess_ = 0;
};

struct TrialRun {
  TrialResult result;
  RunReport last;
};

TrialRun run_trial(const InstrumentedProgram &program,
                   const BruteForceTarget &target, const CampaignConfig &config,
                   std::uint64_t trial_seed) {
  const InstrumentedFunction &fn = program.function(target.where.function);
  if (target.where.at > fn.def.body.size())
    throw ScriptError("op index " + std::to_string(target.where.at) +
                      " is past the end of '" + fn.def.name + "'");
  const std::size_t slot = resolve_target(fn, target);
  const std::size_t buffer = fn.layout.find_local(target.buffer).value();

  const VmState parent = make_state(trial_seed, config.vm);
  std::mt19937_64 rng(derive_seed(trial_seed, ~std::uint64_t{0}));
  const bool bytewise = config.strategy == GuessStrategy::ByteByByte;

  TrialRun run;
  run.result.seed = trial_seed;
  std::vector<std::uint8_t> known;
  unsigned start = static_cast<unsigned>(rng() & 0xff);
  unsigned tried = 0;

  const std::uint64_t budget = config.effective_budget();
  for (std::uint64_t attempt = 0; attempt < budget; ++attempt) {
    VmState state = config.restart == RestartModel::Fork
                        ? fork_snapshot(parent)
                        : rekey(parent, derive_seed(trial_seed, attempt));
    std::vector<std::uint8_t> prefix = known;
    if (bytewise)
      prefix.push_back(static_cast<std::uint8_t>((start + tried) & 0xff));
    const std::uint64_t bits = bytewise ? 0 : rng();

    GuessObserver observer(target, buffer, slot, prefix, bits, !bytewise);
    Machine machine(program, std::move(state), trial_seed);
    run.last = machine.run(&observer);
    ++run.result.attempts;
    if (!observer.fired()) {
      if (run.last.status == RunStatus::Exited)
        throw ScriptError("brute_force point " + target.where.function + "#" +
                          std::to_string(target.where.instance) + "@" +
                          std::to_string(target.where.at) +
                          " is never reached");
    }

    if (run.last.status == RunStatus::Faulted) {
      ++run.result.faulted;
      if (bytewise && ++tried == 256) {
        // Every value failed: the secret changed under us. Start over.
        known.clear();
        tried = 0;
        start = static_cast<unsigned>(rng() & 0xff);
      }
      continue;
    }
    if (!bytewise) {
      run.result.bypassed = true;
      break;
    }
    known = prefix;
    tried = 0;
    start = static_cast<unsigned>(rng() & 0xff);
    if (known.size() == 8) {
      run.result.bypassed = true;
      break;
    }
  }
  return run;
}

} // namespace

TrialResult brute_force_trial(const InstrumentedProgram &program,
                              const BruteForceTarget &target,
                              const CampaignConfig &config,
                              std::uint64_t trial_seed) {
  return run_trial(program, target, config, trial_seed).result;
}

CampaignResult brute_force_campaign(const Program &program,
                                    const ProtectionMode &mode,
                                    const BruteForceTarget &target,
                                    const CampaignConfig &config) {
  const InstrumentedProgram inst =
      instrument_program(program, mode, config.vm.layout);
  CampaignResult out;
  out.mode = std::string(to_string(mode.scheme));
  out.config = config;
  out.budget = config.effective_budget();
  out.trials = config.trials;
  {
    const InstrumentedFunction &fn = inst.function(target.where.function);
    out.slot = fn.layout.slots[resolve_target(fn, target)].label();
  }

  out.per_trial.resize(config.trials);
  parallel_for(config.trials, config.workers, [&](std::uint64_t i) {
    out.per_trial[i] =
        brute_force_trial(inst, target, config, derive_seed(config.seed, i));
  });

  std::vector<std::uint64_t> to_bypass;
  for (const TrialResult &t : out.per_trial) {
    out.total_attempts += t.attempts;
    out.detected += t.faulted;
    if (t.bypassed) {
      ++out.bypassed;
      to_bypass.push_back(t.attempts);
    }
  }
  out.per_attempt = {out.bypassed, out.total_attempts};
  if (!to_bypass.empty()) {
    std::sort(to_bypass.begin(), to_bypass.end());
    double sum = 0;
    for (std::uint64_t a : to_bypass)
      sum += static_cast<double>(a);
    out.mean_attempts_to_bypass = sum / static_cast<double>(to_bypass.size());
    const std::size_t m = to_bypass.size();
    out.median_attempts_to_bypass =
        m % 2 ? static_cast<double>(to_bypass[m / 2])
              : (static_cast<double>(to_bypass[m / 2 - 1]) +
                 static_cast<double>(to_bypass[m / 2])) /
                    2.0;
    out.max_attempts_to_bypass = to_bypass.back();
  }
  return out;
}

json to_json(const CampaignResult &r, bool with_trials) {
  json j = {{"mode", r.mode},
            {"target_slot", r.slot},
            {"restart", to_string(r.config.restart)},
            {"strategy", to_string(r.config.strategy)},
            {"pac_width", r.config.vm.pac_width},
            {"seed", r.config.seed},
            {"budget", r.budget},
            {"trials", r.trials},
            {"detected", r.detected},
            {"bypassed", r.bypassed},
            {"total_attempts", r.total_attempts},
            {"mean_attempts_to_bypass", r.mean_attempts_to_bypass},
            {"median_attempts_to_bypass", r.median_attempts_to_bypass},
            {"max_attempts_to_bypass", r.max_attempts_to_bypass},
            {"per_attempt_success", to_json(r.per_attempt)}};
  if (with_trials) {
    json trials = json::array();
    for (const TrialResult &t : r.per_trial)
      trials.push_back({{"seed", t.seed},
                        {"attempts", t.attempts},
                        {"faulted", t.faulted},
                        {"bypassed", t.bypassed}});
    j["per_trial"] = std::move(trials);
  }
  return j;
}

AttackResult run_brute_force(const Program &program, const ProtectionMode &mode,
                             const BruteForceAction &action, std::uint64_t seed,
                             const VmConfig &config) {
  const InstrumentedProgram inst =
      instrument_program(program, mode, config.layout);
  CampaignConfig cc;
  cc.restart = action.restart;
  cc.strategy = action.strategy;
  cc.budget = action.budget;
  cc.seed = seed;
  cc.vm = config;
  const BruteForceTarget target{action.where, action.buffer, action.slot};
  TrialRun run = run_trial(inst, target, cc, seed);

  AttackResult result;
  result.report = std::move(run.last);
  const std::string summary =
      std::to_string(run.result.attempts) + " attempts, " +
      std::to_string(run.result.faulted) + " faulted, " +
      (run.result.bypassed ? "bypassed" : "budget exhausted");
  result.transcript.push_back({result.report.steps, "brute_force",
                               action.where.function, summary, {}});
  result.outcome = run.result.bypassed ? Outcome::Bypassed
                                       : classify(result.report);
  return result;
}

ScriptCampaignResult script_campaign(const Program &program,
                                     const ProtectionMode &mode,
                                     const AttackScript &script,
                                     std::uint64_t trials, std::uint64_t seed,
                                     unsigned workers,
                                     const VmConfig &config) {
  const InstrumentedProgram inst =
      instrument_program(program, mode, config.layout);
  std::vector<Outcome> outcomes(trials);
  std::vector<char> authenticated(trials, 0);
  parallel_for(trials, workers, [&](std::uint64_t i) {
    const std::uint64_t s = derive_seed(seed, i);
    AttackResult r = execute_on(inst, make_state(s, config), script, s);
    outcomes[i] = r.outcome;
    authenticated[i] =
        r.outcome == Outcome::Bypassed ||
        (r.report.fault && r.report.fault->kind == FaultKind::CanaryMismatch);
  });

  ScriptCampaignResult out;
  out.mode = std::string(to_string(mode.scheme));
  out.seed = seed;
  out.trials = trials;
  out.accepted.total = trials;
  out.chain_authenticated.total = trials;
  for (std::uint64_t i = 0; i < trials; ++i) {
    ++out.outcomes[std::string(to_string(outcomes[i]))];
    out.accepted.hits += outcomes[i] == Outcome::Bypassed;
    out.chain_authenticated.hits += authenticated[i] != 0;
  }
  return out;
}

json to_json(const ScriptCampaignResult &r) {
  return {{"mode", r.mode},
          {"seed", r.seed},
          {"trials", r.trials},
          {"outcomes", r.outcomes},
          {"accepted", to_json(r.accepted)},
          {"chain_authenticated", to_json(r.chain_authenticated)}};
}

} // namespace pcan
