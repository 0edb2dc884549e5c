#include "pcan/cli.hpp"

#include "pcan/campaign.hpp"
#include "pcan/error.hpp"
#include "pcan/matrix.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

namespace pcan {

using nlohmann::json;

namespace {

struct CliConfig {
  std::string mode = "pcan_standalone";
  bool mode_given = false;
  unsigned pac_width = pa::kDefaultPacWidth;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::uint64_t trials = 1000;
  std::uint64_t budget = 0;
  std::string restart = "fork";
  std::string strategy = "byte_by_byte";
  std::string format = "table";
  unsigned workers = 1;
  std::uint64_t threshold = 8;
  bool no_rearrange = false;
  std::string function;
  std::string buffer;
  std::string slot;
  std::uint64_t instance = 0;
  long long at = -1;
  std::string scenario;
  std::vector<std::string> inputs;
};

std::vector<std::string> split_modes(const std::string &list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty())
      out.push_back(item);
  if (out.empty())
    throw ConfigError("--mode: no protection mode given");
  return out;
}

std::vector<ProtectionMode> parse_modes(const CliConfig &cfg, bool allow_list) {
  std::vector<ProtectionMode> modes;
  std::vector<std::string> names;
  if (cfg.mode == "all") {
    if (!allow_list)
      throw ConfigError("--mode: 'all' is only accepted by campaign and matrix");
    for (Scheme s : all_schemes())
      names.emplace_back(to_string(s));
  } else {
    names = split_modes(cfg.mode);
    if (names.size() > 1 && !allow_list)
      throw ConfigError("--mode: this subcommand takes a single mode");
  }
  for (const std::string &name : names) {
    ProtectionMode mode;
    try {
      mode.scheme = parse_scheme(name);
    } catch (const ConfigError &e) {
      throw ConfigError(std::string("--mode: ") + e.what());
    }
    mode.threshold = cfg.threshold;
    mode.validate();
    modes.push_back(mode);
  }
  return modes;
}

VmConfig vm_config(const CliConfig &cfg) {
  VmConfig vm;
  vm.pac_width = cfg.pac_width;
  vm.layout.rearrange = !cfg.no_rearrange;
  try {
    vm.validate();
  } catch (const ConfigError &e) {
    throw ConfigError(std::string("--pac-width: ") + e.what());
  }
  return vm;
}

std::uint64_t resolve_seed(CliConfig &cfg, std::ostream &out,
                           std::ostream &err) {
  if (!cfg.seed_given) {
    std::random_device rd;
    cfg.seed = (static_cast<std::uint64_t>(rd()) << 32) | rd();
    (cfg.format == "json" ? err : out)
        << "seed: " << cfg.seed << " (generated)\n";
  }
  return cfg.seed;
}

const std::string &input(const CliConfig &cfg, std::size_t index,
                         const char *what) {
  if (cfg.inputs.size() <= index)
    throw ConfigError(std::string("missing ") + what + " path");
  return cfg.inputs[index];
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

json action_json(const VmAction &a) {
  return {{"op", to_string(a.op)}, {"slot", a.slot}, {"source", a.source}};
}

// ---------------------------------------------------------------------------
// layout

int cmd_layout(CliConfig &cfg, std::ostream &out) {
  const Program program = load_program(input(cfg, 0, "program"));
  const ProtectionMode mode = parse_modes(cfg, false).front();
  const VmConfig vm = vm_config(cfg);
  const InstrumentedProgram inst =
      instrument_program(program, mode, vm.layout);
  if (!cfg.function.empty() && !program.functions.count(cfg.function))
    throw ConfigError("--function: unknown function '" + cfg.function + "'");

  json functions = json::array();
  for (const auto &[name, fn] : inst.functions) {
    if (!cfg.function.empty() && name != cfg.function)
      continue;
    if (cfg.format == "json") {
      json slots = json::array();
      for (const Slot &s : fn.layout.slots)
        slots.push_back({{"offset", s.offset},
                         {"size", s.size},
                         {"role", to_string(s.role)},
                         {"label", s.label()}});
      json pro = json::array();
      json epi = json::array();
      for (const VmAction &a : fn.prologue)
        pro.push_back(action_json(a));
      for (const VmAction &a : fn.epilogue)
        epi.push_back(action_json(a));
      functions.push_back({{"name", name},
                           {"function_id", fn.def.function_id},
                           {"frame_size", fn.layout.frame_size},
                           {"protected", fn.plan.protected_frame},
                           {"c0_kind", to_string(fn.plan.c0_kind)},
                           {"canary_count", fn.plan.canary_count},
                           {"slots", std::move(slots)},
                           {"prologue", std::move(pro)},
                           {"epilogue", std::move(epi)}});
      continue;
    }
    out << "function " << name << "  id=0x" << std::hex << std::setw(4)
        << std::setfill('0') << fn.def.function_id << std::dec
        << std::setfill(' ') << "  frame=" << fn.layout.frame_size
        << "  protected=" << (fn.plan.protected_frame ? "yes" : "no")
        << "  c0=" << to_string(fn.plan.c0_kind)
        << "  canaries=" << fn.plan.canary_count << "\n";
    out << "  offset  size  role          label\n";
    for (const Slot &s : fn.layout.slots)
      out << "  " << std::setw(6) << s.offset << "  " << std::setw(4) << s.size
          << "  " << std::left << std::setw(12) << to_string(s.role)
          << std::right << "  " << s.label() << "\n";
    auto recipe = [&](const char *title, const std::vector<VmAction> &acts) {
      out << "  " << title << ":";
      for (const VmAction &a : acts)
        out << " " << to_string(a.op) << "(" << fn.layout.slots[a.slot].label()
            << ")";
      out << (acts.empty() ? " -\n" : "\n");
    };
    recipe("prologue", fn.prologue);
    recipe("epilogue", fn.epilogue);
  }
  if (cfg.format == "json")
    out << json{{"mode", to_string(mode.scheme)},
                {"functions", std::move(functions)}}
               .dump(2)
        << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// run / attack

json counts_json(const RunReport &report) {
  json j = json::object();
  for (const auto &[name, row] : instruction_counts(report)) {
    auto c = [](const OpCounts &o) {
      return json{{"pac_ops", o.pac_ops},
                  {"loads", o.loads},
                  {"stores", o.stores},
                  {"compares", o.compares},
                  {"total", o.total()}};
    };
    j[name] = {{"invocations", row.invocations},
               {"prologue_per_call", c(row.prologue_per_call)},
               {"epilogue_per_call", c(row.epilogue_per_call)}};
  }
  return j;
}

void print_report(const RunReport &r, std::ostream &out) {
  out << "mode: " << r.mode << "  seed: " << r.seed
      << "  status: " << to_string(r.status) << "  steps: " << r.steps << "\n";
  if (r.fault) {
    const Fault &f = *r.fault;
    out << "fault: " << to_string(f.kind) << " in " << f.function;
    if (!f.slot.empty())
      out << " slot " << f.slot;
    if (f.address)
      out << " at " << hex64(*f.address);
    if (f.key)
      out << " key " << pa::to_string(*f.key);
    if (f.during_verification)
      out << " (canary verification)";
    out << "\n";
  }
  out << "events:\n";
  for (const Event &e : r.events) {
    out << "  " << std::setw(5) << e.step << "  " << std::left << std::setw(20)
        << e.kind << std::right << " " << e.function;
    if (e.slot)
      out << " " << *e.slot;
    if (e.address)
      out << " " << hex64(*e.address);
    out << "\n";
  }
  out << "instrumentation per call (pac/load/store/cmp):\n";
  for (const auto &[name, row] : instruction_counts(r)) {
    auto c = [](const OpCounts &o) {
      std::ostringstream os;
      os << o.pac_ops << "/" << o.loads << "/" << o.stores << "/"
         << o.compares;
      return os.str();
    };
    out << "  " << std::left << std::setw(16) << name << std::right
        << " calls " << row.invocations << "  prologue "
        << c(row.prologue_per_call) << "  epilogue "
        << c(row.epilogue_per_call) << "\n";
  }
}

int cmd_run(CliConfig &cfg, std::ostream &out, std::ostream &err) {
  const Program program = load_program(input(cfg, 0, "program"));
  const ProtectionMode mode = parse_modes(cfg, false).front();
  const VmConfig vm = vm_config(cfg);
  const std::uint64_t seed = resolve_seed(cfg, out, err);
  const RunReport report = run(program, mode, seed, vm);
  if (cfg.format == "json") {
    json j = to_json(report);
    j["instruction_counts"] = counts_json(report);
    out << j.dump(2) << "\n";
  } else {
    print_report(report, out);
  }
  return kExitOk;
}

int cmd_attack(CliConfig &cfg, std::ostream &out, std::ostream &err) {
  const Program program = load_program(input(cfg, 0, "program"));
  const AttackScript script = load_script(input(cfg, 1, "scenario"));
  const ProtectionMode mode = parse_modes(cfg, false).front();
  const VmConfig vm = vm_config(cfg);
  const std::uint64_t seed = resolve_seed(cfg, out, err);
  const AttackResult result = execute_script(program, mode, script, seed, vm);
  if (cfg.format == "json") {
    out << to_json(result).dump(2) << "\n";
    return kExitOk;
  }
  out << "outcome: " << to_string(result.outcome) << "\n";
  out << "transcript:\n";
  for (const TranscriptEntry &t : result.transcript) {
    out << "  " << std::setw(5) << t.step << "  " << std::left << std::setw(16)
        << t.action << std::right << " " << t.function << ": " << t.detail;
    if (!t.bytes.empty())
      out << " [" << to_hex(t.bytes) << "]";
    out << "\n";
  }
  print_report(result.report, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// campaign / matrix

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::size_t return_index(const FunctionDef &fn) {
  for (std::size_t i = 0; i < fn.body.size(); ++i)
    if (std::holds_alternative<ReturnOp>(fn.body[i]))
      return i;
  return fn.body.size();
}

int cmd_campaign(CliConfig &cfg, std::ostream &out, std::ostream &err) {
  const bool builtin = cfg.inputs.empty();
  const Program program =
      builtin ? builtin_program() : load_program(cfg.inputs.front());
  const std::vector<ProtectionMode> modes = parse_modes(cfg, true);
  const VmConfig vm = vm_config(cfg);
  const std::uint64_t seed = resolve_seed(cfg, out, err);
  if (cfg.workers == 0)
    throw ConfigError("--workers must be at least 1");

  json results = json::array();
  if (!cfg.scenario.empty()) {
    const AttackScript script = load_script(cfg.scenario);
    for (const ProtectionMode &mode : modes) {
      const ScriptCampaignResult r = script_campaign(
          program, mode, script, cfg.trials, seed, cfg.workers, vm);
      if (cfg.format == "json") {
        results.push_back(to_json(r));
        continue;
      }
      out << std::left << std::setw(18) << r.mode << std::right
          << " accepted " << r.accepted.hits << "/" << r.trials << "  rate "
          << fixed(r.accepted.rate(), 6) << "  3-sigma CI ["
          << fixed(r.accepted.lower(), 6) << ", "
          << fixed(r.accepted.upper(), 6) << "]  chain authenticated "
          << r.chain_authenticated.hits << "\n";
    }
  } else {
    BruteForceTarget target;
    if (builtin) {
      target.where = {"handle", 0, 3};
      target.buffer = "name";
    } else {
      if (cfg.function.empty() || cfg.buffer.empty())
        throw ConfigError("--function and --buffer are required with a "
                          "program file");
      target.where.function = cfg.function;
      target.buffer = cfg.buffer;
    }
    if (!cfg.function.empty())
      target.where.function = cfg.function;
    if (!cfg.buffer.empty())
      target.buffer = cfg.buffer;
    auto fn = program.functions.find(target.where.function);
    if (fn == program.functions.end())
      throw ConfigError("--function: unknown function '" +
                        target.where.function + "'");
    target.where.instance = cfg.instance;
    target.where.at = cfg.at >= 0 ? static_cast<std::size_t>(cfg.at)
                                  : return_index(fn->second);
    if (!cfg.slot.empty())
      target.slot = cfg.slot;

    CampaignConfig cc;
    cc.restart = parse_restart(cfg.restart);
    cc.strategy = parse_strategy(cfg.strategy);
    cc.trials = cfg.trials;
    cc.budget = cfg.budget;
    cc.seed = seed;
    cc.workers = cfg.workers;
    cc.vm = vm;
    for (const ProtectionMode &mode : modes) {
      const CampaignResult r = brute_force_campaign(program, mode, target, cc);
      if (cfg.format == "json") {
        results.push_back(to_json(r));
        continue;
      }
      out << std::left << std::setw(18) << r.mode << std::right << " "
          << to_string(cc.restart) << "/" << to_string(cc.strategy)
          << " W=" << vm.pac_width << " slot " << r.slot << "\n"
          << "  bypassed " << r.bypassed << "/" << r.trials
          << " trials within budget " << r.budget << "; attempts "
          << r.total_attempts << " (faulted " << r.detected << ")\n"
          << "  success rate per attempt " << fixed(r.per_attempt.rate(), 6)
          << "  3-sigma CI [" << fixed(r.per_attempt.lower(), 6) << ", "
          << fixed(r.per_attempt.upper(), 6) << "]\n";
      if (r.bypassed != 0)
        out << "  attempts to bypass: mean "
            << fixed(r.mean_attempts_to_bypass, 1) << "  median "
            << fixed(r.median_attempts_to_bypass, 1) << "  max "
            << r.max_attempts_to_bypass << "\n";
    }
  }
  if (cfg.format == "json")
    out << json{{"seed", seed}, {"campaigns", std::move(results)}}.dump(2)
        << "\n";
  return kExitOk;
}

int cmd_matrix(CliConfig &cfg, std::ostream &out, std::ostream &err) {
  Program program;
  std::vector<Scenario> scenarios;
  if (cfg.inputs.empty()) {
    program = builtin_program();
    scenarios = builtin_scenarios();
  } else {
    program = load_program(cfg.inputs.front());
    if (cfg.inputs.size() < 2)
      throw ConfigError("matrix needs at least one scenario path after the "
                        "program");
    for (std::size_t i = 1; i < cfg.inputs.size(); ++i)
      scenarios.push_back({std::filesystem::path(cfg.inputs[i]).stem().string(),
                           load_script(cfg.inputs[i])});
  }
  if (!cfg.mode_given)
    cfg.mode = "all";
  const std::vector<ProtectionMode> modes = parse_modes(cfg, true);
  const VmConfig vm = vm_config(cfg);
  const std::uint64_t seed = resolve_seed(cfg, out, err);
  if (cfg.workers == 0)
    throw ConfigError("--workers must be at least 1");
  const DetectionMatrix m =
      differential_matrix(program, scenarios, modes, seed, cfg.workers, vm);
  if (cfg.format == "json") {
    out << to_json(m).dump(2) << "\n";
    return kExitOk;
  }
  std::size_t width = 8;
  for (const std::string &s : m.scenarios)
    width = std::max(width, s.size());
  out << std::left << std::setw(static_cast<int>(width)) << "scenario";
  for (const std::string &mode : m.modes)
    out << "  " << std::setw(22) << mode;
  out << "\n";
  for (std::size_t s = 0; s < m.scenarios.size(); ++s) {
    out << std::setw(static_cast<int>(width)) << m.scenarios[s];
    for (std::size_t k = 0; k < m.modes.size(); ++k)
      out << "  " << std::setw(22) << to_string(m.outcomes[s][k]);
    out << "\n";
  }
  out << std::right << "detected by pcan_standalone, not by none:";
  for (const std::string &s : m.pcan_only())
    out << " " << s;
  out << "\n";
  return kExitOk;
}

} // namespace

int run_cli(int argc, const char *const *argv, std::ostream &out,
            std::ostream &err) {
  CLI::App app{"PA-based stack canary laboratory", "pcanlab"};
  app.require_subcommand(1);
  CliConfig cfg;

  auto common = [&](CLI::App *sub, bool randomized) {
    sub->add_option("--mode", cfg.mode,
                    "Protection mode (campaign and matrix: comma list or all)")
        ->capture_default_str()
        ->each([&](const std::string &) { cfg.mode_given = true; });
    sub->add_option("--pac-width", cfg.pac_width, "PAC width in bits (4, 8, 16)")
        ->capture_default_str();
    sub->add_option("--format", cfg.format, "Output format")
        ->check(CLI::IsMember({"json", "table"}))
        ->capture_default_str();
    sub->add_option("--threshold", cfg.threshold,
                    "Buffer size gate for stackguard and terminator")
        ->capture_default_str();
    sub->add_flag("--no-rearrange", cfg.no_rearrange,
                  "Keep locals in declaration order");
    if (randomized)
      sub->add_option("--seed", cfg.seed, "Master seed")
          ->each([&](const std::string &) { cfg.seed_given = true; });
  };

  CLI::App *layout = app.add_subcommand("layout", "Print frame layouts");
  common(layout, false);
  layout->add_option("program", cfg.inputs, "Program file")->required();
  layout->add_option("--function", cfg.function, "Only this function");

  CLI::App *run_cmd = app.add_subcommand("run", "Run a program");
  common(run_cmd, true);
  run_cmd->add_option("program", cfg.inputs, "Program file")->required();

  CLI::App *attack = app.add_subcommand("attack", "Run an attack scenario");
  common(attack, true);
  attack->add_option("inputs", cfg.inputs, "Program file and scenario file")
      ->required()
      ->expected(2);

  CLI::App *campaign =
      app.add_subcommand("campaign", "Monte Carlo attack campaign");
  common(campaign, true);
  campaign->add_option("program", cfg.inputs, "Program file (default: built-in)")
      ->expected(0, 1);
  campaign->add_option("--trials", cfg.trials, "Number of trials")
      ->capture_default_str();
  campaign->add_option("--budget", cfg.budget,
                       "Attempts per trial (default 4096 fork, 1 rekey)");
  campaign->add_option("--restart", cfg.restart, "Restart model")
      ->check(CLI::IsMember({"fork", "rekey"}))
      ->capture_default_str();
  campaign->add_option("--strategy", cfg.strategy, "Guess strategy")
      ->check(CLI::IsMember({"random", "byte_by_byte"}))
      ->capture_default_str();
  campaign->add_option("--workers", cfg.workers, "Worker threads")
      ->capture_default_str();
  campaign->add_option("--function", cfg.function, "Attacked function");
  campaign->add_option("--buffer", cfg.buffer, "Overflowed buffer");
  campaign->add_option("--slot", cfg.slot, "Guessed slot");
  campaign->add_option("--instance", cfg.instance, "Attacked invocation");
  campaign->add_option("--at", cfg.at, "Body op before which to attack");
  campaign->add_option("--scenario", cfg.scenario,
                       "Repeat this scenario with fresh keys per trial");

  CLI::App *matrix = app.add_subcommand("matrix", "Differential matrix");
  common(matrix, true);
  matrix->add_option("inputs", cfg.inputs,
                     "Program file then scenario files (default: built-in)");
  matrix->add_option("--workers", cfg.workers, "Worker threads")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*layout)
      return cmd_layout(cfg, out);
    if (*run_cmd)
      return cmd_run(cfg, out, err);
    if (*attack)
      return cmd_attack(cfg, out, err);
    if (*campaign)
      return cmd_campaign(cfg, out, err);
    return cmd_matrix(cfg, out, err);
  } catch (const ParseError &e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error &e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvariantError &e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  } catch (const std::exception &e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

} // namespace pcan
