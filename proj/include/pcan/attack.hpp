#pragma once

// Scripted adversary. The attacker knows every frame layout, can trigger
// linear overflows and over-reads from stack buffers, and can restart the
// process. Actions fire at a point inside a specific function instance:
// just before body op `at` of the `instance`-th invocation of `function`.
// `at` equal to the index of the return op (or body.size()) means "right
// before the epilogue".

#include "pcan/instrument.hpp"
#include "pcan/program.hpp"
#include "pcan/vm.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace pcan {

struct FramePoint {
  std::string function;
  std::uint64_t instance = 0;
  std::size_t at = 0;

  friend bool operator==(const FramePoint &, const FramePoint &) = default;
};

/// Writes `payload` linearly upward from the start of `buffer`.
struct OverflowAction {
  FramePoint where;
  std::string buffer;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const OverflowAction &,
                         const OverflowAction &) = default;
};

/// String-copy overflow: `payload` (no zero bytes) plus a NUL terminator.
struct StringOverflowAction {
  FramePoint where;
  std::string buffer;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const StringOverflowAction &,
                         const StringOverflowAction &) = default;
};

/// Reads past the start of `buffer`, either a named slot or `length`
/// bytes at `offset` from the buffer start.
struct OverReadAction {
  FramePoint where;
  std::string buffer;
  std::optional<std::string> slot;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;

  friend bool operator==(const OverReadAction &,
                         const OverReadAction &) = default;
};

struct Patch {
  std::string slot;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const Patch &, const Patch &) = default;
};

/// Leaks every canary, anchor and saved return slot in the overflow range
/// and writes them back unchanged while filling everything else.
struct HarvestReplayAction {
  FramePoint where;
  std::string buffer;
  /// Overflow ends at the end of this slot...
  std::optional<std::string> through;
  /// ...or after this many bytes from the buffer start.
  std::optional<std::uint64_t> length;
  std::uint8_t fill = 0x41;
  /// Deliver through a string copy: zero bytes cannot be written except
  /// for the final terminator.
  bool string = false;
  std::vector<Patch> patches;

  friend bool operator==(const HarvestReplayAction &,
                         const HarvestReplayAction &) = default;
};

/// Harvests control slots from a donor frame and replays them into the
/// matching slots of a victim frame during an overflow from `buffer`.
struct SubstituteCanaryAction {
  FramePoint donor;
  FramePoint victim;
  std::string buffer;
  std::string through = "return";
  std::uint8_t fill = 0x41;
  /// Bytes written after the end of `through`.
  std::vector<std::uint8_t> extra;

  friend bool operator==(const SubstituteCanaryAction &,
                         const SubstituteCanaryAction &) = default;
};

enum class GuessStrategy { Random, ByteByByte };
enum class RestartModel { Fork, Rekey };

std::string_view to_string(GuessStrategy strategy);
std::string_view to_string(RestartModel model);
GuessStrategy parse_strategy(std::string_view name);
RestartModel parse_restart(std::string_view name);

/// Repeatedly overflows `buffer` with guesses for `slot` (default: the
/// slot directly above the buffer that holds a canary) until a guess
/// survives or `budget` attempts are spent.
struct BruteForceAction {
  FramePoint where;
  std::string buffer;
  std::optional<std::string> slot;
  GuessStrategy strategy = GuessStrategy::ByteByByte;
  RestartModel restart = RestartModel::Fork;
  std::uint64_t budget = 4096;

  friend bool operator==(const BruteForceAction &,
                         const BruteForceAction &) = default;
};

using AttackAction =
    std::variant<OverflowAction, StringOverflowAction, OverReadAction,
                 HarvestReplayAction, SubstituteCanaryAction,
                 BruteForceAction>;

struct AttackScript {
  std::vector<AttackAction> actions;

  friend bool operator==(const AttackScript &, const AttackScript &) = default;
};

AttackScript parse_script(std::string_view text);
AttackScript load_script(const std::filesystem::path &path);
nlohmann::json to_json(const AttackScript &script);

enum class Outcome {
  Clean,
  UndetectedCorruption,
  Bypassed,
  Detected,
  Crashed,
  NotApplicable,
};

std::string_view to_string(Outcome outcome);

struct TranscriptEntry {
  std::uint64_t step = 0;
  std::string action;
  std::string function;
  std::string detail;
  std::vector<std::uint8_t> bytes;
};

struct AttackResult {
  RunReport report;
  std::vector<TranscriptEntry> transcript;
  Outcome outcome = Outcome::Clean;
};

nlohmann::json to_json(const AttackResult &result);

/// Detected: a fault raised by canary verification or carrying PA key
/// attribution. Crashed: any other fault. Bypassed: exited after canary
/// slots were overwritten. UndetectedCorruption: exited after locals, the
/// return address or other stack data were overwritten without touching a
/// canary.
Outcome classify(const RunReport &report);

/// Runs `script` against an already instrumented program in `state`.
/// Scripts containing a brute_force action are not accepted here.
AttackResult execute_on(const InstrumentedProgram &program, VmState state,
                        const AttackScript &script, std::uint64_t seed);

AttackResult execute_script(const Program &program, const ProtectionMode &mode,
                            const AttackScript &script, std::uint64_t seed,
                            const VmConfig &config = {});

struct SweepRow {
  std::string function;
  std::string buffer;
  std::uint64_t length = 0;
  Outcome outcome = Outcome::Clean;
  /// Detection (or crash) happened in the attacked function's own frame,
  /// i.e. before its return completed.
  bool caught_before_return = false;
};

/// Every linear overflow of 1..max_length bytes past every buffer of every
/// function invoked by the program, fired right before the epilogue of the
/// first invocation.
std::vector<SweepRow> linear_overflow_sweep(const Program &program,
                                            const ProtectionMode &mode,
                                            std::uint64_t max_length,
                                            std::uint64_t seed,
                                            const VmConfig &config = {});

} // namespace pcan
