#pragma once

// Simulated 64-bit stack machine executing instrumented programs.
//
// The stack grows downward from VmConfig::stack_top. Calling a function
// decrements SP by its frame size, spills LR into the saved return slot
// (or, in combined mode, stores the pacia-signed LR there) and runs the
// prologue recipe. Returning runs the epilogue recipe, reloads LR and
// branches to it. Memory is byte-granular and sparse: reading a byte that
// was never written faults, as does any access through a pointer whose
// PAC field is non-zero.

#include "pcan/instrument.hpp"
#include "pcan/pa.hpp"
#include "pcan/program.hpp"

#include "json.hpp"

#include <array>
#include <bitset>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace pcan {

inline constexpr std::uint64_t kCodeBase = 0x0000'0000'0040'0000ULL;
inline constexpr std::uint64_t kCodeStride = 0x1000;
/// Return address handed to the entry function.
inline constexpr std::uint64_t kExitStub = kCodeBase - kCodeStride + 4;
/// Location of the stack-protector reference canary (a writable global).
inline constexpr std::uint64_t kReferenceAddress = 0x0000'0000'0060'0000ULL;

struct VmConfig {
  std::uint64_t stack_top = 0x0000'7fff'ffff'f000ULL;
  std::uint64_t stack_size = std::uint64_t{1} << 20;
  /// Mapped, initially unwritten bytes between the initial SP and
  /// stack_top.
  std::uint64_t startup_area = 0x100;
  unsigned pac_width = pa::kDefaultPacWidth;
  LayoutOptions layout;

  void validate() const;
};

class Memory {
public:
  static constexpr std::uint64_t kPageSize = 4096;

  void map(std::uint64_t base, std::uint64_t size);
  bool is_mapped(std::uint64_t address) const;

  /// Callers check is_mapped first.
  void write(std::uint64_t address, std::uint8_t value);
  std::optional<std::uint8_t> read(std::uint64_t address) const;

private:
  struct Page {
    std::array<std::uint8_t, kPageSize> data{};
    std::bitset<kPageSize> written;
  };
  struct Region {
    std::uint64_t base;
    std::uint64_t size;
  };

  std::vector<Region> regions_;
  std::unordered_map<std::uint64_t, Page> pages_;
};

enum class FaultKind {
  TranslationFault,
  CanaryMismatch,
  StackOverflow,
  InvalidAccess,
};

std::string_view to_string(FaultKind kind);

struct Fault {
  FaultKind kind = FaultKind::InvalidAccess;
  std::string function;
  std::string slot;
  std::optional<std::uint64_t> address;
  /// Key attribution recovered from the corruption pattern.
  std::optional<pa::KeyId> key;
  /// Raised while executing a canary verification (epilogue) recipe.
  bool during_verification = false;
};

/// Thrown by memory accesses; Machine::run converts it into a report.
struct GuestFault {
  Fault fault;
};

enum class RunStatus { Running, Exited, Faulted };

std::string_view to_string(RunStatus status);

struct Event {
  std::uint64_t step = 0;
  std::string kind;
  std::string function;
  std::optional<std::string> slot;
  std::optional<std::uint64_t> address;

  friend bool operator==(const Event &, const Event &) = default;
};

struct OpCounts {
  std::uint64_t pac_ops = 0;
  std::uint64_t loads = 0;
  std::uint64_t stores = 0;
  std::uint64_t compares = 0;

  std::uint64_t total() const { return pac_ops + loads + stores + compares; }
  OpCounts &operator+=(const OpCounts &other);

  friend bool operator==(const OpCounts &, const OpCounts &) = default;
};

struct FunctionCounts {
  std::uint64_t invocations = 0;
  OpCounts prologue;
  OpCounts epilogue;
};

struct FrameRecord {
  std::string function;
  std::uint64_t instance = 0;
  std::uint64_t sp = 0;
  std::uint64_t return_address = 0;
  std::size_t pc = 0;
};

struct VmState {
  Memory memory;
  std::uint64_t sp = 0;
  std::uint64_t lr = 0;
  std::uint64_t stack_limit = 0;
  pa::PacKeySet keys;
  std::uint64_t global_reference = 0;
  std::vector<FrameRecord> call_stack;
  RunStatus status = RunStatus::Running;
  std::optional<Fault> fault;
};

/// Fresh process: keys and reference canary drawn from `seed`, stack and
/// global page mapped, reference canary written to kReferenceAddress.
VmState make_state(std::uint64_t seed, const VmConfig &config = {});

/// Child process sharing the parent's keys, reference canary and memory.
VmState fork_snapshot(const VmState &state);

/// Restarted process: same memory image, new keys and reference canary.
VmState rekey(VmState state, std::uint64_t seed);

std::uint64_t load64(const VmState &state, std::uint64_t address);
void store64(VmState &state, std::uint64_t address, std::uint64_t value);

struct RunReport {
  std::string mode;
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::Running;
  std::optional<Fault> fault;
  std::vector<Event> events;
  OpCounts counts;
  std::map<std::string, FunctionCounts> per_function;
  std::uint64_t steps = 0;
};

nlohmann::json to_json(const Fault &fault);
nlohmann::json to_json(const RunReport &report);

struct FrameView {
  const InstrumentedFunction &function;
  const FrameRecord &frame;
  std::size_t depth;
};

class Machine;

/// Hook for code that acts on a running machine (the attack module).
class ExecutionObserver {
public:
  virtual ~ExecutionObserver() = default;
  /// Called once before each body op of every frame, and once more with
  /// pc == body.size() when the body falls through to the epilogue.
  virtual void before_op(Machine &machine, const FrameView &view) = 0;
};

class Machine {
public:
  Machine(const InstrumentedProgram &program, VmState state,
          std::uint64_t seed = 0);

  RunReport run(ExecutionObserver *observer = nullptr);

  const VmState &state() const { return state_; }
  const InstrumentedProgram &program() const { return program_; }
  std::uint64_t step() const { return step_; }

  /// Stack address of a slot in a live frame.
  std::uint64_t slot_address(const FrameRecord &frame,
                             const InstrumentedFunction &fn,
                             std::size_t slot) const;
  /// Highest address belonging to a live frame, plus one.
  std::uint64_t live_stack_top() const;

  /// Attacker-controlled linear write. Bytes landing outside `owner_slot`
  /// of the frame at `owner_depth` are logged as overwrite events.
  void overflow_write(std::uint64_t address,
                      std::span<const std::uint8_t> bytes,
                      std::size_t owner_depth, std::size_t owner_slot);
  /// Attacker-controlled read; faults on never-written bytes.
  std::vector<std::uint8_t> over_read(std::uint64_t address,
                                      std::size_t length,
                                      const std::string &function);
  void log(std::string kind, std::string function,
           std::optional<std::string> slot = std::nullopt,
           std::optional<std::uint64_t> address = std::nullopt);

private:
  void call(const std::string &name, std::uint64_t return_address);
  void do_return();
  void run_prologue(const InstrumentedFunction &fn, const FrameRecord &frame,
                    FunctionCounts &counts);
  std::uint64_t run_epilogue(const InstrumentedFunction &fn,
                             const FrameRecord &frame, FunctionCounts &counts);
  void write_bytes(std::uint64_t address, std::span<const std::uint8_t> bytes,
                   std::size_t owner_depth, std::size_t owner_slot);
  std::uint64_t code_address(const std::string &function,
                             std::size_t pc) const;

  const InstrumentedProgram &program_;
  VmState state_;
  std::uint64_t seed_;
  std::uint64_t step_ = 0;
  RunReport report_;
  std::map<std::string, std::uint64_t> instances_;
  std::map<std::string, std::size_t> code_index_;
};

/// Instruments `program` for `mode` and runs it in a fresh process.
RunReport run(const Program &program, const ProtectionMode &mode,
              std::uint64_t seed, const VmConfig &config = {});

struct OverheadRow {
  std::uint64_t invocations = 0;
  OpCounts prologue_per_call;
  OpCounts epilogue_per_call;
};

/// Per-invocation instrumentation cost of every function in the report.
std::map<std::string, OverheadRow> instruction_counts(const RunReport &report);

} // namespace pcan
