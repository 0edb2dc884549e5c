#pragma once

// Instrumentation pass: decides which functions get canaries, lays out
// frames with interleaved canary slots and emits the per-function canary
// plan together with its prologue and epilogue action streams.
//
// Frame geometry (ascending offsets from the frame base, i.e. from SP):
//   scalars (declaration order)
//   for each buffer: [alignment padding] buffer [canary C_i in PCan modes]
//   anchor C0 (standalone PCan and the single-canary baselines)
//   saved return address
// The frame size is the slot total rounded up to 16. Buffers are placed so
// that they end on an 8-byte boundary, which keeps the byte just past every
// buffer inside the next slot.

#include "pcan/pa.hpp"
#include "pcan/program.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pcan {

enum class Scheme {
  None,
  StackGuard,
  Terminator,
  StrongHeuristic,
  PcanStandalone,
  PcanCombined,
};

std::string_view to_string(Scheme scheme);
/// Throws ConfigError for unknown names.
Scheme parse_scheme(std::string_view name);
bool is_pcan(Scheme scheme);
const std::vector<Scheme> &all_schemes();

struct ProtectionMode {
  Scheme scheme = Scheme::PcanStandalone;
  /// Buffer-size gate for the stackguard and terminator schemes.
  std::uint64_t threshold = 8;

  void validate() const;

  friend bool operator==(const ProtectionMode &,
                         const ProtectionMode &) = default;
};

struct LayoutOptions {
  std::uint64_t max_frame_size = 64 * 1024;
  /// Place scalars below all buffers. When false, locals keep their
  /// declaration order.
  bool rearrange = true;
};

/// Value of the terminator canary. Stored little-endian it contains NUL,
/// CR, 0xFF and LF bytes.
inline constexpr std::uint64_t kTerminatorCanary = 0x000AFF0D00000000ULL;

enum class SlotRole { Scalar, Buffer, Padding, Canary, AnchorC0, SavedReturn };

std::string_view to_string(SlotRole role);

struct Slot {
  std::uint64_t offset = 0;
  std::uint64_t size = 0;
  SlotRole role = SlotRole::Padding;
  /// Owning local for Scalar and Buffer slots; for a Canary slot, the
  /// buffer it guards.
  std::string local;
  /// i for canary C_i.
  std::size_t canary_index = 0;

  std::uint64_t end() const { return offset + size; }
  /// Short label used in events and tables: the local name, "C<i>",
  /// "C0", "return" or "pad".
  std::string label() const;

  friend bool operator==(const Slot &, const Slot &) = default;
};

struct FrameLayout {
  std::string function;
  std::vector<Slot> slots;
  std::uint64_t frame_size = 0;

  std::optional<std::size_t> find_local(std::string_view local) const;
  std::optional<std::size_t> find_canary(std::size_t index) const;
  std::optional<std::size_t> canary_after(std::string_view buffer) const;
  std::optional<std::size_t> anchor() const;
  std::size_t saved_return() const;
  /// Index of the slot containing the byte at `offset`, if any.
  std::optional<std::size_t> slot_at(std::uint64_t offset) const;
  /// Resolves a slot name: a local name, "canary:<buffer>", "C<i>",
  /// "anchor" or "return".
  std::optional<std::size_t> resolve(std::string_view name) const;

  friend bool operator==(const FrameLayout &, const FrameLayout &) = default;
};

/// ((sp mod 2^48) << 16) + function_id.
pa::Modifier compute_modifier(std::uint64_t sp, std::uint16_t function_id);

bool select_protected(const FunctionDef &fn, const ProtectionMode &mode);

FrameLayout layout_frame(const FunctionDef &fn, const ProtectionMode &mode,
                         const LayoutOptions &options = {});

enum class C0Kind {
  None,
  PacgaAnchor,
  SignedReturnAddress,
  ReferenceCopy,
  TerminatorConstant,
};

std::string_view to_string(C0Kind kind);

struct CanaryPlan {
  ProtectionMode mode;
  bool protected_frame = false;
  C0Kind c0_kind = C0Kind::None;
  std::uint16_t function_id = 0;
  /// Number of chained canaries C_1..C_n.
  std::size_t canary_count = 0;
  /// Slot indices of C_0..C_n. Empty for unprotected frames.
  std::vector<std::size_t> chain;

  friend bool operator==(const CanaryPlan &, const CanaryPlan &) = default;
};

/// Throws LayoutError when the layout does not belong to (fn, mode).
CanaryPlan build_plan(const FunctionDef &fn, const FrameLayout &layout,
                      const ProtectionMode &mode);

enum class ActionOp {
  // Prologue: each action computes a value and stores it to `slot`.
  StorePacgaAnchor,   // pacga(SP, mod)
  StoreSignedPointer, // pacda(&slot[source], mod)
  StoreSignedReturn,  // pacia(LR, entry SP)
  StoreReferenceCopy, // copy of the in-memory reference canary
  StoreTerminator,    // terminator constant
  // Epilogue.
  LoadSlot,           // load the canary at `slot`
  Autda,              // authenticate the loaded pointer
  LoadThroughPointer, // dereference the authenticated pointer
  Pacga,              // regenerate C0
  CompareAnchor,      // loaded C0' == regenerated C0
  Autia,              // authenticate the loaded return address
  LoadReference,      // load the in-memory reference canary
  CompareReference,   // loaded canary == reference
  CompareTerminator,  // loaded canary == terminator constant
};

std::string_view to_string(ActionOp op);

struct VmAction {
  ActionOp op;
  std::size_t slot = 0;
  std::size_t source = 0;

  /// True for actions that read mutable reference storage in memory.
  bool reads_mutable_reference() const;

  friend bool operator==(const VmAction &, const VmAction &) = default;
};

std::vector<VmAction> prologue_recipe(const CanaryPlan &plan);
std::vector<VmAction> epilogue_recipe(const CanaryPlan &plan);

struct InstrumentedFunction {
  FunctionDef def;
  FrameLayout layout;
  CanaryPlan plan;
  std::vector<VmAction> prologue;
  std::vector<VmAction> epilogue;
};

struct InstrumentedProgram {
  ProtectionMode mode;
  LayoutOptions options;
  std::string entry;
  std::map<std::string, InstrumentedFunction> functions;

  const InstrumentedFunction &function(std::string_view name) const;
};

InstrumentedProgram instrument_program(const Program &program,
                                       const ProtectionMode &mode,
                                       const LayoutOptions &options = {});

} // namespace pcan
