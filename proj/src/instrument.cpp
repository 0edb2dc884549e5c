#include "pcan/instrument.hpp"

#include "pcan/error.hpp"

#include <algorithm>
#include <charconv>

namespace pcan {

namespace {

constexpr std::uint64_t kSlotAlign = 8;
constexpr std::uint64_t kFrameAlign = 16;

std::uint64_t align_up(std::uint64_t value, std::uint64_t align) {
  return (value + align - 1) / align * align;
}

bool is_single_canary(Scheme scheme) {
  return scheme == Scheme::StackGuard || scheme == Scheme::Terminator ||
         scheme == Scheme::StrongHeuristic;
}

} // namespace

std::string_view to_string(Scheme scheme) {
  switch (scheme) {
  case Scheme::None:
    return "none";
  case Scheme::StackGuard:
    return "stackguard";
  case Scheme::Terminator:
    return "terminator";
  case Scheme::StrongHeuristic:
    return "strong_heuristic";
  case Scheme::PcanStandalone:
    return "pcan_standalone";
  case Scheme::PcanCombined:
    return "pcan_combined";
  }
  return "?";
}

Scheme parse_scheme(std::string_view name) {
  for (Scheme s : all_schemes())
    if (to_string(s) == name)
      return s;
  throw ConfigError("unknown protection mode '" + std::string(name) + "'");
}

bool is_pcan(Scheme scheme) {
  return scheme == Scheme::PcanStandalone || scheme == Scheme::PcanCombined;
}

const std::vector<Scheme> &all_schemes() {
  static const std::vector<Scheme> schemes = {
      Scheme::None,           Scheme::StackGuard,
      Scheme::Terminator,     Scheme::StrongHeuristic,
      Scheme::PcanStandalone, Scheme::PcanCombined,
  };
  return schemes;
}

void ProtectionMode::validate() const {
  if (threshold < 1)
    throw ConfigError("stack-protector threshold must be at least 1");
}

std::string_view to_string(SlotRole role) {
  switch (role) {
  case SlotRole::Scalar:
    return "scalar";
  case SlotRole::Buffer:
    return "buffer";
  case SlotRole::Padding:
    return "padding";
  case SlotRole::Canary:
    return "canary";
  case SlotRole::AnchorC0:
    return "anchor_c0";
  case SlotRole::SavedReturn:
    return "saved_return";
  }
  return "?";
}

std::string Slot::label() const {
  switch (role) {
  case SlotRole::Scalar:
  case SlotRole::Buffer:
    return local;
  case SlotRole::Canary:
    return "C" + std::to_string(canary_index);
  case SlotRole::AnchorC0:
    return "C0";
  case SlotRole::SavedReturn:
    return "return";
  case SlotRole::Padding:
    return "pad";
  }
  return "?";
}

std::optional<std::size_t>
FrameLayout::find_local(std::string_view local) const {
  for (std::size_t i = 0; i < slots.size(); ++i)
    if ((slots[i].role == SlotRole::Scalar ||
         slots[i].role == SlotRole::Buffer) &&
        slots[i].local == local)
      return i;
  return std::nullopt;
}

std::optional<std::size_t> FrameLayout::find_canary(std::size_t index) const {
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i].role == SlotRole::Canary && slots[i].canary_index == index)
      return i;
  return std::nullopt;
}

std::optional<std::size_t>
FrameLayout::canary_after(std::string_view buffer) const {
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i].role == SlotRole::Canary && slots[i].local == buffer)
      return i;
  return std::nullopt;
}

std::optional<std::size_t> FrameLayout::anchor() const {
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i].role == SlotRole::AnchorC0)
      return i;
  return std::nullopt;
}

std::size_t FrameLayout::saved_return() const {
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (slots[i].role == SlotRole::SavedReturn)
      return i;
  throw InvariantError("frame layout of '" + function +
                       "' has no saved return slot");
}

std::optional<std::size_t> FrameLayout::slot_at(std::uint64_t offset) const {
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (offset >= slots[i].offset && offset < slots[i].end())
      return i;
  return std::nullopt;
}

std::optional<std::size_t> FrameLayout::resolve(std::string_view name) const {
  if (name == "return")
    return saved_return();
  if (name == "anchor" || name == "C0")
    return anchor();
  if (name.starts_with("canary:"))
    return canary_after(name.substr(7));
  if (name.size() > 1 && name[0] == 'C') {
    std::size_t index = 0;
    auto [ptr, ec] =
        std::from_chars(name.data() + 1, name.data() + name.size(), index);
    if (ec == std::errc() && ptr == name.data() + name.size())
      return find_canary(index);
  }
  return find_local(name);
}

pa::Modifier compute_modifier(std::uint64_t sp, std::uint16_t function_id) {
  return pa::Modifier{((sp & pa::kAddressMask) << 16) + function_id};
}

bool select_protected(const FunctionDef &fn, const ProtectionMode &mode) {
  switch (mode.scheme) {
  case Scheme::None:
    return false;
  case Scheme::StackGuard:
  case Scheme::Terminator:
    return std::any_of(fn.locals.begin(), fn.locals.end(),
                       [&](const LocalVar &v) {
                         return v.is_array() && v.size_bytes > mode.threshold;
                       });
  case Scheme::StrongHeuristic:
    return std::any_of(fn.locals.begin(), fn.locals.end(),
                       [](const LocalVar &v) {
                         return v.address_taken || v.is_array() ||
                                v.register_local;
                       });
  case Scheme::PcanStandalone:
  case Scheme::PcanCombined:
    // Every frame gets at least the C0 anchor.
    return true;
  }
  return false;
}

FrameLayout layout_frame(const FunctionDef &fn, const ProtectionMode &mode,
                         const LayoutOptions &options) {
  mode.validate();
  const bool selected = select_protected(fn, mode);
  const bool buffer_canaries = selected && is_pcan(mode.scheme);
  const bool anchor =
      selected && (mode.scheme == Scheme::PcanStandalone ||
                   is_single_canary(mode.scheme));

  std::vector<const LocalVar *> order;
  if (options.rearrange) {
    for (const LocalVar &v : fn.locals)
      if (!v.is_array())
        order.push_back(&v);
    for (const LocalVar &v : fn.locals)
      if (v.is_array())
        order.push_back(&v);
  } else {
    for (const LocalVar &v : fn.locals)
      order.push_back(&v);
  }

  FrameLayout layout;
  layout.function = fn.name;
  std::uint64_t cursor = 0;
  std::size_t canary_index = 0;
  auto push = [&](std::uint64_t size, SlotRole role, std::string local = {},
                  std::size_t index = 0) {
    layout.slots.push_back(Slot{cursor, size, role, std::move(local), index});
    cursor += size;
  };

  for (const LocalVar *v : order) {
    if (!v->is_array()) {
      push(kScalarSize, SlotRole::Scalar, v->name);
      continue;
    }
    const std::uint64_t pad = align_up(v->size_bytes, kSlotAlign) - v->size_bytes;
    if (pad != 0)
      push(pad, SlotRole::Padding);
    push(v->size_bytes, SlotRole::Buffer, v->name);
    if (buffer_canaries)
      push(8, SlotRole::Canary, v->name, ++canary_index);
  }
  if (anchor)
    push(8, SlotRole::AnchorC0);
  push(8, SlotRole::SavedReturn);

  layout.frame_size = align_up(cursor, kFrameAlign);
  if (layout.frame_size > options.max_frame_size)
    throw LayoutError("frame of '" + fn.name + "' needs " +
                      std::to_string(layout.frame_size) +
                      " bytes, limit is " +
                      std::to_string(options.max_frame_size));
  return layout;
}

std::string_view to_string(C0Kind kind) {
  switch (kind) {
  case C0Kind::None:
    return "none";
  case C0Kind::PacgaAnchor:
    return "pacga_anchor";
  case C0Kind::SignedReturnAddress:
    return "signed_return_address";
  case C0Kind::ReferenceCopy:
    return "reference_copy";
  case C0Kind::TerminatorConstant:
    return "terminator_constant";
  }
  return "?";
}

CanaryPlan build_plan(const FunctionDef &fn, const FrameLayout &layout,
                      const ProtectionMode &mode) {
  if (layout.function != fn.name)
    throw LayoutError("layout for '" + layout.function +
                      "' does not belong to function '" + fn.name + "'");

  CanaryPlan plan;
  plan.mode = mode;
  plan.function_id = fn.function_id;
  plan.protected_frame = select_protected(fn, mode);

  const std::size_t canaries = static_cast<std::size_t>(std::count_if(
      layout.slots.begin(), layout.slots.end(),
      [](const Slot &s) { return s.role == SlotRole::Canary; }));
  const auto anchor = layout.anchor();
  auto mismatch = [&](const char *what) {
    return LayoutError("layout of '" + fn.name + "' does not match mode " +
                       std::string(to_string(mode.scheme)) + ": " + what);
  };

  if (!plan.protected_frame) {
    if (canaries != 0 || anchor)
      throw mismatch("unprotected frame carries canary slots");
    return plan;
  }

  if (is_pcan(mode.scheme)) {
    if (canaries != fn.buffer_count())
      throw mismatch("expected one canary per buffer");
    if (mode.scheme == Scheme::PcanStandalone) {
      if (!anchor)
        throw mismatch("missing C0 anchor slot");
      plan.c0_kind = C0Kind::PacgaAnchor;
      plan.chain.push_back(*anchor);
    } else {
      if (anchor)
        throw mismatch("combined mode keeps C0 in the saved return slot");
      plan.c0_kind = C0Kind::SignedReturnAddress;
      plan.chain.push_back(layout.saved_return());
    }
    for (std::size_t i = 1; i <= canaries; ++i) {
      auto slot = layout.find_canary(i);
      if (!slot)
        throw mismatch("canary indices are not contiguous");
      plan.chain.push_back(*slot);
    }
    plan.canary_count = canaries;
    return plan;
  }

  if (!anchor || canaries != 0)
    throw mismatch("single-canary scheme expects exactly one frame canary");
  plan.c0_kind = mode.scheme == Scheme::Terminator ? C0Kind::TerminatorConstant
                                                   : C0Kind::ReferenceCopy;
  plan.chain.push_back(*anchor);
  return plan;
}

std::string_view to_string(ActionOp op) {
  switch (op) {
  case ActionOp::StorePacgaAnchor:
    return "store_pacga_anchor";
  case ActionOp::StoreSignedPointer:
    return "store_signed_pointer";
  case ActionOp::StoreSignedReturn:
    return "store_signed_return";
  case ActionOp::StoreReferenceCopy:
    return "store_reference_copy";
  case ActionOp::StoreTerminator:
    return "store_terminator";
  case ActionOp::LoadSlot:
    return "load_slot";
  case ActionOp::Autda:
    return "autda";
  case ActionOp::LoadThroughPointer:
    return "load_through_pointer";
  case ActionOp::Pacga:
    return "pacga";
  case ActionOp::CompareAnchor:
    return "compare_anchor";
  case ActionOp::Autia:
    return "autia";
  case ActionOp::LoadReference:
    return "load_reference";
  case ActionOp::CompareReference:
    return "compare_reference";
  case ActionOp::CompareTerminator:
    return "compare_terminator";
  }
  return "?";
}

bool VmAction::reads_mutable_reference() const {
  return op == ActionOp::StoreReferenceCopy || op == ActionOp::LoadReference;
}

std::vector<VmAction> prologue_recipe(const CanaryPlan &plan) {
  std::vector<VmAction> actions;
  if (!plan.protected_frame)
    return actions;
  const std::size_t c0 = plan.chain.at(0);
  switch (plan.c0_kind) {
  case C0Kind::PacgaAnchor:
    actions.push_back({ActionOp::StorePacgaAnchor, c0});
    break;
  case C0Kind::SignedReturnAddress:
    actions.push_back({ActionOp::StoreSignedReturn, c0});
    break;
  case C0Kind::ReferenceCopy:
    actions.push_back({ActionOp::StoreReferenceCopy, c0});
    return actions;
  case C0Kind::TerminatorConstant:
    actions.push_back({ActionOp::StoreTerminator, c0});
    return actions;
  case C0Kind::None:
    return actions;
  }
  for (std::size_t i = 1; i <= plan.canary_count; ++i)
    actions.push_back(
        {ActionOp::StoreSignedPointer, plan.chain[i], plan.chain[i - 1]});
  return actions;
}

std::vector<VmAction> epilogue_recipe(const CanaryPlan &plan) {
  std::vector<VmAction> actions;
  if (!plan.protected_frame)
    return actions;
  const std::size_t c0 = plan.chain.at(0);
  switch (plan.c0_kind) {
  case C0Kind::ReferenceCopy:
    actions.push_back({ActionOp::LoadSlot, c0});
    actions.push_back({ActionOp::LoadReference, c0});
    actions.push_back({ActionOp::CompareReference, c0});
    return actions;
  case C0Kind::TerminatorConstant:
    actions.push_back({ActionOp::LoadSlot, c0});
    actions.push_back({ActionOp::CompareTerminator, c0});
    return actions;
  case C0Kind::None:
    return actions;
  case C0Kind::PacgaAnchor:
  case C0Kind::SignedReturnAddress:
    break;
  }

  // Walk the chain from C_n down to C_0.
  const std::size_t n = plan.canary_count;
  actions.push_back({ActionOp::LoadSlot, plan.chain[n]});
  for (std::size_t i = n; i >= 1; --i) {
    actions.push_back({ActionOp::Autda, plan.chain[i]});
    actions.push_back(
        {ActionOp::LoadThroughPointer, plan.chain[i - 1], plan.chain[i]});
  }
  if (plan.c0_kind == C0Kind::PacgaAnchor) {
    actions.push_back({ActionOp::Pacga, c0});
    actions.push_back({ActionOp::CompareAnchor, c0});
  } else {
    actions.push_back({ActionOp::Autia, c0});
  }
  return actions;
}

const InstrumentedFunction &
InstrumentedProgram::function(std::string_view name) const {
  auto it = functions.find(std::string(name));
  if (it == functions.end())
    throw InvariantError("unknown function '" + std::string(name) + "'");
  return it->second;
}

InstrumentedProgram instrument_program(const Program &program,
                                       const ProtectionMode &mode,
                                       const LayoutOptions &options) {
  InstrumentedProgram out;
  out.mode = mode;
  out.options = options;
  out.entry = program.entry;
  for (const auto &[name, fn] : program.functions) {
    InstrumentedFunction inst;
    inst.def = fn;
    inst.layout = layout_frame(fn, mode, options);
    inst.plan = build_plan(fn, inst.layout, mode);
    inst.prologue = prologue_recipe(inst.plan);
    inst.epilogue = epilogue_recipe(inst.plan);
    out.functions.emplace(name, std::move(inst));
  }
  return out;
}

} // namespace pcan
