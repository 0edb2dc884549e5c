#include "pcan/vm.hpp"

#include "pcan/error.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <random>

namespace pcan {

using nlohmann::json;

namespace {

constexpr std::size_t kNoSlot = std::numeric_limits<std::size_t>::max();

std::string hex64(std::uint64_t value) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%016llx",
                static_cast<unsigned long long>(value));
  return buf;
}

GuestFault translation_fault(std::uint64_t address) {
  Fault f;
  f.kind = FaultKind::TranslationFault;
  f.address = address;
  f.key = pa::corruption_key(pa::Pointer{address});
  return GuestFault{f};
}

GuestFault invalid_access(std::uint64_t address) {
  Fault f;
  f.kind = FaultKind::InvalidAccess;
  f.address = address;
  return GuestFault{f};
}

std::uint64_t draw_reference(std::uint64_t seed) {
  // The first ten outputs of this stream are the PA keys.
  std::mt19937_64 rng(seed);
  rng.discard(10);
  return rng();
}

bool signs_return(const CanaryPlan &plan) {
  return plan.protected_frame && plan.c0_kind == C0Kind::SignedReturnAddress;
}

} // namespace

void VmConfig::validate() const {
  if (stack_top % 16 != 0 || stack_top > pa::kAddressMask)
    throw ConfigError("stack top must be a 16-byte aligned 48-bit address");
  if (stack_size < 4096 || stack_size > stack_top)
    throw ConfigError("stack size must be in [4096, stack top]");
  if (startup_area % 16 != 0 || startup_area >= stack_size)
    throw ConfigError("startup area must be 16-byte aligned and fit the stack");
  pa::PacKeySet probe;
  probe.pac_width = pac_width;
  probe.validate();
}

void Memory::map(std::uint64_t base, std::uint64_t size) {
  regions_.push_back(Region{base, size});
}

bool Memory::is_mapped(std::uint64_t address) const {
  return std::any_of(regions_.begin(), regions_.end(), [&](const Region &r) {
    return address >= r.base && address - r.base < r.size;
  });
}

void Memory::write(std::uint64_t address, std::uint8_t value) {
  Page &page = pages_[address / kPageSize];
  const std::size_t offset = address % kPageSize;
  page.data[offset] = value;
  page.written.set(offset);
}

std::optional<std::uint8_t> Memory::read(std::uint64_t address) const {
  auto it = pages_.find(address / kPageSize);
  if (it == pages_.end())
    return std::nullopt;
  const std::size_t offset = address % kPageSize;
  if (!it->second.written.test(offset))
    return std::nullopt;
  return it->second.data[offset];
}

std::string_view to_string(FaultKind kind) {
  switch (kind) {
  case FaultKind::TranslationFault:
    return "translation_fault";
  case FaultKind::CanaryMismatch:
    return "canary_mismatch";
  case FaultKind::StackOverflow:
    return "stack_overflow";
  case FaultKind::InvalidAccess:
    return "invalid_access";
  }
  return "?";
}

std::string_view to_string(RunStatus status) {
  switch (status) {
  case RunStatus::Running:
    return "running";
  case RunStatus::Exited:
    return "exited";
  case RunStatus::Faulted:
    return "faulted";
  }
  return "?";
}

OpCounts &OpCounts::operator+=(const OpCounts &other) {
  pac_ops += other.pac_ops;
  loads += other.loads;
  stores += other.stores;
  compares += other.compares;
  return *this;
}

VmState make_state(std::uint64_t seed, const VmConfig &config) {
  config.validate();
  VmState state;
  state.keys = pa::PacKeySet::generate(seed, config.pac_width);
  state.global_reference = draw_reference(seed);
  state.memory.map(config.stack_top - config.stack_size, config.stack_size);
  state.memory.map(kReferenceAddress, Memory::kPageSize);
  state.stack_limit = config.stack_top - config.stack_size;
  state.sp = config.stack_top - config.startup_area;
  state.lr = kExitStub;
  store64(state, kReferenceAddress, state.global_reference);
  return state;
}

VmState fork_snapshot(const VmState &state) {
  if (state.status == RunStatus::Faulted)
    throw Error("cannot fork a faulted process");
  return state;
}

VmState rekey(VmState state, std::uint64_t seed) {
  state.keys = pa::PacKeySet::generate(seed, state.keys.pac_width);
  state.global_reference = draw_reference(seed);
  store64(state, kReferenceAddress, state.global_reference);
  return state;
}

std::uint64_t load64(const VmState &state, std::uint64_t address) {
  if (!pa::Pointer{address}.is_canonical())
    throw translation_fault(address);
  std::uint64_t value = 0;
  for (unsigned i = 0; i < 8; ++i) {
    auto byte = state.memory.read(address + i);
    if (!byte)
      throw invalid_access(address + i);
    value |= static_cast<std::uint64_t>(*byte) << (8 * i);
  }
  return value;
}

void store64(VmState &state, std::uint64_t address, std::uint64_t value) {
  if (!pa::Pointer{address}.is_canonical())
    throw translation_fault(address);
  for (unsigned i = 0; i < 8; ++i)
    if (!state.memory.is_mapped(address + i))
      throw invalid_access(address + i);
  for (unsigned i = 0; i < 8; ++i)
    state.memory.write(address + i, static_cast<std::uint8_t>(value >> (8 * i)));
}

json to_json(const Fault &fault) {
  json j = {{"kind", to_string(fault.kind)}, {"function", fault.function}};
  if (!fault.slot.empty())
    j["slot"] = fault.slot;
  if (fault.address)
    j["address"] = hex64(*fault.address);
  if (fault.key)
    j["key"] = pa::to_string(*fault.key);
  j["during_verification"] = fault.during_verification;
  return j;
}

namespace {

json to_json(const OpCounts &c) {
  return {{"pac_ops", c.pac_ops},
          {"loads", c.loads},
          {"stores", c.stores},
          {"compares", c.compares}};
}

} // namespace

json to_json(const RunReport &report) {
  json events = json::array();
  for (const Event &e : report.events) {
    json je = {{"step", e.step}, {"kind", e.kind}, {"function", e.function}};
    if (e.slot)
      je["slot"] = *e.slot;
    if (e.address)
      je["address"] = hex64(*e.address);
    events.push_back(std::move(je));
  }
  json per_function = json::object();
  for (const auto &[name, fc] : report.per_function)
    per_function[name] = {{"invocations", fc.invocations},
                          {"prologue", to_json(fc.prologue)},
                          {"epilogue", to_json(fc.epilogue)}};
  json j = {{"mode", report.mode},
            {"seed", report.seed},
            {"status", to_string(report.status)},
            {"events", std::move(events)},
            {"counts", to_json(report.counts)},
            {"per_function", std::move(per_function)},
            {"steps", report.steps}};
  if (report.fault)
    j["fault"] = to_json(*report.fault);
  return j;
}

Machine::Machine(const InstrumentedProgram &program, VmState state,
                 std::uint64_t seed)
    : program_(program), state_(std::move(state)), seed_(seed) {
  std::size_t index = 0;
  for (const auto &[name, _] : program_.functions)
    code_index_[name] = index++;
}

std::uint64_t Machine::code_address(const std::string &function,
                                    std::size_t pc) const {
  return kCodeBase + code_index_.at(function) * kCodeStride + 4 * (pc + 1);
}

std::uint64_t Machine::slot_address(const FrameRecord &frame,
                                    const InstrumentedFunction &fn,
                                    std::size_t slot) const {
  return frame.sp + fn.layout.slots.at(slot).offset;
}

std::uint64_t Machine::live_stack_top() const {
  if (state_.call_stack.empty())
    return state_.sp;
  const FrameRecord &outer = state_.call_stack.front();
  return outer.sp + program_.function(outer.function).layout.frame_size;
}

void Machine::log(std::string kind, std::string function,
                  std::optional<std::string> slot,
                  std::optional<std::uint64_t> address) {
  report_.events.push_back(Event{step_, std::move(kind), std::move(function),
                                 std::move(slot), address});
}

void Machine::write_bytes(std::uint64_t address,
                          std::span<const std::uint8_t> bytes,
                          std::size_t owner_depth, std::size_t owner_slot) {
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const std::uint64_t a = address + i;
    if (!pa::Pointer{a}.is_canonical())
      throw translation_fault(a);
    if (!state_.memory.is_mapped(a))
      throw invalid_access(a);
  }

  // Attribute every byte to (frame, slot) and log one event per run of
  // bytes that lands outside the owning slot.
  constexpr std::size_t kOutside = kNoSlot - 1;
  std::size_t last_depth = kNoSlot;
  std::size_t last_slot = kNoSlot;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const std::uint64_t a = address + i;
    state_.memory.write(a, bytes[i]);

    std::size_t depth = kOutside;
    std::size_t slot = kNoSlot;
    for (std::size_t d = 0; d < state_.call_stack.size(); ++d) {
      const FrameRecord &fr = state_.call_stack[d];
      const auto &fn = program_.function(fr.function);
      if (a >= fr.sp && a < fr.sp + fn.layout.frame_size) {
        depth = d;
        slot = fn.layout.slot_at(a - fr.sp).value_or(kNoSlot);
        break;
      }
    }
    if (depth == owner_depth && slot == owner_slot)
      continue;
    if (depth == last_depth && slot == last_slot)
      continue;
    last_depth = depth;
    last_slot = slot;

    if (depth == kOutside) {
      log("stack_overwrite", "", std::nullopt, a);
      continue;
    }
    const FrameRecord &fr = state_.call_stack[depth];
    const auto &fn = program_.function(fr.function);
    if (slot == kNoSlot)
      continue;
    const Slot &s = fn.layout.slots[slot];
    std::string kind;
    switch (s.role) {
    case SlotRole::Padding:
      continue;
    case SlotRole::Scalar:
    case SlotRole::Buffer:
      kind = "local_overwrite";
      break;
    case SlotRole::Canary:
    case SlotRole::AnchorC0:
      kind = "canary_overwrite";
      break;
    case SlotRole::SavedReturn:
      kind = signs_return(fn.plan) ? "canary_overwrite" : "return_overwrite";
      break;
    }
    log(std::move(kind), fr.function, s.label(), a);
  }
}

void Machine::overflow_write(std::uint64_t address,
                             std::span<const std::uint8_t> bytes,
                             std::size_t owner_depth, std::size_t owner_slot) {
  ++step_;
  write_bytes(address, bytes, owner_depth, owner_slot);
}

std::vector<std::uint8_t> Machine::over_read(std::uint64_t address,
                                             std::size_t length,
                                             const std::string &function) {
  ++step_;
  log("over_read", function, std::nullopt, address);
  std::vector<std::uint8_t> out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    auto byte = state_.memory.read(address + i);
    if (!byte)
      throw invalid_access(address + i);
    out.push_back(*byte);
  }
  return out;
}

void Machine::run_prologue(const InstrumentedFunction &fn,
                           const FrameRecord &frame, FunctionCounts &counts) {
  const std::uint64_t sp = frame.sp;
  const pa::Modifier mod = compute_modifier(sp, fn.def.function_id);
  const auto &slots = fn.layout.slots;
  for (const VmAction &action : fn.prologue) {
    ++step_;
    const std::uint64_t target = sp + slots.at(action.slot).offset;
    std::uint64_t value = 0;
    switch (action.op) {
    case ActionOp::StorePacgaAnchor:
      value = pa::pacga(sp, mod, state_.keys);
      ++counts.prologue.pac_ops;
      break;
    case ActionOp::StoreSignedPointer:
      value = pa::pacda(pa::Pointer{sp + slots.at(action.source).offset}, mod,
                        state_.keys)
                  .value;
      ++counts.prologue.pac_ops;
      break;
    case ActionOp::StoreSignedReturn:
      value = pa::pacia(pa::Pointer{state_.lr},
                        pa::Modifier{sp + fn.layout.frame_size}, state_.keys)
                  .value;
      ++counts.prologue.pac_ops;
      break;
    case ActionOp::StoreReferenceCopy:
      value = load64(state_, kReferenceAddress);
      ++counts.prologue.loads;
      break;
    case ActionOp::StoreTerminator:
      value = kTerminatorCanary;
      break;
    default:
      throw InvariantError("epilogue action in prologue recipe: " +
                           std::string(to_string(action.op)));
    }
    store64(state_, target, value);
    ++counts.prologue.stores;
  }
}

std::uint64_t Machine::run_epilogue(const InstrumentedFunction &fn,
                                    const FrameRecord &frame,
                                    FunctionCounts &counts) {
  const std::uint64_t sp = frame.sp;
  const pa::Modifier mod = compute_modifier(sp, fn.def.function_id);
  const auto &slots = fn.layout.slots;
  std::uint64_t value = 0;
  std::uint64_t regenerated = 0;
  std::uint64_t reference = 0;
  std::uint64_t return_address = 0;
  bool have_return = false;

  auto mismatch = [&](std::size_t slot) {
    Fault f;
    f.kind = FaultKind::CanaryMismatch;
    f.slot = slots.at(slot).label();
    f.address = sp + slots.at(slot).offset;
    return GuestFault{f};
  };

  for (const VmAction &action : fn.epilogue) {
    ++step_;
    try {
      switch (action.op) {
      case ActionOp::LoadSlot:
        value = load64(state_, sp + slots.at(action.slot).offset);
        ++counts.epilogue.loads;
        break;
      case ActionOp::Autda:
        value = pa::autda(pa::Pointer{value}, mod, state_.keys).value;
        ++counts.epilogue.pac_ops;
        break;
      case ActionOp::LoadThroughPointer:
        value = load64(state_, value);
        ++counts.epilogue.loads;
        break;
      case ActionOp::Pacga:
        regenerated = pa::pacga(sp, mod, state_.keys);
        ++counts.epilogue.pac_ops;
        break;
      case ActionOp::CompareAnchor:
        ++counts.epilogue.compares;
        if (value != regenerated)
          throw mismatch(action.slot);
        break;
      case ActionOp::Autia:
        return_address =
            pa::autia(pa::Pointer{value},
                      pa::Modifier{sp + fn.layout.frame_size}, state_.keys)
                .value;
        have_return = true;
        ++counts.epilogue.pac_ops;
        break;
      case ActionOp::LoadReference:
        reference = load64(state_, kReferenceAddress);
        ++counts.epilogue.loads;
        break;
      case ActionOp::CompareReference:
        ++counts.epilogue.compares;
        if (value != reference)
          throw mismatch(action.slot);
        break;
      case ActionOp::CompareTerminator:
        ++counts.epilogue.compares;
        if (value != kTerminatorCanary)
          throw mismatch(action.slot);
        break;
      default:
        throw InvariantError("prologue action in epilogue recipe: " +
                             std::string(to_string(action.op)));
      }
    } catch (GuestFault &gf) {
      gf.fault.during_verification = true;
      if (gf.fault.slot.empty()) {
        // A fault while following C_i's pointer is attributed to C_i.
        const std::size_t blamed = action.op == ActionOp::LoadThroughPointer
                                       ? action.source
                                       : action.slot;
        gf.fault.slot = slots.at(blamed).label();
      }
      throw;
    }
  }

  if (have_return)
    return return_address;
  return load64(state_, sp + slots.at(fn.layout.saved_return()).offset);
}

void Machine::call(const std::string &name, std::uint64_t return_address) {
  const InstrumentedFunction &fn = program_.function(name);
  ++step_;
  log("call", name);

  const std::uint64_t frame_size = fn.layout.frame_size;
  if (state_.sp < frame_size || state_.sp - frame_size < state_.stack_limit) {
    Fault f;
    f.kind = FaultKind::StackOverflow;
    f.function = name;
    f.address = state_.sp - std::min(state_.sp, frame_size);
    throw GuestFault{f};
  }

  state_.lr = return_address;
  state_.sp -= frame_size;
  FrameRecord frame{name, instances_[name]++, state_.sp, return_address, 0};
  state_.call_stack.push_back(frame);

  FunctionCounts &counts = report_.per_function[name];
  ++counts.invocations;
  try {
    if (!signs_return(fn.plan))
      store64(state_, state_.sp + fn.layout.slots[fn.layout.saved_return()].offset,
              state_.lr);
    run_prologue(fn, state_.call_stack.back(), counts);
  } catch (GuestFault &gf) {
    if (gf.fault.function.empty())
      gf.fault.function = name;
    throw;
  }
}

void Machine::do_return() {
  const FrameRecord frame = state_.call_stack.back();
  const InstrumentedFunction &fn = program_.function(frame.function);
  FunctionCounts &counts = report_.per_function[frame.function];

  std::uint64_t target = 0;
  try {
    target = run_epilogue(fn, frame, counts);
  } catch (GuestFault &gf) {
    if (gf.fault.function.empty())
      gf.fault.function = frame.function;
    throw;
  }

  ++step_;
  if (!pa::Pointer{target}.is_canonical()) {
    GuestFault gf = translation_fault(target);
    gf.fault.function = frame.function;
    gf.fault.slot = "return";
    throw gf;
  }
  if (target != frame.return_address)
    log("control_flow_hijack", frame.function, "return", target);
  log("return", frame.function);

  state_.lr = target;
  state_.sp = frame.sp + fn.layout.frame_size;
  state_.call_stack.pop_back();
}

RunReport Machine::run(ExecutionObserver *observer) {
  report_ = RunReport{};
  report_.mode = std::string(to_string(program_.mode.scheme));
  report_.seed = seed_;
  if (state_.status != RunStatus::Running)
    throw Error("machine has already run");

  try {
    call(program_.entry, kExitStub);
    while (!state_.call_stack.empty()) {
      const std::size_t depth = state_.call_stack.size() - 1;
      FrameRecord &frame = state_.call_stack.back();
      const InstrumentedFunction &fn = program_.function(frame.function);
      const auto &body = fn.def.body;

      if (observer) {
        observer->before_op(*this, FrameView{fn, frame, depth});
        // The observer may not push or pop frames.
        if (state_.call_stack.size() != depth + 1)
          throw InvariantError("observer changed the call stack");
      }

      FrameRecord &current = state_.call_stack.back();
      if (current.pc >= body.size() ||
          std::holds_alternative<ReturnOp>(body[current.pc])) {
        do_return();
        continue;
      }
      const BodyOp &op = body[current.pc++];
      if (const auto *w = std::get_if<WriteOp>(&op)) {
        ++step_;
        const std::size_t slot = fn.layout.find_local(w->target).value();
        write_bytes(current.sp + fn.layout.slots[slot].offset + w->offset,
                    w->bytes, depth, slot);
      } else if (const auto *c = std::get_if<CallOp>(&op)) {
        call(c->target, code_address(current.function, current.pc - 1));
      }
    }
    state_.status = RunStatus::Exited;
  } catch (GuestFault &gf) {
    if (gf.fault.function.empty() && !state_.call_stack.empty())
      gf.fault.function = state_.call_stack.back().function;
    state_.status = RunStatus::Faulted;
    state_.fault = gf.fault;
    log(std::string(to_string(gf.fault.kind)), gf.fault.function,
        gf.fault.slot.empty() ? std::nullopt
                              : std::optional<std::string>(gf.fault.slot),
        gf.fault.address);
  }

  report_.status = state_.status;
  report_.fault = state_.fault;
  report_.steps = step_;
  for (const auto &[_, fc] : report_.per_function) {
    report_.counts += fc.prologue;
    report_.counts += fc.epilogue;
  }
  return std::move(report_);
}

RunReport run(const Program &program, const ProtectionMode &mode,
              std::uint64_t seed, const VmConfig &config) {
  const InstrumentedProgram inst =
      instrument_program(program, mode, config.layout);
  Machine machine(inst, make_state(seed, config), seed);
  return machine.run();
}

std::map<std::string, OverheadRow> instruction_counts(const RunReport &report) {
  std::map<std::string, OverheadRow> rows;
  for (const auto &[name, fc] : report.per_function) {
    OverheadRow row;
    row.invocations = fc.invocations;
    if (fc.invocations != 0) {
      auto per_call = [&](const OpCounts &c) {
        return OpCounts{c.pac_ops / fc.invocations, c.loads / fc.invocations,
                        c.stores / fc.invocations,
                        c.compares / fc.invocations};
      };
      row.prologue_per_call = per_call(fc.prologue);
      row.epilogue_per_call = per_call(fc.epilogue);
    }
    rows.emplace(name, row);
  }
  return rows;
}

} // namespace pcan
