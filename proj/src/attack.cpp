#include "pcan/attack.hpp"

#include "pcan/campaign.hpp"
#include "pcan/error.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace pcan {

using nlohmann::json;

std::string_view to_string(GuessStrategy strategy) {
  return strategy == GuessStrategy::Random ? "random" : "byte_by_byte";
}

std::string_view to_string(RestartModel model) {
  return model == RestartModel::Fork ? "fork" : "rekey";
}

GuessStrategy parse_strategy(std::string_view name) {
  if (name == "random")
    return GuessStrategy::Random;
  if (name == "byte_by_byte")
    return GuessStrategy::ByteByByte;
  throw ConfigError("unknown guess strategy '" + std::string(name) + "'");
}

RestartModel parse_restart(std::string_view name) {
  if (name == "fork")
    return RestartModel::Fork;
  if (name == "rekey")
    return RestartModel::Rekey;
  throw ConfigError("unknown restart model '" + std::string(name) + "'");
}

std::string_view to_string(Outcome outcome) {
  switch (outcome) {
  case Outcome::Clean:
    return "clean";
  case Outcome::UndetectedCorruption:
    return "undetected_corruption";
  case Outcome::Bypassed:
    return "bypassed";
  case Outcome::Detected:
    return "detected";
  case Outcome::Crashed:
    return "crashed";
  case Outcome::NotApplicable:
    return "not_applicable";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Script parsing

namespace {

void check_keys(const json &obj, const std::string &where,
                std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object())
    throw ParseError(where + ": expected an object");
  for (const auto &[key, _] : obj.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ParseError(where + ": unknown key '" + key + "'");
}

const json &require(const json &obj, const char *key,
                    const std::string &where) {
  if (!obj.contains(key))
    throw ParseError(where + ": missing key '" + key + "'");
  return obj.at(key);
}

std::string req_string(const json &obj, const char *key,
                       const std::string &where) {
  const json &v = require(obj, key, where);
  if (!v.is_string())
    throw ParseError(where + ": '" + key + "' must be a string");
  return v.get<std::string>();
}

std::uint64_t opt_uint(const json &obj, const char *key,
                       const std::string &where, std::uint64_t fallback) {
  if (!obj.contains(key))
    return fallback;
  const json &v = obj.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    throw ParseError(where + ": '" + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

std::vector<std::uint8_t> opt_hex(const json &obj, const char *key,
                                  const std::string &where) {
  if (!obj.contains(key))
    return {};
  const json &v = obj.at(key);
  if (!v.is_string())
    throw ParseError(where + ": '" + key + "' must be a hex string");
  return from_hex(v.get<std::string>());
}

std::uint8_t opt_fill(const json &obj, const std::string &where) {
  if (!obj.contains("fill"))
    return 0x41;
  auto bytes = opt_hex(obj, "fill", where);
  if (bytes.size() != 1)
    throw ParseError(where + ": 'fill' must be exactly one byte");
  return bytes[0];
}

FramePoint parse_point(const json &obj, const std::string &where) {
  FramePoint p;
  p.function = req_string(obj, "function", where);
  p.instance = opt_uint(obj, "instance", where, 0);
  p.at = static_cast<std::size_t>(opt_uint(obj, "at", where, 0));
  return p;
}

std::vector<std::uint8_t> parse_payload(const json &obj,
                                        const std::string &where) {
  auto payload = opt_hex(obj, "payload", where);
  if (payload.empty())
    throw ParseError(where + ": 'payload' must carry at least one byte");
  const std::uint64_t repeat = opt_uint(obj, "repeat", where, 1);
  if (repeat == 0 || repeat * payload.size() > kMaxLocalSize)
    throw ParseError(where + ": 'repeat' out of range");
  std::vector<std::uint8_t> out;
  out.reserve(payload.size() * repeat);
  for (std::uint64_t i = 0; i < repeat; ++i)
    out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

AttackAction parse_action(const json &j, std::size_t index) {
  const std::string where = "actions[" + std::to_string(index) + "]";
  const std::string kind = req_string(j, "action", where);

  if (kind == "overflow" || kind == "string_overflow") {
    check_keys(j, where,
               {"action", "function", "instance", "at", "buffer", "payload",
                "repeat"});
    FramePoint p = parse_point(j, where);
    std::string buffer = req_string(j, "buffer", where);
    auto payload = parse_payload(j, where);
    if (kind == "overflow")
      return OverflowAction{p, buffer, payload};
    if (std::find(payload.begin(), payload.end(), 0) != payload.end())
      throw ParseError(where + ": string payloads cannot contain zero bytes");
    return StringOverflowAction{p, buffer, payload};
  }
  if (kind == "over_read") {
    check_keys(j, where,
               {"action", "function", "instance", "at", "buffer", "slot",
                "offset", "length"});
    OverReadAction a;
    a.where = parse_point(j, where);
    a.buffer = req_string(j, "buffer", where);
    if (j.contains("slot")) {
      a.slot = req_string(j, "slot", where);
    } else {
      a.offset = opt_uint(j, "offset", where, 0);
      a.length = opt_uint(j, "length", where, 0);
      if (a.length == 0)
        throw ParseError(where + ": over_read needs 'slot' or a 'length'");
    }
    return a;
  }
  if (kind == "harvest_and_replay") {
    check_keys(j, where,
               {"action", "function", "instance", "at", "buffer", "through",
                "length", "fill", "string", "patches"});
    HarvestReplayAction a;
    a.where = parse_point(j, where);
    a.buffer = req_string(j, "buffer", where);
    if (j.contains("through"))
      a.through = req_string(j, "through", where);
    if (j.contains("length"))
      a.length = opt_uint(j, "length", where, 0);
    if (a.through.has_value() == a.length.has_value())
      throw ParseError(where + ": give exactly one of 'through' and 'length'");
    a.fill = opt_fill(j, where);
    if (j.contains("string")) {
      if (!j.at("string").is_boolean())
        throw ParseError(where + ": 'string' must be a boolean");
      a.string = j.at("string").get<bool>();
    }
    if (j.contains("patches")) {
      const json &patches = j.at("patches");
      if (!patches.is_array())
        throw ParseError(where + ": 'patches' must be an array");
      for (std::size_t i = 0; i < patches.size(); ++i) {
        const std::string pw = where + ".patches[" + std::to_string(i) + "]";
        check_keys(patches[i], pw, {"slot", "bytes"});
        Patch patch{req_string(patches[i], "slot", pw),
                    opt_hex(patches[i], "bytes", pw)};
        if (patch.bytes.empty())
          throw ParseError(pw + ": 'bytes' must not be empty");
        a.patches.push_back(std::move(patch));
      }
    }
    return a;
  }
  if (kind == "substitute_canary") {
    check_keys(j, where,
               {"action", "donor", "victim", "buffer", "through", "fill",
                "extra"});
    SubstituteCanaryAction a;
    const json &donor = require(j, "donor", where);
    const json &victim = require(j, "victim", where);
    check_keys(donor, where + ".donor", {"function", "instance", "at"});
    check_keys(victim, where + ".victim", {"function", "instance", "at"});
    a.donor = parse_point(donor, where + ".donor");
    a.victim = parse_point(victim, where + ".victim");
    a.buffer = req_string(j, "buffer", where);
    if (j.contains("through"))
      a.through = req_string(j, "through", where);
    a.fill = opt_fill(j, where);
    a.extra = opt_hex(j, "extra", where);
    return a;
  }
  if (kind == "brute_force") {
    check_keys(j, where,
               {"action", "function", "instance", "at", "buffer", "slot",
                "strategy", "restart", "budget"});
    BruteForceAction a;
    a.where = parse_point(j, where);
    a.buffer = req_string(j, "buffer", where);
    if (j.contains("slot"))
      a.slot = req_string(j, "slot", where);
    try {
      if (j.contains("strategy"))
        a.strategy = parse_strategy(req_string(j, "strategy", where));
      if (j.contains("restart"))
        a.restart = parse_restart(req_string(j, "restart", where));
    } catch (const ConfigError &e) {
      throw ParseError(where + ": " + e.what());
    }
    a.budget = opt_uint(j, "budget", where, a.budget);
    if (a.budget == 0)
      throw ParseError(where + ": 'budget' must be positive");
    return a;
  }
  throw ParseError(where + ": unknown action '" + kind + "'");
}

json point_json(const FramePoint &p) {
  return {{"function", p.function}, {"instance", p.instance}, {"at", p.at}};
}

json located(const char *kind, const FramePoint &p) {
  json j = point_json(p);
  j["action"] = kind;
  return j;
}

std::string byte_hex(std::uint8_t b) { return to_hex({b}); }

} // namespace

AttackScript parse_script(std::string_view text) {
  json root;
  try {
    root = json::parse(text.begin(), text.end());
  } catch (const json::parse_error &e) {
    throw ParseError(std::string("scenario syntax error: ") + e.what());
  }
  if (!root.is_array())
    throw ParseError("scenario: expected a JSON list of actions");
  AttackScript script;
  for (std::size_t i = 0; i < root.size(); ++i)
    script.actions.push_back(parse_action(root[i], i));
  return script;
}

AttackScript load_script(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read scenario file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_script(ss.str());
}

json to_json(const AttackScript &script) {
  json out = json::array();
  for (const AttackAction &action : script.actions) {
    if (const auto *a = std::get_if<OverflowAction>(&action)) {
      json j = located("overflow", a->where);
      j["buffer"] = a->buffer;
      j["payload"] = to_hex(a->payload);
      out.push_back(std::move(j));
    } else if (const auto *a = std::get_if<StringOverflowAction>(&action)) {
      json j = located("string_overflow", a->where);
      j["buffer"] = a->buffer;
      j["payload"] = to_hex(a->payload);
      out.push_back(std::move(j));
    } else if (const auto *a = std::get_if<OverReadAction>(&action)) {
      json j = located("over_read", a->where);
      j["buffer"] = a->buffer;
      if (a->slot) {
        j["slot"] = *a->slot;
      } else {
        j["offset"] = a->offset;
        j["length"] = a->length;
      }
      out.push_back(std::move(j));
    } else if (const auto *a = std::get_if<HarvestReplayAction>(&action)) {
      json j = located("harvest_and_replay", a->where);
      j["buffer"] = a->buffer;
      if (a->through)
        j["through"] = *a->through;
      if (a->length)
        j["length"] = *a->length;
      j["fill"] = byte_hex(a->fill);
      if (a->string)
        j["string"] = true;
      if (!a->patches.empty()) {
        json patches = json::array();
        for (const Patch &p : a->patches)
          patches.push_back({{"slot", p.slot}, {"bytes", to_hex(p.bytes)}});
        j["patches"] = std::move(patches);
      }
      out.push_back(std::move(j));
    } else if (const auto *a = std::get_if<SubstituteCanaryAction>(&action)) {
      json j = {{"action", "substitute_canary"},
                {"donor", point_json(a->donor)},
                {"victim", point_json(a->victim)},
                {"buffer", a->buffer},
                {"through", a->through},
                {"fill", byte_hex(a->fill)}};
      if (!a->extra.empty())
        j["extra"] = to_hex(a->extra);
      out.push_back(std::move(j));
    } else if (const auto *a = std::get_if<BruteForceAction>(&action)) {
      json j = located("brute_force", a->where);
      j["buffer"] = a->buffer;
      if (a->slot)
        j["slot"] = *a->slot;
      j["strategy"] = to_string(a->strategy);
      j["restart"] = to_string(a->restart);
      j["budget"] = a->budget;
      out.push_back(std::move(j));
    }
  }
  return out;
}

json to_json(const AttackResult &result) {
  json transcript = json::array();
  for (const TranscriptEntry &t : result.transcript) {
    json jt = {{"step", t.step},
               {"action", t.action},
               {"function", t.function},
               {"detail", t.detail}};
    if (!t.bytes.empty())
      jt["bytes"] = to_hex(t.bytes);
    transcript.push_back(std::move(jt));
  }
  return {{"outcome", to_string(result.outcome)},
          {"report", to_json(result.report)},
          {"transcript", std::move(transcript)}};
}

Outcome classify(const RunReport &report) {
  if (report.status == RunStatus::Faulted) {
    const Fault &f = report.fault.value();
    if (f.during_verification || f.kind == FaultKind::CanaryMismatch ||
        f.key.has_value())
      return Outcome::Detected;
    return Outcome::Crashed;
  }
  bool canary = false;
  bool corruption = false;
  for (const Event &e : report.events) {
    if (e.kind == "canary_overwrite")
      canary = true;
    else if (e.kind == "local_overwrite" || e.kind == "return_overwrite" ||
             e.kind == "stack_overwrite" || e.kind == "control_flow_hijack")
      corruption = true;
  }
  if (canary)
    return Outcome::Bypassed;
  return corruption ? Outcome::UndetectedCorruption : Outcome::Clean;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

bool is_control(SlotRole role) {
  return role == SlotRole::Canary || role == SlotRole::AnchorC0 ||
         role == SlotRole::SavedReturn;
}

std::string describe(const FramePoint &p) {
  return p.function + "#" + std::to_string(p.instance) + "@" +
         std::to_string(p.at);
}

/// Marker thrown when a slot named by the script does not exist in this
/// mode's layout; the scenario does not apply.
struct NotApplicable {
  std::string reason;
};

class ScriptObserver : public ExecutionObserver {
public:
  ScriptObserver(const InstrumentedProgram &program,
                 const AttackScript &script)
      : program_(program), script_(script) {
    for (std::size_t i = 0; i < script.actions.size(); ++i) {
      const AttackAction &action = script.actions[i];
      if (const auto *s = std::get_if<SubstituteCanaryAction>(&action)) {
        pending_.push_back({i, 0, s->donor});
        pending_.push_back({i, 1, s->victim});
      } else {
        pending_.push_back({i, 0, point_of(action)});
      }
    }
    for (const Pending &p : pending_)
      validate(p);
  }

  void before_op(Machine &machine, const FrameView &view) override {
    for (Pending &p : pending_) {
      if (p.fired || p.point.function != view.frame.function ||
          p.point.instance != view.frame.instance ||
          p.point.at != view.frame.pc)
        continue;
      p.fired = true;
      if (not_applicable_)
        continue;
      try {
        fire(machine, view, p);
      } catch (const NotApplicable &na) {
        not_applicable_ = true;
        transcript_.push_back(
            {machine.step(), "skipped", view.frame.function, na.reason, {}});
      }
    }
  }

  std::vector<TranscriptEntry> take_transcript() {
    return std::move(transcript_);
  }
  bool not_applicable() const { return not_applicable_; }

  void check_fired(const RunReport &report) {
    for (const Pending &p : pending_) {
      if (p.fired)
        continue;
      if (report.status == RunStatus::Exited && !not_applicable_)
        throw ScriptError("action " + std::to_string(p.action) +
                          " never fired: frame " + describe(p.point) +
                          " was never live at that point");
      transcript_.push_back({report.steps, "not_reached", p.point.function,
                             "process ended before " + describe(p.point),
                             {}});
    }
  }

private:
  struct Pending {
    std::size_t action;
    int phase;
    FramePoint point;
    bool fired = false;
  };

  static FramePoint point_of(const AttackAction &action) {
    return std::visit(
        [](const auto &a) -> FramePoint {
          if constexpr (std::is_same_v<std::decay_t<decltype(a)>,
                                       SubstituteCanaryAction>)
            return a.victim;
          else
            return a.where;
        },
        action);
  }

  void validate(const Pending &p) const {
    const std::string where = "action " + std::to_string(p.action);
    auto it = program_.functions.find(p.point.function);
    if (it == program_.functions.end())
      throw ScriptError(where + ": unknown function '" + p.point.function +
                        "'");
    const FunctionDef &def = it->second.def;
    if (p.point.at > def.body.size())
      throw ScriptError(where + ": op index " + std::to_string(p.point.at) +
                        " is past the end of '" + def.name + "'");
    const AttackAction &action = script_.actions[p.action];
    if (std::holds_alternative<BruteForceAction>(action))
      throw ScriptError(where + ": brute_force runs as a campaign, not inside "
                                "a single execution");
    if (p.phase == 0 &&
        std::holds_alternative<SubstituteCanaryAction>(action))
      return;
    const std::string buffer = std::visit(
        [](const auto &a) -> std::string {
          if constexpr (requires { a.buffer; })
            return a.buffer;
          else
            return {};
        },
        action);
    const LocalVar *var = def.find_local(buffer);
    if (!var || !var->is_array())
      throw ScriptError(where + ": '" + buffer + "' is not a buffer of '" +
                        def.name + "'");
  }

  const Slot &buffer_slot(const FrameView &view, const std::string &buffer,
                          std::size_t *index = nullptr) const {
    const auto idx = view.function.layout.find_local(buffer).value();
    if (index)
      *index = idx;
    return view.function.layout.slots[idx];
  }

  std::size_t resolve(const FrameView &view, const std::string &name) const {
    auto idx = view.function.layout.resolve(name);
    if (!idx)
      throw NotApplicable{"slot '" + name + "' does not exist in the " +
                          std::string(to_string(program_.mode.scheme)) +
                          " layout of " + view.function.def.name};
    return *idx;
  }

  std::vector<std::uint8_t> read_slot(Machine &machine, const FrameView &view,
                                      const Slot &slot) {
    const std::uint64_t address = view.frame.sp + slot.offset;
    if (address + slot.size > machine.live_stack_top())
      throw ScriptError("over-read past the live stack");
    auto bytes = machine.over_read(address, slot.size, view.frame.function);
    transcript_.push_back({machine.step(), "over_read", view.frame.function,
                           "slot " + slot.label(), bytes});
    return bytes;
  }

  void write(Machine &machine, const FrameView &view, std::size_t buffer_idx,
             const std::vector<std::uint8_t> &payload, const char *what) {
    const Slot &buf = view.function.layout.slots[buffer_idx];
    machine.overflow_write(view.frame.sp + buf.offset, payload, view.depth,
                           buffer_idx);
    transcript_.push_back({machine.step(), what, view.frame.function,
                           "from " + buf.local + ", " +
                               std::to_string(payload.size()) + " bytes",
                           payload});
  }

  void fire(Machine &machine, const FrameView &view, const Pending &p) {
    const AttackAction &action = script_.actions[p.action];
    if (const auto *a = std::get_if<OverflowAction>(&action)) {
      std::size_t idx = 0;
      buffer_slot(view, a->buffer, &idx);
      write(machine, view, idx, a->payload, "overflow");
    } else if (const auto *a = std::get_if<StringOverflowAction>(&action)) {
      std::size_t idx = 0;
      buffer_slot(view, a->buffer, &idx);
      auto bytes = a->payload;
      bytes.push_back(0);
      write(machine, view, idx, bytes, "string_overflow");
    } else if (const auto *a = std::get_if<OverReadAction>(&action)) {
      fire_over_read(machine, view, *a);
    } else if (const auto *a = std::get_if<HarvestReplayAction>(&action)) {
      fire_harvest(machine, view, *a);
    } else if (const auto *a = std::get_if<SubstituteCanaryAction>(&action)) {
      if (p.phase == 0)
        fire_donor(machine, view, p.action, *a);
      else
        fire_victim(machine, view, p.action, *a);
    }
  }

  void fire_over_read(Machine &machine, const FrameView &view,
                      const OverReadAction &a) {
    const Slot &buf = buffer_slot(view, a.buffer);
    std::uint64_t offset = a.offset;
    std::uint64_t length = a.length;
    if (a.slot) {
      const Slot &target = view.function.layout.slots[resolve(view, *a.slot)];
      if (target.offset < buf.offset)
        throw ScriptError("over-read from '" + a.buffer +
                          "' cannot reach slot '" + *a.slot + "' below it");
      offset = target.offset - buf.offset;
      length = target.size;
    }
    const std::uint64_t address = view.frame.sp + buf.offset + offset;
    if (address + length > machine.live_stack_top())
      throw ScriptError("over-read past the live stack");
    auto bytes = machine.over_read(address, length, view.frame.function);
    transcript_.push_back({machine.step(), "over_read", view.frame.function,
                           "from " + a.buffer + " +" + std::to_string(offset),
                           bytes});
  }

  void fire_harvest(Machine &machine, const FrameView &view,
                    const HarvestReplayAction &a) {
    std::size_t buf_idx = 0;
    const Slot &buf = buffer_slot(view, a.buffer, &buf_idx);
    const auto &slots = view.function.layout.slots;

    std::uint64_t length = a.length.value_or(0);
    if (a.through) {
      const Slot &end = slots[resolve(view, *a.through)];
      if (end.end() <= buf.offset)
        throw ScriptError("slot '" + *a.through + "' lies below buffer '" +
                          a.buffer + "'");
      length = end.end() - buf.offset;
    }
    if (length == 0)
      throw ScriptError("harvest_and_replay needs a non-empty overflow");

    std::vector<std::uint8_t> payload(length, a.fill);
    const std::uint64_t lo = buf.offset;
    const std::uint64_t hi = buf.offset + length;
    for (const Slot &s : slots) {
      if (!is_control(s.role) || s.end() <= lo || s.offset >= hi)
        continue;
      auto bytes = read_slot(machine, view, s);
      for (std::uint64_t i = 0; i < s.size; ++i) {
        const std::uint64_t at = s.offset + i;
        if (at >= lo && at < hi)
          payload[at - lo] = bytes[i];
      }
    }
    for (const Patch &patch : a.patches) {
      const Slot &s = slots[resolve(view, patch.slot)];
      if (s.offset < lo || s.offset + patch.bytes.size() > hi)
        throw ScriptError("patch for '" + patch.slot +
                          "' lies outside the overflow range");
      std::copy(patch.bytes.begin(), patch.bytes.end(),
                payload.begin() + static_cast<std::ptrdiff_t>(s.offset - lo));
    }
    if (a.string) {
      // strcpy stops at the first NUL, so only the final byte may be zero.
      for (std::size_t i = 0; i + 1 < payload.size(); ++i)
        if (payload[i] == 0)
          payload[i] = a.fill;
      payload.back() = 0;
    }
    write(machine, view, buf_idx, payload,
          a.string ? "string_replay" : "replay");
  }

  /// Control slots of `fn` in [buffer start, end of `through`).
  std::vector<const Slot *> victim_range(const InstrumentedFunction &fn,
                                         const SubstituteCanaryAction &a,
                                         std::uint64_t *lo,
                                         std::uint64_t *hi) const {
    const auto &layout = fn.layout;
    const Slot &buf = layout.slots[layout.find_local(a.buffer).value()];
    auto end_idx = layout.resolve(a.through);
    if (!end_idx)
      throw NotApplicable{"slot '" + a.through + "' does not exist in the " +
                          std::string(to_string(program_.mode.scheme)) +
                          " layout of " + fn.def.name};
    const Slot &end = layout.slots[*end_idx];
    if (end.end() <= buf.offset)
      throw ScriptError("slot '" + a.through + "' lies below buffer '" +
                        a.buffer + "'");
    *lo = buf.offset;
    *hi = end.end();
    std::vector<const Slot *> out;
    for (const Slot &s : layout.slots)
      if (is_control(s.role) && s.offset >= *lo && s.end() <= *hi)
        out.push_back(&s);
    return out;
  }

  void fire_donor(Machine &machine, const FrameView &view, std::size_t action,
                  const SubstituteCanaryAction &a) {
    const InstrumentedFunction &victim_fn =
        program_.function(a.victim.function);
    std::uint64_t lo = 0;
    std::uint64_t hi = 0;
    auto range = victim_range(victim_fn, a, &lo, &hi);
    auto &store = harvested_[action];
    for (const Slot *s : range) {
      auto donor_idx = view.function.layout.resolve(s->label());
      if (!donor_idx)
        throw NotApplicable{"donor frame " + view.function.def.name +
                            " has no slot " + s->label()};
      store[s->label()] =
          read_slot(machine, view, view.function.layout.slots[*donor_idx]);
    }
    if (range.empty())
      throw NotApplicable{"no canary in the substitution range"};
  }

  void fire_victim(Machine &machine, const FrameView &view, std::size_t action,
                   const SubstituteCanaryAction &a) {
    auto it = harvested_.find(action);
    if (it == harvested_.end())
      throw ScriptError("action " + std::to_string(action) +
                        ": victim frame reached before the donor frame was "
                        "harvested");
    std::uint64_t lo = 0;
    std::uint64_t hi = 0;
    auto range = victim_range(view.function, a, &lo, &hi);
    std::vector<std::uint8_t> payload(hi - lo, a.fill);
    for (const Slot *s : range) {
      const auto &bytes = it->second.at(s->label());
      std::copy(bytes.begin(), bytes.end(),
                payload.begin() + static_cast<std::ptrdiff_t>(s->offset - lo));
    }
    payload.insert(payload.end(), a.extra.begin(), a.extra.end());
    write(machine, view, view.function.layout.find_local(a.buffer).value(),
          payload, "substitute");
  }

  const InstrumentedProgram &program_;
  const AttackScript &script_;
  std::vector<Pending> pending_;
  std::vector<TranscriptEntry> transcript_;
  std::map<std::size_t, std::map<std::string, std::vector<std::uint8_t>>>
      harvested_;
  bool not_applicable_ = false;
};

} // namespace

AttackResult execute_on(const InstrumentedProgram &program, VmState state,
                        const AttackScript &script, std::uint64_t seed) {
  ScriptObserver observer(program, script);
  Machine machine(program, std::move(state), seed);
  AttackResult result;
  result.report = machine.run(&observer);
  observer.check_fired(result.report);
  result.transcript = observer.take_transcript();
  result.outcome = observer.not_applicable() ? Outcome::NotApplicable
                                             : classify(result.report);
  return result;
}

AttackResult execute_script(const Program &program, const ProtectionMode &mode,
                            const AttackScript &script, std::uint64_t seed,
                            const VmConfig &config) {
  const bool brute = std::any_of(
      script.actions.begin(), script.actions.end(), [](const AttackAction &a) {
        return std::holds_alternative<BruteForceAction>(a);
      });
  if (brute) {
    if (script.actions.size() != 1)
      throw ScriptError("a brute_force action must be the only action in its "
                        "script");
    return run_brute_force(program, mode,
                           std::get<BruteForceAction>(script.actions[0]), seed,
                           config);
  }
  const InstrumentedProgram inst =
      instrument_program(program, mode, config.layout);
  return execute_on(inst, make_state(seed, config), script, seed);
}

std::vector<SweepRow> linear_overflow_sweep(const Program &program,
                                            const ProtectionMode &mode,
                                            std::uint64_t max_length,
                                            std::uint64_t seed,
                                            const VmConfig &config) {
  const InstrumentedProgram inst =
      instrument_program(program, mode, config.layout);
  const VmState base = make_state(seed, config);
  const RunReport benign = Machine(inst, base, seed).run();

  std::vector<SweepRow> rows;
  for (const auto &[name, fn] : inst.functions) {
    auto calls = benign.per_function.find(name);
    if (calls == benign.per_function.end() || calls->second.invocations == 0)
      continue;
    std::size_t at = fn.def.body.size();
    for (std::size_t i = 0; i < fn.def.body.size(); ++i)
      if (std::holds_alternative<ReturnOp>(fn.def.body[i])) {
        at = i;
        break;
      }
    for (const LocalVar &var : fn.def.locals) {
      if (!var.is_array())
        continue;
      for (std::uint64_t len = 1; len <= max_length; ++len) {
        AttackScript script;
        script.actions.push_back(OverflowAction{
            FramePoint{name, 0, at}, var.name,
            std::vector<std::uint8_t>(var.size_bytes + len, 0x41)});
        AttackResult r = execute_on(inst, base, script, seed);
        SweepRow row{name, var.name, len, r.outcome, false};
        row.caught_before_return = r.report.status == RunStatus::Faulted &&
                                   r.report.fault->function == name;
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

} // namespace pcan
