#include "pcan/program.hpp"

#include "pcan/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>

namespace pcan {

using nlohmann::json;

ParseError::ParseError(const std::string &message, std::size_t line,
                       std::size_t column)
    : Error(line == 0 ? message
                      : message + " (line " + std::to_string(line) +
                            ", column " + std::to_string(column) + ")"),
      line_(line), column_(column) {}

const LocalVar *FunctionDef::find_local(std::string_view local) const {
  for (const LocalVar &var : locals)
    if (var.name == local)
      return &var;
  return nullptr;
}

std::size_t FunctionDef::buffer_count() const {
  return static_cast<std::size_t>(
      std::count_if(locals.begin(), locals.end(),
                    [](const LocalVar &v) { return v.is_array(); }));
}

const FunctionDef &Program::function(std::string_view name) const {
  auto it = functions.find(std::string(name));
  if (it == functions.end())
    throw InvariantError("unknown function '" + std::string(name) + "'");
  return it->second;
}

std::uint16_t assign_function_id(std::string_view name) {
  std::uint32_t h = 0x811c9dc5u;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x01000193u;
  }
  return static_cast<std::uint16_t>((h >> 16) ^ (h & 0xffffu));
}

std::string to_hex(const std::vector<std::uint8_t> &bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
  return out;
}

std::vector<std::uint8_t> from_hex(std::string_view hex) {
  auto nibble = [&](char c) -> int {
    if (c >= '0' && c <= '9')
      return c - '0';
    if (c >= 'a' && c <= 'f')
      return c - 'a' + 10;
    if (c >= 'A' && c <= 'F')
      return c - 'A' + 10;
    throw ParseError("invalid hex digit '" + std::string(1, c) + "'");
  };
  if (hex.size() % 2 != 0)
    throw ParseError("hex string has odd length: '" + std::string(hex) + "'");
  std::vector<std::uint8_t> out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2)
    out.push_back(static_cast<std::uint8_t>(nibble(hex[i]) << 4 |
                                            nibble(hex[i + 1])));
  return out;
}

namespace {

bool is_identifier(std::string_view s) {
  if (s.empty())
    return false;
  auto head = [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
  };
  auto tail = [&](char c) { return head(c) || (c >= '0' && c <= '9'); };
  return head(s.front()) && std::all_of(s.begin() + 1, s.end(), tail);
}

void expect_keys(const json &obj, std::string_view where,
                 std::initializer_list<std::string_view> allowed,
                 std::initializer_list<std::string_view> required) {
  if (!obj.is_object())
    throw ParseError(std::string(where) + ": expected an object");
  for (const auto &[key, _] : obj.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ParseError(std::string(where) + ": unknown key '" + key + "'");
  for (std::string_view key : required)
    if (!obj.contains(std::string(key)))
      throw ParseError(std::string(where) + ": missing key '" +
                       std::string(key) + "'");
}

std::string get_string(const json &obj, const char *key,
                       const std::string &where) {
  const json &v = obj.at(key);
  if (!v.is_string())
    throw ParseError(where + ": '" + key + "' must be a string");
  return v.get<std::string>();
}

std::uint64_t get_uint(const json &obj, const char *key,
                       const std::string &where) {
  const json &v = obj.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    throw ParseError(where + ": '" + key +
                     "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

bool get_bool(const json &obj, const char *key, const std::string &where) {
  if (!obj.contains(key))
    return false;
  const json &v = obj.at(key);
  if (!v.is_boolean())
    throw ParseError(where + ": '" + key + "' must be a boolean");
  return v.get<bool>();
}

LocalVar parse_local(const json &j, const std::string &where) {
  expect_keys(j, where,
              {"name", "kind", "size", "address_taken", "register_local"},
              {"name", "kind", "size"});
  LocalVar var;
  var.name = get_string(j, "name", where);
  if (!is_identifier(var.name))
    throw ParseError(where + ": invalid local name '" + var.name + "'");
  const std::string local_where = where + " '" + var.name + "'";

  const std::string kind = get_string(j, "kind", local_where);
  if (kind == "buffer")
    var.kind = LocalKind::Buffer;
  else if (kind == "scalar")
    var.kind = LocalKind::Scalar;
  else
    throw ParseError(local_where + ": unknown kind '" + kind + "'");

  const json &size = j.at("size");
  if (size.is_string() && size.get<std::string>() == "dynamic")
    throw DynamicAllocationError(
        local_where + ": variable-size stack allocations are not supported");
  if (!size.is_number_integer())
    throw ParseError(local_where + ": 'size' must be an integer");
  if (size.is_number_unsigned() &&
      size.get<std::uint64_t>() > kMaxLocalSize)
    throw ParseError(local_where + ": size overflow (max " +
                     std::to_string(kMaxLocalSize) + " bytes)");
  if (size.get<std::int64_t>() < 1)
    throw ParseError(local_where + ": size must be at least 1");
  var.size_bytes = size.get<std::uint64_t>();
  if (var.kind == LocalKind::Scalar && var.size_bytes != kScalarSize)
    throw ParseError(local_where + ": scalars are 8 bytes");

  var.address_taken = get_bool(j, "address_taken", local_where);
  var.register_local = get_bool(j, "register_local", local_where);
  return var;
}

BodyOp parse_op(const json &j, const FunctionDef &fn,
                const std::string &where) {
  if (!j.is_object() || !j.contains("op") || !j.at("op").is_string())
    throw ParseError(where + ": expected an object with a string 'op'");
  const std::string op = j.at("op").get<std::string>();
  if (op == "write") {
    expect_keys(j, where, {"op", "target", "offset", "bytes"},
                {"target", "offset", "bytes"});
    WriteOp w;
    w.target = get_string(j, "target", where);
    if (!fn.find_local(w.target))
      throw ParseError(where + ": write to undeclared local '" + w.target +
                       "'");
    w.offset = get_uint(j, "offset", where);
    w.bytes = from_hex(get_string(j, "bytes", where));
    if (w.bytes.empty())
      throw ParseError(where + ": write must carry at least one byte");
    if (w.offset > kMaxLocalSize * 16)
      throw ParseError(where + ": write offset overflow");
    return w;
  }
  if (op == "call") {
    expect_keys(j, where, {"op", "target"}, {"target"});
    return CallOp{get_string(j, "target", where)};
  }
  if (op == "return") {
    expect_keys(j, where, {"op"}, {});
    return ReturnOp{};
  }
  throw ParseError(where + ": unknown op '" + op + "'");
}

FunctionDef parse_function(const json &j, std::size_t index) {
  const std::string where = "functions[" + std::to_string(index) + "]";
  expect_keys(j, where, {"name", "function_id", "locals", "body"},
              {"name", "locals", "body"});
  FunctionDef fn;
  fn.name = get_string(j, "name", where);
  if (!is_identifier(fn.name))
    throw ParseError(where + ": invalid function name '" + fn.name + "'");
  const std::string fn_where = "function '" + fn.name + "'";

  if (j.contains("function_id")) {
    const std::uint64_t id = get_uint(j, "function_id", fn_where);
    if (id > 0xffff)
      throw ParseError(fn_where + ": function_id must fit in 16 bits");
    fn.function_id = static_cast<std::uint16_t>(id);
  } else {
    fn.function_id = assign_function_id(fn.name);
  }

  const json &locals = j.at("locals");
  if (!locals.is_array())
    throw ParseError(fn_where + ": 'locals' must be an array");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < locals.size(); ++i) {
    LocalVar var = parse_local(
        locals[i], fn_where + " locals[" + std::to_string(i) + "]");
    if (!seen.insert(var.name).second)
      throw ParseError(fn_where + ": duplicate local name '" + var.name +
                       "'");
    fn.locals.push_back(std::move(var));
  }

  const json &body = j.at("body");
  if (!body.is_array())
    throw ParseError(fn_where + ": 'body' must be an array");
  for (std::size_t i = 0; i < body.size(); ++i) {
    const std::string op_where =
        fn_where + " body[" + std::to_string(i) + "]";
    if (!fn.body.empty() && std::holds_alternative<ReturnOp>(fn.body.back()))
      throw ParseError(op_where + ": unreachable op after return");
    fn.body.push_back(parse_op(body[i], fn, op_where));
  }
  return fn;
}

std::pair<std::size_t, std::size_t> line_column(std::string_view text,
                                                std::size_t byte) {
  std::size_t line = 1;
  std::size_t column = 1;
  const std::size_t end = std::min(byte == 0 ? 0 : byte - 1, text.size());
  for (std::size_t i = 0; i < end; ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return {line, column};
}

} // namespace

Program parse_program(std::string_view text) {
  json root;
  try {
    root = json::parse(text.begin(), text.end());
  } catch (const json::parse_error &e) {
    auto [line, column] = line_column(text, e.byte);
    throw ParseError("syntax error: " + std::string(e.what()), line, column);
  }

  expect_keys(root, "program", {"entry", "functions"},
              {"entry", "functions"});
  Program program;
  program.entry = get_string(root, "entry", "program");

  const json &functions = root.at("functions");
  if (!functions.is_array())
    throw ParseError("program: 'functions' must be an array");
  for (std::size_t i = 0; i < functions.size(); ++i) {
    FunctionDef fn = parse_function(functions[i], i);
    const std::string name = fn.name;
    if (!program.functions.emplace(name, std::move(fn)).second)
      throw ParseError("duplicate function name '" + name + "'");
  }

  if (!program.functions.count(program.entry))
    throw ParseError("entry function '" + program.entry + "' is not defined");
  for (const auto &[name, fn] : program.functions)
    for (const BodyOp &op : fn.body)
      if (const auto *call = std::get_if<CallOp>(&op))
        if (!program.functions.count(call->target))
          throw ParseError("function '" + name +
                           "': unresolved call target '" + call->target + "'");
  return program;
}

Program load_program(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read program file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_program(ss.str());
}

std::string serialize_program(const Program &program) {
  json functions = json::array();
  for (const auto &[name, fn] : program.functions) {
    json locals = json::array();
    for (const LocalVar &var : fn.locals) {
      json l = {{"name", var.name},
                {"kind", var.kind == LocalKind::Buffer ? "buffer" : "scalar"},
                {"size", var.size_bytes}};
      if (var.address_taken)
        l["address_taken"] = true;
      if (var.register_local)
        l["register_local"] = true;
      locals.push_back(std::move(l));
    }
    json body = json::array();
    for (const BodyOp &op : fn.body) {
      if (const auto *w = std::get_if<WriteOp>(&op))
        body.push_back({{"op", "write"},
                        {"target", w->target},
                        {"offset", w->offset},
                        {"bytes", to_hex(w->bytes)}});
      else if (const auto *c = std::get_if<CallOp>(&op))
        body.push_back({{"op", "call"}, {"target", c->target}});
      else
        body.push_back({{"op", "return"}});
    }
    functions.push_back({{"name", name},
                         {"function_id", fn.function_id},
                         {"locals", std::move(locals)},
                         {"body", std::move(body)}});
  }
  json root = {{"entry", program.entry}, {"functions", std::move(functions)}};
  return root.dump(2) + "\n";
}

} // namespace pcan
