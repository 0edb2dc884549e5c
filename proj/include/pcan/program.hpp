#pragma once

// The miniature stack IR. A program is a set of functions with locals
// declared up front and straight-line bodies made of writes, calls and a
// return. Writes are deliberately not bounds-checked.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace pcan {

inline constexpr std::uint64_t kScalarSize = 8;
inline constexpr std::uint64_t kMaxLocalSize = std::uint64_t{1} << 20;

enum class LocalKind { Buffer, Scalar };

struct LocalVar {
  std::string name;
  LocalKind kind = LocalKind::Scalar;
  std::uint64_t size_bytes = kScalarSize;
  bool address_taken = false;
  bool register_local = false;

  bool is_array() const { return kind == LocalKind::Buffer; }

  friend bool operator==(const LocalVar &, const LocalVar &) = default;
};

struct WriteOp {
  std::string target;
  std::uint64_t offset = 0;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const WriteOp &, const WriteOp &) = default;
};

struct CallOp {
  std::string target;

  friend bool operator==(const CallOp &, const CallOp &) = default;
};

struct ReturnOp {
  friend bool operator==(const ReturnOp &, const ReturnOp &) = default;
};

using BodyOp = std::variant<WriteOp, CallOp, ReturnOp>;

struct FunctionDef {
  std::string name;
  std::uint16_t function_id = 0;
  std::vector<LocalVar> locals;
  std::vector<BodyOp> body;

  const LocalVar *find_local(std::string_view local) const;
  std::size_t buffer_count() const;

  friend bool operator==(const FunctionDef &, const FunctionDef &) = default;
};

struct Program {
  std::map<std::string, FunctionDef> functions;
  std::string entry;

  /// Throws InvariantError for unknown names; parse_program guarantees
  /// every call target resolves.
  const FunctionDef &function(std::string_view name) const;

  friend bool operator==(const Program &, const Program &) = default;
};

/// Low 16 bits of a folded 32-bit FNV-1a hash of the name:
/// h = fnv1a32(name); id = (h >> 16) ^ (h & 0xffff).
std::uint16_t assign_function_id(std::string_view name);

/// Parses the JSON program format. Unknown keys are rejected.
Program parse_program(std::string_view text);
Program load_program(const std::filesystem::path &path);

/// Canonical JSON form; function ids are always written out explicitly.
std::string serialize_program(const Program &program);

std::string to_hex(const std::vector<std::uint8_t> &bytes);
std::vector<std::uint8_t> from_hex(std::string_view hex);

} // namespace pcan
