#pragma once

// Emulation of the ARMv8.3-A pointer authentication instructions used by
// the canary schemes: pacia/autia, pacda/autda and pacga.
//
// Pointer layout is flat: bits [47:0] hold the virtual address and bits
// [63:48] hold the PAC field. A signed pointer carries a W-bit tag in the
// low W bits of that field. A failed authentication replaces the field
// with 0x4000 | key-id, which sets bit 62 and makes every dereference of
// the result fault.
//
// The MAC is SipHash-2-4 keyed with the 128-bit PA key over the 16-byte
// little-endian message data || modifier, truncated to the low `width`
// bits. Hardware uses QARMA; only the keyed-PRF behaviour matters here.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace pcan::pa {

inline constexpr unsigned kPacShift = 48;
inline constexpr std::uint64_t kAddressMask = (std::uint64_t{1} << 48) - 1;
inline constexpr std::uint64_t kPacFieldMask = ~kAddressMask;
inline constexpr std::uint16_t kCorruptionPattern = 0x4000;
inline constexpr unsigned kDefaultPacWidth = 16;
inline constexpr unsigned kDefaultGaWidth = 32;

struct Key128 {
  std::uint64_t lo = 0;
  std::uint64_t hi = 0;

  friend bool operator==(const Key128 &, const Key128 &) = default;
};

/// Key identifier encoded in the low two bits of a corrupted PAC field.
enum class KeyId : std::uint8_t { IA = 0, IB = 1, DA = 2, DB = 3 };

std::string_view to_string(KeyId key);

/// The five per-process keys. Generated once per simulated process; a
/// forked child inherits them unchanged.
struct PacKeySet {
  Key128 ia;
  Key128 ib;
  Key128 da;
  Key128 db;
  Key128 ga;
  unsigned pac_width = kDefaultPacWidth;
  unsigned ga_width = kDefaultGaWidth;

  /// Draws all five keys from a std::mt19937_64 seeded with `seed`, in the
  /// order ia, ib, da, db, ga (lo word first).
  static PacKeySet generate(std::uint64_t seed,
                            unsigned pac_width = kDefaultPacWidth);

  /// Throws ConfigError unless pac_width is 4, 8 or 16 and ga_width is in
  /// [1, 32].
  void validate() const;

  const Key128 &key(KeyId id) const;

  friend bool operator==(const PacKeySet &, const PacKeySet &) = default;
};

struct Modifier {
  std::uint64_t value = 0;

  friend bool operator==(const Modifier &, const Modifier &) = default;
};

/// A 64-bit pointer value with the PAC field in bits [63:48].
struct Pointer {
  std::uint64_t value = 0;

  std::uint64_t address() const { return value & kAddressMask; }
  std::uint16_t pac_field() const {
    return static_cast<std::uint16_t>(value >> kPacShift);
  }
  bool is_canonical() const { return pac_field() == 0; }

  friend bool operator==(const Pointer &, const Pointer &) = default;
};

/// SipHash-2-4 over an arbitrary message. Exposed for the reference test
/// vectors; pac_compute is the only production caller.
std::uint64_t siphash24(const Key128 &key, std::span<const std::uint8_t> msg);

/// Truncated keyed MAC of (data, modifier). width must be in [1, 32].
std::uint32_t pac_compute(const Key128 &key, std::uint64_t data,
                          Modifier modifier, unsigned width);

Pointer pacia(Pointer ptr, Modifier modifier, const PacKeySet &keys);
Pointer autia(Pointer ptr, Modifier modifier, const PacKeySet &keys);
Pointer pacda(Pointer ptr, Modifier modifier, const PacKeySet &keys);
Pointer autda(Pointer ptr, Modifier modifier, const PacKeySet &keys);

/// Generic MAC: pac_compute(ga, data, modifier, ga_width) in bits [63:32],
/// bits [31:0] zero.
std::uint64_t pacga(std::uint64_t data, Modifier modifier,
                    const PacKeySet &keys);

/// Key attribution for a pointer produced by a failed authentication, or
/// nullopt if the PAC field does not carry the corruption pattern.
std::optional<KeyId> corruption_key(Pointer ptr);

} // namespace pcan::pa
