#include "pcan/pa.hpp"

#include "pcan/error.hpp"

#include <array>
#include <bit>
#include <random>
#include <string>

namespace pcan::pa {

namespace {

inline void sip_round(std::uint64_t &v0, std::uint64_t &v1, std::uint64_t &v2,
                      std::uint64_t &v3) {
  v0 += v1;
  v1 = std::rotl(v1, 13);
  v1 ^= v0;
  v0 = std::rotl(v0, 32);
  v2 += v3;
  v3 = std::rotl(v3, 16);
  v3 ^= v2;
  v0 += v3;
  v3 = std::rotl(v3, 21);
  v3 ^= v0;
  v2 += v1;
  v1 = std::rotl(v1, 17);
  v1 ^= v2;
  v2 = std::rotl(v2, 32);
}

std::uint64_t load_le64(const std::uint8_t *p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i)
    v = (v << 8) | p[i];
  return v;
}

void store_le64(std::uint8_t *p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

Pointer add_pac(const Key128 &key, Pointer ptr, Modifier modifier,
                unsigned width) {
  // The tag covers the whole input value, so a non-canonical input yields
  // a pointer whose tag does not match its (canonical) address.
  const std::uint64_t tag = pac_compute(key, ptr.value, modifier, width);
  return Pointer{ptr.address() | (tag << kPacShift)};
}

Pointer auth(KeyId id, Pointer ptr, Modifier modifier, const PacKeySet &keys) {
  const std::uint64_t tag =
      pac_compute(keys.key(id), ptr.address(), modifier, keys.pac_width);
  if (ptr.pac_field() == tag)
    return Pointer{ptr.address()};
  const std::uint64_t field =
      kCorruptionPattern | static_cast<std::uint64_t>(id);
  return Pointer{ptr.address() | (field << kPacShift)};
}

} // namespace

std::string_view to_string(KeyId key) {
  switch (key) {
  case KeyId::IA:
    return "ia";
  case KeyId::IB:
    return "ib";
  case KeyId::DA:
    return "da";
  case KeyId::DB:
    return "db";
  }
  return "?";
}

PacKeySet PacKeySet::generate(std::uint64_t seed, unsigned pac_width) {
  std::mt19937_64 rng(seed);
  PacKeySet keys;
  for (Key128 *k : {&keys.ia, &keys.ib, &keys.da, &keys.db, &keys.ga}) {
    k->lo = rng();
    k->hi = rng();
  }
  keys.pac_width = pac_width;
  keys.validate();
  return keys;
}

void PacKeySet::validate() const {
  if (pac_width != 4 && pac_width != 8 && pac_width != 16)
    throw ConfigError("pac width must be 4, 8 or 16 bits, got " +
                      std::to_string(pac_width));
  if (ga_width < 1 || ga_width > 32)
    throw ConfigError("pacga width must be in [1, 32], got " +
                      std::to_string(ga_width));
}

const Key128 &PacKeySet::key(KeyId id) const {
  switch (id) {
  case KeyId::IA:
    return ia;
  case KeyId::IB:
    return ib;
  case KeyId::DA:
    return da;
  case KeyId::DB:
    return db;
  }
  return da;
}

std::uint64_t siphash24(const Key128 &key, std::span<const std::uint8_t> msg) {
  std::uint64_t v0 = key.lo ^ 0x736f6d6570736575ULL;
  std::uint64_t v1 = key.hi ^ 0x646f72616e646f6dULL;
  std::uint64_t v2 = key.lo ^ 0x6c7967656e657261ULL;
  std::uint64_t v3 = key.hi ^ 0x7465646279746573ULL;

  const std::size_t full = msg.size() / 8 * 8;
  for (std::size_t i = 0; i < full; i += 8) {
    const std::uint64_t m = load_le64(msg.data() + i);
    v3 ^= m;
    sip_round(v0, v1, v2, v3);
    sip_round(v0, v1, v2, v3);
    v0 ^= m;
  }

  std::uint64_t last = static_cast<std::uint64_t>(msg.size() & 0xff) << 56;
  for (std::size_t i = full; i < msg.size(); ++i)
    last |= static_cast<std::uint64_t>(msg[i]) << (8 * (i - full));
  v3 ^= last;
  sip_round(v0, v1, v2, v3);
  sip_round(v0, v1, v2, v3);
  v0 ^= last;

  v2 ^= 0xff;
  for (int i = 0; i < 4; ++i)
    sip_round(v0, v1, v2, v3);
  return v0 ^ v1 ^ v2 ^ v3;
}

std::uint32_t pac_compute(const Key128 &key, std::uint64_t data,
                          Modifier modifier, unsigned width) {
  if (width < 1 || width > 32)
    throw ConfigError("PAC width must be in [1, 32], got " +
                      std::to_string(width));
  std::array<std::uint8_t, 16> msg{};
  store_le64(msg.data(), data);
  store_le64(msg.data() + 8, modifier.value);
  const std::uint64_t mac = siphash24(key, msg);
  const std::uint64_t mask = (std::uint64_t{1} << width) - 1;
  return static_cast<std::uint32_t>(mac & mask);
}

Pointer pacia(Pointer ptr, Modifier modifier, const PacKeySet &keys) {
  return add_pac(keys.ia, ptr, modifier, keys.pac_width);
}

Pointer autia(Pointer ptr, Modifier modifier, const PacKeySet &keys) {
  return auth(KeyId::IA, ptr, modifier, keys);
}

Pointer pacda(Pointer ptr, Modifier modifier, const PacKeySet &keys) {
  return add_pac(keys.da, ptr, modifier, keys.pac_width);
}

Pointer autda(Pointer ptr, Modifier modifier, const PacKeySet &keys) {
  return auth(KeyId::DA, ptr, modifier, keys);
}

std::uint64_t pacga(std::uint64_t data, Modifier modifier,
                    const PacKeySet &keys) {
  const std::uint64_t tag = pac_compute(keys.ga, data, modifier, keys.ga_width);
  return tag << 32;
}

std::optional<KeyId> corruption_key(Pointer ptr) {
  const std::uint16_t field = ptr.pac_field();
  if ((field & ~std::uint16_t{3}) != kCorruptionPattern)
    return std::nullopt;
  return static_cast<KeyId>(field & 3);
}

} // namespace pcan::pa
