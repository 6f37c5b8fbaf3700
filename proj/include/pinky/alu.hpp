#pragma once

// x86 arithmetic/flag semantics for XIR operations. Shared by the
// interpreter and the predecoded backend.

#include <bit>
#include <cstdint>

#include "pinky/xir.hpp"

namespace pinky::alu {

using xir::Cond;
using xir::Width;
namespace flag = xir::flag;

struct Result {
  uint32_t value;  // already masked to the operation width
  uint32_t flags;  // new values for the bits in `written`
  uint32_t written;
};

inline uint32_t sign_bit(Width w) { return 1u << (xir::width_bits(w) - 1); }

inline uint32_t szp(uint32_t v, Width w) {
  uint32_t f = 0;
  if ((v & xir::width_mask(w)) == 0) f |= flag::zf;
  if (v & sign_bit(w)) f |= flag::sf;
  if ((std::popcount(v & 0xFFu) & 1) == 0) f |= flag::pf;
  return f;
}

inline Result add(uint32_t a, uint32_t b, uint32_t carry, Width w) {
  const uint32_t mask = xir::width_mask(w);
  a &= mask;
  b &= mask;
  const uint64_t wide = uint64_t{a} + b + carry;
  const uint32_t r = static_cast<uint32_t>(wide) & mask;
  uint32_t f = szp(r, w);
  if (wide > mask) f |= flag::cf;
  if ((a ^ r) & (b ^ r) & sign_bit(w)) f |= flag::of;
  if ((a ^ b ^ r) & 0x10u) f |= flag::af;
  return {r, f, flag::status};
}

inline Result sub(uint32_t a, uint32_t b, uint32_t borrow, Width w) {
  const uint32_t mask = xir::width_mask(w);
  a &= mask;
  b &= mask;
  const uint32_t r = (a - b - borrow) & mask;
  uint32_t f = szp(r, w);
  if (uint64_t{a} < uint64_t{b} + borrow) f |= flag::cf;
  if ((a ^ b) & (a ^ r) & sign_bit(w)) f |= flag::of;
  if ((a ^ b ^ r) & 0x10u) f |= flag::af;
  return {r, f, flag::status};
}

inline Result logic(uint32_t r, Width w) {
  r &= xir::width_mask(w);
  return {r, szp(r, w), flag::status};
}

inline Result shl(uint32_t a, uint32_t count, Width w) {
  const unsigned n = count & 31u;
  const unsigned bits = xir::width_bits(w);
  a &= xir::width_mask(w);
  if (n == 0) return {a, 0, 0};
  const uint32_t r = static_cast<uint32_t>(uint64_t{a} << n) & xir::width_mask(w);
  const uint32_t cf = n <= bits ? (a >> (bits - n)) & 1u : 0u;
  uint32_t f = szp(r, w) | (cf ? flag::cf : 0);
  if (((r & sign_bit(w)) != 0) != (cf != 0)) f |= flag::of;
  return {r, f, flag::status};
}

inline Result shr(uint32_t a, uint32_t count, Width w) {
  const unsigned n = count & 31u;
  const unsigned bits = xir::width_bits(w);
  a &= xir::width_mask(w);
  if (n == 0) return {a, 0, 0};
  const uint32_t r = n >= bits ? 0u : a >> n;
  const uint32_t cf = n <= bits ? (a >> (n - 1)) & 1u : 0u;
  uint32_t f = szp(r, w) | (cf ? flag::cf : 0);
  if (a & sign_bit(w)) f |= flag::of;
  return {r, f, flag::status};
}

inline Result rol(uint32_t a, uint32_t count, Width w) {
  const unsigned n = count & 31u;
  const unsigned bits = xir::width_bits(w);
  const uint32_t mask = xir::width_mask(w);
  a &= mask;
  if (n == 0) return {a, 0, 0};
  const unsigned k = n % bits;
  const uint32_t r = k == 0 ? a : ((a << k) | (a >> (bits - k))) & mask;
  const uint32_t cf = r & 1u;
  uint32_t f = cf ? flag::cf : 0;
  if (((r & sign_bit(w)) != 0) != (cf != 0)) f |= flag::of;
  return {r, f, flag::cf | flag::of};
}

inline Result ror(uint32_t a, uint32_t count, Width w) {
  const unsigned n = count & 31u;
  const unsigned bits = xir::width_bits(w);
  const uint32_t mask = xir::width_mask(w);
  a &= mask;
  if (n == 0) return {a, 0, 0};
  const unsigned k = n % bits;
  const uint32_t r = k == 0 ? a : ((a >> k) | (a << (bits - k))) & mask;
  const bool msb = (r & sign_bit(w)) != 0;
  const bool next = (r & (sign_bit(w) >> 1)) != 0;
  uint32_t f = msb ? flag::cf : 0;
  if (msb != next) f |= flag::of;
  return {r, f, flag::cf | flag::of};
}

struct WideResult {
  uint32_t low;
  uint32_t high;
  uint32_t flags;
  uint32_t written;
};

/// Unsigned widening multiply: high:low = a * b at width w.
inline WideResult mul(uint32_t a, uint32_t b, Width w) {
  const uint32_t mask = xir::width_mask(w);
  const uint64_t p = uint64_t{a & mask} * uint64_t{b & mask};
  const uint32_t low = static_cast<uint32_t>(p) & mask;
  const uint32_t high = static_cast<uint32_t>(p >> xir::width_bits(w)) & mask;
  const uint32_t f = high != 0 ? (flag::cf | flag::of) : 0;
  return {low, high, f, flag::cf | flag::of};
}

/// Unsigned divide of high:low by divisor. Returns false on #DE
/// (zero divisor or quotient overflow).
inline bool div(uint32_t high, uint32_t low, uint32_t divisor, Width w, uint32_t& quotient,
                uint32_t& remainder) {
  const uint32_t mask = xir::width_mask(w);
  divisor &= mask;
  if (divisor == 0) return false;
  const uint64_t dividend = (uint64_t{high & mask} << xir::width_bits(w)) | (low & mask);
  const uint64_t q = dividend / divisor;
  if (q > mask) return false;
  quotient = static_cast<uint32_t>(q);
  remainder = static_cast<uint32_t>(dividend % divisor);
  return true;
}

inline bool condition_holds(Cond c, uint32_t f) {
  const bool cf = f & flag::cf, zf = f & flag::zf, sf = f & flag::sf, of = f & flag::of,
             pf = f & flag::pf;
  switch (c) {
    case Cond::always: return true;
    case Cond::eq: return zf;
    case Cond::ne: return !zf;
    case Cond::b: return cf;
    case Cond::ae: return !cf;
    case Cond::be: return cf || zf;
    case Cond::a: return !cf && !zf;
    case Cond::s: return sf;
    case Cond::ns: return !sf;
    case Cond::l: return sf != of;
    case Cond::ge: return sf == of;
    case Cond::le: return zf || sf != of;
    case Cond::g: return !zf && sf == of;
    case Cond::o: return of;
    case Cond::no: return !of;
    case Cond::p: return pf;
    case Cond::np: return !pf;
  }
  return false;
}

inline uint32_t merge(uint32_t old_flags, const Result& r) {
  return (old_flags & ~r.written) | (r.flags & r.written);
}

}  // namespace pinky::alu
