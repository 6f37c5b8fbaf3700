#pragma once

// XIR: the fixed-width intermediate instruction set every guest
// architecture is lowered to.

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pinky::xir {

enum class Opcode : uint8_t {
  // control
  jmp = 0,
  ret,
  fsave,
  frestore,
  // memory
  ld,
  st,
  mv,
  // arithmetic
  add,
  addc,
  sub,
  subc,
  mul,
  div,
  // logical
  and_,
  or_,
  xor_,
  not_,
  cmp,
  // shifts and rotates
  rl,
  rr,
  sl,
  sr,
  // escape to the host
  syscall,
};

inline constexpr unsigned kOpcodeCount = 23;

enum class Width : uint8_t { b8 = 0, b16 = 1, b32 = 2 };

constexpr unsigned width_bytes(Width w) { return 1u << static_cast<unsigned>(w); }
constexpr unsigned width_bits(Width w) { return 8u * width_bytes(w); }
constexpr uint32_t width_mask(Width w) {
  return w == Width::b32 ? 0xFFFFFFFFu : ((1u << width_bits(w)) - 1u);
}

/// Branch conditions for jmp, evaluated against the XIR flag register.
enum class Cond : uint8_t {
  always = 0,
  eq, ne, b, ae, be, a, s, ns, l, ge, le, g, o, no, p, np,
};
inline constexpr unsigned kCondCount = 17;

// Flags byte layout.
inline constexpr uint8_t kWidthMask = 0x03;
inline constexpr unsigned kCondShift = 2;
inline constexpr uint8_t kCondMask = 0x7C;
inline constexpr uint8_t kReservedMask = 0x80;

// x86-style status bits held in r1 (and guest EFLAGS in r169).
namespace flag {
inline constexpr uint32_t cf = 1u << 0;
inline constexpr uint32_t pf = 1u << 2;
inline constexpr uint32_t af = 1u << 4;
inline constexpr uint32_t zf = 1u << 6;
inline constexpr uint32_t sf = 1u << 7;
inline constexpr uint32_t of = 1u << 11;
inline constexpr uint32_t status = cf | pf | af | zf | sf | of;
}  // namespace flag

using Reg = uint8_t;

/// Partition of the 256-entry register file.
namespace reg {
inline constexpr Reg none = 0;       // never a source; reads as zero
inline constexpr Reg flags = 1;      // VM flag register
inline constexpr Reg shadow = 2;     // fsave/frestore slot
inline constexpr Reg init = 3;       // interrupt/init status (unused)
inline constexpr Reg wide_hi = 4;    // high half for widening mul/div
inline constexpr Reg host_ret = 5;   // continuation address set by host calls
inline constexpr Reg special_last = 31;
inline constexpr Reg temp_first = 32;
inline constexpr Reg temp_last = 159;
inline constexpr Reg guest_first = 160;
inline constexpr Reg guest_last = 255;

inline constexpr Reg eax = 161;
inline constexpr Reg ecx = 162;
inline constexpr Reg edx = 163;
inline constexpr Reg ebx = 164;
inline constexpr Reg esp = 165;
inline constexpr Reg ebp = 166;
inline constexpr Reg esi = 167;
inline constexpr Reg edi = 168;
inline constexpr Reg eflags = 169;

constexpr bool is_special(Reg r) { return r <= special_last; }
constexpr bool is_temp(Reg r) { return r >= temp_first && r <= temp_last; }
constexpr bool is_guest(Reg r) { return r >= guest_first; }
}  // namespace reg

struct Instruction {
  Opcode op = Opcode::mv;
  uint8_t flags = static_cast<uint8_t>(Width::b32);
  Reg dst = 0;
  Reg src = 0;
  int32_t imm = 0;

  Width width() const { return static_cast<Width>(flags & kWidthMask); }
  Cond cond() const { return static_cast<Cond>((flags & kCondMask) >> kCondShift); }

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

constexpr uint8_t make_flags(Width w, Cond c = Cond::always) {
  return static_cast<uint8_t>(static_cast<uint8_t>(w) |
                              (static_cast<uint8_t>(c) << kCondShift));
}

constexpr Instruction make(Opcode op, Width w, Reg dst, Reg src, int32_t imm) {
  return Instruction{op, make_flags(w), dst, src, imm};
}

constexpr Instruction make_jmp(Cond c, int32_t offset) {
  return Instruction{Opcode::jmp, make_flags(Width::b32, c), 0, 0, offset};
}

enum class XirErrc {
  invalid_width,
  reserved_bits_set,
  unknown_opcode,
  invalid_condition,
  bad_length,
};

class XirError : public std::runtime_error {
 public:
  XirError(XirErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  XirErrc code() const { return code_; }

 private:
  XirErrc code_;
};

inline constexpr size_t kEncodedSize = 8;
using EncodedInstruction = std::array<uint8_t, kEncodedSize>;

/// Layout: [opcode u8][flags u8][dst u8][src u8][imm i32 LE].
EncodedInstruction encode(const Instruction& instr);
Instruction decode(std::span<const uint8_t> record);

/// Throws XirError if the instruction could not be encoded.
void check_encodable(const Instruction& instr);

/// True when fields the opcode does not use are zero and control
/// opcodes carry the B32 width; render() is injective over this set.
bool is_canonical(const Instruction& instr);

std::string render(const Instruction& instr);
const char* opcode_name(Opcode op);
const char* cond_name(Cond c);

enum class Tier : uint8_t { interpreted, compiled };

/// A translated straight-line guest region.
struct CodeBlock {
  uint32_t entry_va = 0;
  std::vector<Instruction> instrs;
  /// Guest VA of the instruction each XIR op was lowered from.
  std::vector<uint32_t> origin;
  uint32_t guest_len = 0;
  uint32_t guest_count = 0;
  uint64_t exec_count = 0;
  Tier tier = Tier::interpreted;
};

std::vector<std::string> validate_block(const CodeBlock& block);

std::vector<uint8_t> serialize(std::span<const Instruction> instrs);

}  // namespace pinky::xir
