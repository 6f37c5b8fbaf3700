#pragma once

// IA-32 subset decoder and udis86-style disassembly text.

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "pinky/xir.hpp"

namespace pinky {
class Mmu;
}

namespace pinky::x86 {

using xir::Width;

enum class Mnemonic : uint8_t {
  mov, movzx, lea, push, pop, pushfd, popfd,
  add, adc, sub, sbb, inc, dec, neg, mul, div,
  and_, or_, xor_, not_, test, cmp,
  shl, shr, sar, rol, ror,
  jmp, jcc, call, ret,
  nop, clc, stc, xchg,
  fabs, fchs, fsqrt, fld1,
  emucall,  // 0F 3F imm16: host-call trap used by shim stubs
};

const char* mnemonic_name(Mnemonic m);

enum class OperandKind : uint8_t { none, reg, mem, imm };

// x86 register numbers: eax ecx edx ebx esp ebp esi edi. For 8-bit
// operands 4..7 select ah ch dh bh.
inline constexpr uint8_t kEsp = 4;

struct Operand {
  OperandKind kind = OperandKind::none;
  Width width = Width::b32;
  uint8_t reg = 0;
  bool has_base = false;
  uint8_t base = 0;
  bool has_index = false;
  uint8_t index = 0;
  uint8_t scale = 1;
  int32_t disp = 0;
  uint32_t imm = 0;

  bool is_reg() const { return kind == OperandKind::reg; }
  bool is_mem() const { return kind == OperandKind::mem; }
  bool is_imm() const { return kind == OperandKind::imm; }
  bool is_high_byte() const { return is_reg() && width == Width::b8 && reg >= 4; }
  bool uses_reg(uint8_t r) const {
    return (is_reg() && width == Width::b32 && reg == r) ||
           (is_mem() && ((has_base && base == r) || (has_index && index == r)));
  }
};

inline constexpr size_t kMaxInstructionLength = 15;

struct GuestInstruction {
  uint32_t va = 0;
  uint8_t length = 0;
  Mnemonic mnemonic = Mnemonic::nop;
  std::array<Operand, 2> ops{};
  uint8_t op_count = 0;
  bool opsize16 = false;
  xir::Cond cond = xir::Cond::always;  // jcc only
  uint8_t cc = 0;                      // raw x86 condition nibble
  uint32_t target = 0;                 // rel branches
  std::array<uint8_t, kMaxInstructionLength> bytes{};

  uint32_t next_va() const { return va + length; }
  bool is_control_transfer() const;
};

enum class GuestErrc { unmapped_fetch, unsupported_instruction, temp_exhausted };

class GuestError : public std::runtime_error {
 public:
  GuestError(GuestErrc code, uint32_t va, const std::string& what)
      : std::runtime_error(what), code_(code), va_(va) {}
  GuestErrc code() const { return code_; }
  uint32_t va() const { return va_; }

 private:
  GuestErrc code_;
  uint32_t va_;
};

/// Decodes one instruction from `bytes` located at `va`. Running out of
/// bytes raises unmapped_fetch at the first missing address.
GuestInstruction decode(std::span<const uint8_t> bytes, uint32_t va);

/// Decodes the instruction at exactly `va`, independent of any other
/// decoding of overlapping bytes.
GuestInstruction decode_guest(const Mmu& mmu, uint32_t va);

std::string format(const GuestInstruction& insn);
std::string format_operand(const Operand& op, bool size_keyword);
const char* reg_name(uint8_t reg, Width w);
const char* jcc_name(uint8_t cc);
xir::Cond cond_from_cc(uint8_t cc);

}  // namespace pinky::x86
