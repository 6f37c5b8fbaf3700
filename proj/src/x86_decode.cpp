#include <fmt/format.h>

#include <algorithm>

#include "pinky/mmu.hpp"
#include "pinky/x86.hpp"

namespace pinky::x86 {

namespace {

constexpr const char* kMnemonicNames[] = {
    "mov",  "movzx", "lea", "push", "pop",   "pushfd", "popfd", "add",  "adc",  "sub",
    "sbb",  "inc",   "dec", "neg",  "mul",   "div",    "and",   "or",   "xor",  "not",
    "test", "cmp",   "shl", "shr",  "sar",   "rol",    "ror",   "jmp",  "jcc",  "call",
    "ret",  "nop",   "clc", "stc",  "xchg",  "fabs",   "fchs",  "fsqrt", "fld1", "emucall",
};

constexpr const char* kJccNames[] = {"jo", "jno", "jb", "jnb", "jz", "jnz", "jbe", "ja",
                                     "js", "jns", "jp", "jnp", "jl", "jge", "jle", "jg"};

constexpr xir::Cond kCcToCond[] = {
    xir::Cond::o, xir::Cond::no, xir::Cond::b,  xir::Cond::ae, xir::Cond::eq, xir::Cond::ne,
    xir::Cond::be, xir::Cond::a, xir::Cond::s,  xir::Cond::ns, xir::Cond::p,  xir::Cond::np,
    xir::Cond::l,  xir::Cond::ge, xir::Cond::le, xir::Cond::g,
};

constexpr Mnemonic kAluGroup[] = {Mnemonic::add, Mnemonic::or_,  Mnemonic::adc, Mnemonic::sbb,
                                  Mnemonic::and_, Mnemonic::sub, Mnemonic::xor_, Mnemonic::cmp};

class Reader {
 public:
  Reader(std::span<const uint8_t> bytes, uint32_t va) : bytes_(bytes), va_(va) {}

  uint8_t u8() {
    if (pos_ >= kMaxInstructionLength) unsupported("instruction too long");
    if (pos_ >= bytes_.size()) {
      const uint32_t at = va_ + static_cast<uint32_t>(pos_);
      throw GuestError(GuestErrc::unmapped_fetch, at, fmt::format("fetch fault at 0x{:08x}", at));
    }
    return bytes_[pos_++];
  }
  uint8_t peek() {
    const uint8_t b = u8();
    --pos_;
    return b;
  }
  int32_t s8() { return static_cast<int8_t>(u8()); }
  uint32_t u16() {
    const uint32_t lo = u8();
    return lo | (uint32_t{u8()} << 8);
  }
  uint32_t u32() {
    const uint32_t lo = u16();
    return lo | (u16() << 16);
  }
  size_t pos() const { return pos_; }
  uint32_t va() const { return va_; }

  [[noreturn]] void unsupported(std::string_view why = {}) const {
    std::string hex;
    const size_t shown = std::min(std::max<size_t>(pos_, 1), bytes_.size());
    for (size_t i = 0; i < shown; ++i) hex += fmt::format("{}{:02X}", i ? " " : "", bytes_[i]);
    throw GuestError(GuestErrc::unsupported_instruction, va_,
                     fmt::format("unsupported instruction at 0x{:08x}: {}{}{}", va_, hex,
                                 why.empty() ? "" : " (", why.empty() ? "" : std::string(why) + ")"));
  }

 private:
  std::span<const uint8_t> bytes_;
  uint32_t va_;
  size_t pos_ = 0;
};

struct ModRm {
  uint8_t mod;
  uint8_t reg;
  Operand rm;
};

Operand reg_operand(uint8_t r, Width w) {
  Operand o;
  o.kind = OperandKind::reg;
  o.reg = r;
  o.width = w;
  return o;
}

Operand imm_operand(uint32_t v, Width w) {
  Operand o;
  o.kind = OperandKind::imm;
  o.width = w;
  o.imm = v & xir::width_mask(w);
  return o;
}

ModRm read_modrm(Reader& in, Width w) {
  const uint8_t b = in.u8();
  ModRm m{static_cast<uint8_t>(b >> 6), static_cast<uint8_t>((b >> 3) & 7), {}};
  const uint8_t rm = b & 7;
  if (m.mod == 3) {
    m.rm = reg_operand(rm, w);
    return m;
  }
  Operand& o = m.rm;
  o.kind = OperandKind::mem;
  o.width = w;
  if (rm == 4) {
    const uint8_t sib = in.u8();
    const uint8_t scale_bits = sib >> 6;
    const uint8_t index = (sib >> 3) & 7;
    const uint8_t base = sib & 7;
    if (index != 4) {
      o.has_index = true;
      o.index = index;
      o.scale = static_cast<uint8_t>(1u << scale_bits);
    }
    if (base == 5 && m.mod == 0) {
      o.disp = static_cast<int32_t>(in.u32());
    } else {
      o.has_base = true;
      o.base = base;
    }
  } else if (rm == 5 && m.mod == 0) {
    o.disp = static_cast<int32_t>(in.u32());
  } else {
    o.has_base = true;
    o.base = rm;
  }
  if (m.mod == 1) o.disp = in.s8();
  if (m.mod == 2) o.disp = static_cast<int32_t>(in.u32());
  return m;
}

void set_ops(GuestInstruction& g, Mnemonic m, Operand a) {
  g.mnemonic = m;
  g.ops[0] = a;
  g.op_count = 1;
}

void set_ops(GuestInstruction& g, Mnemonic m, Operand a, Operand b) {
  g.mnemonic = m;
  g.ops[0] = a;
  g.ops[1] = b;
  g.op_count = 2;
}

}  // namespace

const char* mnemonic_name(Mnemonic m) { return kMnemonicNames[static_cast<size_t>(m)]; }
const char* jcc_name(uint8_t cc) { return kJccNames[cc & 15]; }
xir::Cond cond_from_cc(uint8_t cc) { return kCcToCond[cc & 15]; }

const char* reg_name(uint8_t reg, Width w) {
  static constexpr const char* k8[] = {"al", "cl", "dl", "bl", "ah", "ch", "dh", "bh"};
  static constexpr const char* k16[] = {"ax", "cx", "dx", "bx", "sp", "bp", "si", "di"};
  static constexpr const char* k32[] = {"eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"};
  switch (w) {
    case Width::b8: return k8[reg & 7];
    case Width::b16: return k16[reg & 7];
    default: return k32[reg & 7];
  }
}

bool GuestInstruction::is_control_transfer() const {
  switch (mnemonic) {
    case Mnemonic::jmp:
    case Mnemonic::jcc:
    case Mnemonic::call:
    case Mnemonic::ret:
    case Mnemonic::fabs:
    case Mnemonic::fchs:
    case Mnemonic::fsqrt:
    case Mnemonic::fld1:
    case Mnemonic::emucall:
      return true;
    default:
      return false;
  }
}

GuestInstruction decode(std::span<const uint8_t> bytes, uint32_t va) {
  Reader in(bytes, va);
  GuestInstruction g;
  g.va = va;

  for (;;) {
    const uint8_t p = in.peek();
    if (p == 0x66) {
      g.opsize16 = true;
      in.u8();
      continue;
    }
    switch (p) {
      case 0xF0: case 0xF2: case 0xF3: case 0x67:
      case 0x26: case 0x2E: case 0x36: case 0x3E: case 0x64: case 0x65:
        in.u8();
        in.unsupported("prefix");
      default:
        break;
    }
    break;
  }

  const Width v = g.opsize16 ? Width::b16 : Width::b32;
  bool allows16 = false;
  bool rel = false;
  int32_t rel_disp = 0;
  const uint8_t op = in.u8();

  auto alu_form = [&](Mnemonic m, uint8_t form) {
    switch (form) {
      case 0: { auto r = read_modrm(in, Width::b8); set_ops(g, m, r.rm, reg_operand(r.reg, Width::b8)); break; }
      case 1: { auto r = read_modrm(in, v); set_ops(g, m, r.rm, reg_operand(r.reg, v)); allows16 = true; break; }
      case 2: { auto r = read_modrm(in, Width::b8); set_ops(g, m, reg_operand(r.reg, Width::b8), r.rm); break; }
      case 3: { auto r = read_modrm(in, v); set_ops(g, m, reg_operand(r.reg, v), r.rm); allows16 = true; break; }
      case 4: set_ops(g, m, reg_operand(0, Width::b8), imm_operand(in.u8(), Width::b8)); break;
      case 5:
        set_ops(g, m, reg_operand(0, v), imm_operand(v == Width::b16 ? in.u16() : in.u32(), v));
        allows16 = true;
        break;
    }
  };

  auto shift_group = [&](Width w, Operand count) {
    auto r = read_modrm(in, w);
    static constexpr Mnemonic kShift[] = {Mnemonic::rol, Mnemonic::ror, Mnemonic::nop, Mnemonic::nop,
                                          Mnemonic::shl, Mnemonic::shr, Mnemonic::shl, Mnemonic::sar};
    if (r.reg == 2 || r.reg == 3) in.unsupported("rotate through carry");
    set_ops(g, kShift[r.reg], r.rm, count);
    allows16 = w != Width::b8;
    return r;
  };

  if (op < 0x40 && (op & 7) < 6) {
    alu_form(kAluGroup[op >> 3], op & 7);
  } else if (op >= 0x40 && op <= 0x4F) {
    set_ops(g, op < 0x48 ? Mnemonic::inc : Mnemonic::dec, reg_operand(op & 7, v));
    allows16 = true;
  } else if (op >= 0x50 && op <= 0x57) {
    set_ops(g, Mnemonic::push, reg_operand(op & 7, Width::b32));
  } else if (op >= 0x58 && op <= 0x5F) {
    set_ops(g, Mnemonic::pop, reg_operand(op & 7, Width::b32));
  } else if (op >= 0x70 && op <= 0x7F) {
    g.mnemonic = Mnemonic::jcc;
    g.cc = op & 15;
    g.cond = cond_from_cc(g.cc);
    rel = true;
    rel_disp = in.s8();
  } else if (op >= 0x91 && op <= 0x97) {
    set_ops(g, Mnemonic::xchg, reg_operand(0, v), reg_operand(op & 7, v));
    allows16 = true;
  } else if (op >= 0xB0 && op <= 0xB7) {
    set_ops(g, Mnemonic::mov, reg_operand(op & 7, Width::b8), imm_operand(in.u8(), Width::b8));
  } else if (op >= 0xB8 && op <= 0xBF) {
    set_ops(g, Mnemonic::mov, reg_operand(op & 7, v),
            imm_operand(v == Width::b16 ? in.u16() : in.u32(), v));
    allows16 = true;
  } else {
    switch (op) {
      case 0x0F: {
        const uint8_t op2 = in.u8();
        if (op2 >= 0x80 && op2 <= 0x8F) {
          g.mnemonic = Mnemonic::jcc;
          g.cc = op2 & 15;
          g.cond = cond_from_cc(g.cc);
          rel = true;
          rel_disp = static_cast<int32_t>(in.u32());
        } else if (op2 == 0xB6 || op2 == 0xB7) {
          auto r = read_modrm(in, op2 == 0xB6 ? Width::b8 : Width::b16);
          set_ops(g, Mnemonic::movzx, reg_operand(r.reg, Width::b32), r.rm);
        } else if (op2 == 0x3F) {
          set_ops(g, Mnemonic::emucall, imm_operand(in.u16(), Width::b16));
        } else {
          in.unsupported();
        }
        break;
      }
      case 0x68:
        set_ops(g, Mnemonic::push, imm_operand(in.u32(), Width::b32));
        break;
      case 0x6A:
        set_ops(g, Mnemonic::push, imm_operand(static_cast<uint32_t>(in.s8()), Width::b32));
        break;
      case 0x80: case 0x81: case 0x83: {
        const Width w = op == 0x80 ? Width::b8 : v;
        auto r = read_modrm(in, w);
        uint32_t imm;
        if (op == 0x81) imm = w == Width::b16 ? in.u16() : in.u32();
        else if (op == 0x83) imm = static_cast<uint32_t>(in.s8());
        else imm = in.u8();
        set_ops(g, kAluGroup[r.reg], r.rm, imm_operand(imm, w));
        allows16 = w != Width::b8;
        break;
      }
      case 0x84: case 0x85: {
        const Width w = op == 0x84 ? Width::b8 : v;
        auto r = read_modrm(in, w);
        set_ops(g, Mnemonic::test, r.rm, reg_operand(r.reg, w));
        allows16 = w != Width::b8;
        break;
      }
      case 0x86: case 0x87: {
        const Width w = op == 0x86 ? Width::b8 : v;
        auto r = read_modrm(in, w);
        if (!r.rm.is_reg()) in.unsupported("xchg with memory");
        set_ops(g, Mnemonic::xchg, r.rm, reg_operand(r.reg, w));
        allows16 = w != Width::b8;
        break;
      }
      case 0x88: alu_form(Mnemonic::mov, 0); break;
      case 0x89: alu_form(Mnemonic::mov, 1); break;
      case 0x8A: alu_form(Mnemonic::mov, 2); break;
      case 0x8B: alu_form(Mnemonic::mov, 3); break;
      case 0x8D: {
        auto r = read_modrm(in, Width::b32);
        if (!r.rm.is_mem()) in.unsupported("lea with register operand");
        set_ops(g, Mnemonic::lea, reg_operand(r.reg, Width::b32), r.rm);
        break;
      }
      case 0x8F: {
        auto r = read_modrm(in, Width::b32);
        if (r.reg != 0) in.unsupported();
        set_ops(g, Mnemonic::pop, r.rm);
        break;
      }
      case 0x90: g.mnemonic = Mnemonic::nop; break;
      case 0x9C: g.mnemonic = Mnemonic::pushfd; break;
      case 0x9D: g.mnemonic = Mnemonic::popfd; break;
      case 0xA8:
        set_ops(g, Mnemonic::test, reg_operand(0, Width::b8), imm_operand(in.u8(), Width::b8));
        break;
      case 0xA9:
        set_ops(g, Mnemonic::test, reg_operand(0, v), imm_operand(v == Width::b16 ? in.u16() : in.u32(), v));
        allows16 = true;
        break;
      case 0xC0: case 0xC1: {
        auto r = shift_group(op == 0xC0 ? Width::b8 : v, {});
        g.ops[1] = imm_operand(in.u8(), Width::b8);
        (void)r;
        break;
      }
      case 0xD0: case 0xD1:
        shift_group(op == 0xD0 ? Width::b8 : v, imm_operand(1, Width::b8));
        break;
      case 0xD2: case 0xD3:
        shift_group(op == 0xD2 ? Width::b8 : v, reg_operand(1, Width::b8));
        break;
      case 0xC2:
        set_ops(g, Mnemonic::ret, imm_operand(in.u16(), Width::b16));
        break;
      case 0xC3: g.mnemonic = Mnemonic::ret; break;
      case 0xC6: case 0xC7: {
        const Width w = op == 0xC6 ? Width::b8 : v;
        auto r = read_modrm(in, w);
        if (r.reg != 0) in.unsupported();
        uint32_t imm = w == Width::b8 ? in.u8() : w == Width::b16 ? in.u16() : in.u32();
        set_ops(g, Mnemonic::mov, r.rm, imm_operand(imm, w));
        allows16 = w != Width::b8;
        break;
      }
      case 0xD9: {
        const uint8_t m = in.u8();
        switch (m) {
          case 0xE1: g.mnemonic = Mnemonic::fabs; break;
          case 0xE0: g.mnemonic = Mnemonic::fchs; break;
          case 0xFA: g.mnemonic = Mnemonic::fsqrt; break;
          case 0xE8: g.mnemonic = Mnemonic::fld1; break;
          default: in.unsupported("x87");
        }
        break;
      }
      case 0xE8:
        g.mnemonic = Mnemonic::call;
        rel = true;
        rel_disp = static_cast<int32_t>(in.u32());
        break;
      case 0xE9:
        g.mnemonic = Mnemonic::jmp;
        rel = true;
        rel_disp = static_cast<int32_t>(in.u32());
        break;
      case 0xEB:
        g.mnemonic = Mnemonic::jmp;
        rel = true;
        rel_disp = in.s8();
        break;
      case 0xF6: case 0xF7: {
        const Width w = op == 0xF6 ? Width::b8 : v;
        auto r = read_modrm(in, w);
        allows16 = w != Width::b8;
        switch (r.reg) {
          case 0: {
            const uint32_t imm = w == Width::b8 ? in.u8() : w == Width::b16 ? in.u16() : in.u32();
            set_ops(g, Mnemonic::test, r.rm, imm_operand(imm, w));
            break;
          }
          case 2: set_ops(g, Mnemonic::not_, r.rm); break;
          case 3: set_ops(g, Mnemonic::neg, r.rm); break;
          case 4: set_ops(g, Mnemonic::mul, r.rm); break;
          case 6: set_ops(g, Mnemonic::div, r.rm); break;
          default: in.unsupported("signed multiply/divide");
        }
        break;
      }
      case 0xF8: g.mnemonic = Mnemonic::clc; break;
      case 0xF9: g.mnemonic = Mnemonic::stc; break;
      case 0xFE: {
        auto r = read_modrm(in, Width::b8);
        if (r.reg > 1) in.unsupported();
        set_ops(g, r.reg == 0 ? Mnemonic::inc : Mnemonic::dec, r.rm);
        break;
      }
      case 0xFF: {
        auto r = read_modrm(in, v);
        switch (r.reg) {
          case 0: set_ops(g, Mnemonic::inc, r.rm); allows16 = true; break;
          case 1: set_ops(g, Mnemonic::dec, r.rm); allows16 = true; break;
          case 2: set_ops(g, Mnemonic::call, r.rm); break;
          case 4: set_ops(g, Mnemonic::jmp, r.rm); break;
          case 6: set_ops(g, Mnemonic::push, r.rm); break;
          default: in.unsupported();
        }
        break;
      }
      default:
        in.unsupported();
    }
  }

  if (g.opsize16 && !allows16) in.unsupported("operand-size override");

  g.length = static_cast<uint8_t>(in.pos());
  std::copy_n(bytes.begin(), g.length, g.bytes.begin());
  if (rel) g.target = g.next_va() + static_cast<uint32_t>(rel_disp);
  return g;
}

GuestInstruction decode_guest(const Mmu& mmu, uint32_t va) {
  std::array<uint8_t, kMaxInstructionLength> buf{};
  size_t have = 0;
  uint32_t at = va;
  while (have < buf.size()) {
    if (!mmu.is_mapped(at)) break;
    const size_t chunk = std::min<size_t>(buf.size() - have, kPageSize - page_offset(at));
    mmu.read_memory(at, std::span<uint8_t>(buf.data() + have, chunk));
    have += chunk;
    at += static_cast<uint32_t>(chunk);
    if (at == 0) break;  // wrapped past the top of the address space
  }
  return decode(std::span<const uint8_t>(buf.data(), have), va);
}

std::string format_operand(const Operand& op, bool size_keyword) {
  switch (op.kind) {
    case OperandKind::reg:
      return reg_name(op.reg, op.width);
    case OperandKind::imm:
      return fmt::format("0x{:x}", op.imm);
    case OperandKind::mem: {
      std::string s;
      if (size_keyword) {
        s = op.width == Width::b8 ? "byte " : op.width == Width::b16 ? "word " : "dword ";
      }
      s += '[';
      if (!op.has_base && !op.has_index) {
        s += fmt::format("0x{:x}", static_cast<uint32_t>(op.disp));
      } else {
        if (op.has_base) s += reg_name(op.base, Width::b32);
        if (op.has_index) {
          if (op.has_base) s += '+';
          s += reg_name(op.index, Width::b32);
          if (op.scale > 1) s += fmt::format("*{}", op.scale);
        }
        if (op.disp > 0) s += fmt::format("+0x{:x}", op.disp);
        if (op.disp < 0) s += fmt::format("-0x{:x}", -static_cast<int64_t>(op.disp));
      }
      s += ']';
      return s;
    }
    case OperandKind::none:
      break;
  }
  return {};
}

std::string format(const GuestInstruction& g) {
  if (g.mnemonic == Mnemonic::jcc) return fmt::format("{} 0x{:x}", jcc_name(g.cc), g.target);
  std::string s = mnemonic_name(g.mnemonic);
  if ((g.mnemonic == Mnemonic::jmp || g.mnemonic == Mnemonic::call) && g.op_count == 0) {
    return s + fmt::format(" 0x{:x}", g.target);
  }
  bool any_reg = false;
  for (unsigned i = 0; i < g.op_count; ++i) any_reg |= g.ops[i].is_reg();
  const bool force_size = g.mnemonic == Mnemonic::movzx;
  for (unsigned i = 0; i < g.op_count; ++i) {
    s += i == 0 ? " " : ", ";
    s += format_operand(g.ops[i], force_size || !any_reg);
  }
  return s;
}

}  // namespace pinky::x86
