#include "pinky/xir.hpp"

#include <fmt/format.h>

namespace pinky::xir {

namespace {

constexpr std::array<const char*, kOpcodeCount> kOpcodeNames = {
    "JMP", "RET", "FSAVE", "FRESTORE", "LD",  "ST",  "MV",  "ADD",
    "ADDC", "SUB", "SUBC", "MUL",     "DIV", "AND", "OR",  "XOR",
    "NOT", "CMP", "RL",   "RR",       "SL",  "SR",  "SYSCALL",
};

constexpr std::array<const char*, kCondCount> kCondNames = {
    "", "EQ", "NE", "B", "AE", "BE", "A", "S", "NS",
    "L", "GE", "LE", "G", "O", "NO", "P", "NP",
};

bool is_control(Opcode op) {
  switch (op) {
    case Opcode::jmp:
    case Opcode::ret:
    case Opcode::fsave:
    case Opcode::frestore:
    case Opcode::syscall:
      return true;
    default:
      return false;
  }
}

std::string signed_offset(int32_t imm) {
  if (imm == 0) return {};
  const int64_t v = imm;
  return v < 0 ? fmt::format("-0x{:X}", -v) : fmt::format("+0x{:X}", v);
}

// `r<src>±0x<imm>` or a bare unsigned immediate when src is absent.
std::string value_operand(Reg src, int32_t imm) {
  if (src == reg::none) return fmt::format("0x{:X}", static_cast<uint32_t>(imm));
  return fmt::format("r{}{}", src, signed_offset(imm));
}

std::string memory_operand(Reg base, int32_t imm) {
  if (base == reg::none) return fmt::format("[0x{:08X}]", static_cast<uint32_t>(imm));
  return fmt::format("[r{}{}]", base, signed_offset(imm));
}

}  // namespace

const char* opcode_name(Opcode op) { return kOpcodeNames.at(static_cast<size_t>(op)); }
const char* cond_name(Cond c) { return kCondNames.at(static_cast<size_t>(c)); }

void check_encodable(const Instruction& instr) {
  const auto op = static_cast<unsigned>(instr.op);
  if (op >= kOpcodeCount) {
    throw XirError(XirErrc::unknown_opcode, fmt::format("unknown opcode {}", op));
  }
  if ((instr.flags & kWidthMask) == 3) {
    throw XirError(XirErrc::invalid_width, "width code 3 is reserved");
  }
  if (instr.flags & kReservedMask) {
    throw XirError(XirErrc::reserved_bits_set,
                   fmt::format("reserved flag bits set: 0x{:02X}", instr.flags));
  }
  const unsigned cond = (instr.flags & kCondMask) >> kCondShift;
  if (instr.op != Opcode::jmp && cond != 0) {
    throw XirError(XirErrc::reserved_bits_set,
                   fmt::format("condition bits set on {}", opcode_name(instr.op)));
  }
  if (cond >= kCondCount) {
    throw XirError(XirErrc::invalid_condition, fmt::format("invalid condition {}", cond));
  }
}

EncodedInstruction encode(const Instruction& instr) {
  check_encodable(instr);
  const auto imm = static_cast<uint32_t>(instr.imm);
  return {static_cast<uint8_t>(instr.op),
          instr.flags,
          instr.dst,
          instr.src,
          static_cast<uint8_t>(imm),
          static_cast<uint8_t>(imm >> 8),
          static_cast<uint8_t>(imm >> 16),
          static_cast<uint8_t>(imm >> 24)};
}

Instruction decode(std::span<const uint8_t> record) {
  if (record.size() != kEncodedSize) {
    throw XirError(XirErrc::bad_length,
                   fmt::format("record is {} bytes, expected {}", record.size(), kEncodedSize));
  }
  if (record[0] >= kOpcodeCount) {
    throw XirError(XirErrc::unknown_opcode, fmt::format("unknown opcode {}", record[0]));
  }
  const uint32_t imm = uint32_t{record[4]} | (uint32_t{record[5]} << 8) |
                       (uint32_t{record[6]} << 16) | (uint32_t{record[7]} << 24);
  Instruction instr{static_cast<Opcode>(record[0]), record[1], record[2], record[3],
                    static_cast<int32_t>(imm)};
  check_encodable(instr);
  return instr;
}

std::vector<uint8_t> serialize(std::span<const Instruction> instrs) {
  std::vector<uint8_t> out;
  out.reserve(instrs.size() * kEncodedSize);
  for (const auto& i : instrs) {
    const auto rec = encode(i);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  return out;
}

bool is_canonical(const Instruction& i) {
  try {
    check_encodable(i);
  } catch (const XirError&) {
    return false;
  }
  if (!is_control(i.op)) return true;
  if (i.width() != Width::b32 || i.dst != 0) return false;
  switch (i.op) {
    case Opcode::jmp:
    case Opcode::syscall:
      return i.src == 0;
    case Opcode::fsave:
    case Opcode::frestore:
      return i.src == 0 && i.imm == 0;
    default:
      return true;
  }
}

std::string render(const Instruction& i) {
  const char* name = opcode_name(i.op);
  const unsigned bits = width_bits(i.width());
  switch (i.op) {
    case Opcode::jmp: {
      const Cond c = i.cond();
      const std::string rel =
          i.imm < 0 ? fmt::format("-0x{:X}", -int64_t{i.imm}) : fmt::format("+0x{:X}", i.imm);
      if (c == Cond::always) return fmt::format("JMP {}", rel);
      return fmt::format("JMP.{} {}", cond_name(c), rel);
    }
    case Opcode::ret:
      return fmt::format("RET {}", value_operand(i.src, i.imm));
    case Opcode::fsave:
    case Opcode::frestore:
      return name;
    case Opcode::syscall:
      return fmt::format("SYSCALL 0x{:X}", static_cast<uint32_t>(i.imm));
    case Opcode::ld:
      return fmt::format("LD{} r{}, {}", bits, i.dst, memory_operand(i.src, i.imm));
    case Opcode::st:
      return fmt::format("ST{} {}, r{}", bits, memory_operand(i.dst, i.imm), i.src);
    default:
      return fmt::format("{}{} r{}, {}", name, bits, i.dst, value_operand(i.src, i.imm));
  }
}

std::vector<std::string> validate_block(const CodeBlock& block) {
  std::vector<std::string> violations;
  const auto& code = block.instrs;
  if (code.empty() || code.back().op != Opcode::ret) {
    violations.emplace_back("missing terminator");
  }
  for (size_t idx = 0; idx < code.size(); ++idx) {
    const auto& i = code[idx];
    try {
      check_encodable(i);
    } catch (const XirError& e) {
      violations.push_back(fmt::format("invalid instruction at {}: {}", idx, e.what()));
      continue;
    }
    if (i.op == Opcode::ret && idx + 1 != code.size()) {
      violations.push_back(fmt::format("ret before last at {}", idx));
    }
    if (i.op == Opcode::jmp) {
      const int64_t target = static_cast<int64_t>(idx) + 1 + i.imm;
      if (target < 0 || target >= static_cast<int64_t>(code.size())) {
        violations.push_back(fmt::format("jmp target out of block at {}", idx));
      }
    }
  }
  if (!block.origin.empty() && block.origin.size() != code.size()) {
    violations.emplace_back("origin table size mismatch");
  }
  return violations;
}

}  // namespace pinky::xir
