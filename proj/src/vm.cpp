#include "pinky/vm.hpp"

#include <fmt/format.h>

#include "pinky/alu.hpp"
#include "pinky/guest_memory.hpp"
#include "pinky/mmu.hpp"

namespace pinky {

using namespace xir;

const char* fault_name(FaultKind k) {
  switch (k) {
    case FaultKind::unmapped_read: return "UnmappedRead";
    case FaultKind::unmapped_write: return "UnmappedWrite";
    case FaultKind::protection_read: return "ProtectionRead";
    case FaultKind::protection_write: return "ProtectionWrite";
    case FaultKind::divide_error: return "DivideError";
    case FaultKind::unmapped_fetch: return "UnmappedFetch";
    case FaultKind::bad_block: return "BadBlock";
  }
  return "?";
}

std::string FaultInfo::describe() const {
  if (kind == FaultKind::divide_error || kind == FaultKind::bad_block) {
    return fmt::format("{} at pc 0x{:08X}", fault_name(kind), pc);
  }
  if (kind == FaultKind::unmapped_fetch) return fmt::format("{} at 0x{:08X}", fault_name(kind), va);
  return fmt::format("{} of {} bytes at 0x{:08X} (pc 0x{:08X})", fault_name(kind), size, va, pc);
}

namespace {

inline uint32_t value_of(const MachineState& s, const Instruction& in) {
  return (in.src ? s.regs[in.src] : 0u) + static_cast<uint32_t>(in.imm);
}

inline void set_flags(MachineState& s, const alu::Result& r) {
  s.regs[reg::flags] = alu::merge(s.regs[reg::flags], r);
}

inline StepResult fault_at(const CodeBlock& b, uint32_t idx, FaultInfo f) {
  f.pc = idx < b.origin.size() ? b.origin[idx] : b.entry_va;
  f.index = idx;
  return {true, idx, BlockExit::faulted(f)};
}

inline StepResult exec(MachineState& s, Mmu& mmu, const CodeBlock& b, uint32_t idx,
                       Counters* counters) {
  const Instruction& in = b.instrs[idx];
  const Width w = in.width();
  const uint32_t mask = width_mask(w);
  if (counters) ++counters->instrs_interpreted;

  auto alu_op = [&](const alu::Result& r, bool store) {
    if (store) detail::write_reg(s, in.dst, r.value, mask);
    set_flags(s, r);
    return StepResult{false, idx + 1, {}};
  };
  const uint32_t a = s.regs[in.dst];

  switch (in.op) {
    case Opcode::mv:
      detail::write_reg(s, in.dst, value_of(s, in), mask);
      return {false, idx + 1, {}};
    case Opcode::ld: {
      uint32_t v;
      FaultInfo f;
      if (!detail::guest_load(mmu, value_of(s, in), width_bytes(w), v, f)) return fault_at(b, idx, f);
      if (counters) ++counters->mem_loads;
      detail::write_reg(s, in.dst, v, mask);
      return {false, idx + 1, {}};
    }
    case Opcode::st: {
      FaultInfo f;
      const uint32_t v = in.src ? s.regs[in.src] : 0u;
      if (!detail::guest_store(mmu, a + static_cast<uint32_t>(in.imm), width_bytes(w), v, f)) {
        return fault_at(b, idx, f);
      }
      if (counters) ++counters->mem_stores;
      return {false, idx + 1, {}};
    }
    case Opcode::add: return alu_op(alu::add(a, value_of(s, in), 0, w), true);
    case Opcode::addc:
      return alu_op(alu::add(a, value_of(s, in), s.regs[reg::flags] & flag::cf, w), true);
    case Opcode::sub: return alu_op(alu::sub(a, value_of(s, in), 0, w), true);
    case Opcode::subc:
      return alu_op(alu::sub(a, value_of(s, in), s.regs[reg::flags] & flag::cf, w), true);
    case Opcode::cmp: return alu_op(alu::sub(a, value_of(s, in), 0, w), false);
    case Opcode::and_: return alu_op(alu::logic(a & value_of(s, in), w), true);
    case Opcode::or_: return alu_op(alu::logic(a | value_of(s, in), w), true);
    case Opcode::xor_: return alu_op(alu::logic(a ^ value_of(s, in), w), true);
    case Opcode::not_:
      detail::write_reg(s, in.dst, ~value_of(s, in), mask);
      return {false, idx + 1, {}};
    case Opcode::sl: return alu_op(alu::shl(a, value_of(s, in) & mask, w), true);
    case Opcode::sr: return alu_op(alu::shr(a, value_of(s, in) & mask, w), true);
    case Opcode::rl: return alu_op(alu::rol(a, value_of(s, in) & mask, w), true);
    case Opcode::rr: return alu_op(alu::ror(a, value_of(s, in) & mask, w), true);
    case Opcode::mul: {
      const auto r = alu::mul(a, value_of(s, in), w);
      detail::write_reg(s, in.dst, r.low, mask);
      s.regs[reg::wide_hi] = r.high;
      s.regs[reg::flags] = (s.regs[reg::flags] & ~r.written) | (r.flags & r.written);
      return {false, idx + 1, {}};
    }
    case Opcode::div: {
      uint32_t q, rem;
      if (!alu::div(s.regs[reg::wide_hi], a, value_of(s, in), w, q, rem)) {
        FaultInfo f;
        f.kind = FaultKind::divide_error;
        return fault_at(b, idx, f);
      }
      detail::write_reg(s, in.dst, q, mask);
      s.regs[reg::wide_hi] = rem;
      return {false, idx + 1, {}};
    }
    case Opcode::jmp: {
      if (!alu::condition_holds(in.cond(), s.regs[reg::flags])) return {false, idx + 1, {}};
      const int64_t target = int64_t{idx} + 1 + in.imm;
      if (target < 0 || target >= static_cast<int64_t>(b.instrs.size())) {
        FaultInfo f;
        f.kind = FaultKind::bad_block;
        return fault_at(b, idx, f);
      }
      return {false, static_cast<uint32_t>(target), {}};
    }
    case Opcode::fsave:
      s.regs[reg::shadow] = s.regs[reg::flags];
      return {false, idx + 1, {}};
    case Opcode::frestore:
      s.regs[reg::flags] = s.regs[reg::shadow];
      return {false, idx + 1, {}};
    case Opcode::ret:
      return {true, idx, BlockExit::next(value_of(s, in))};
    case Opcode::syscall:
      return {true, idx, BlockExit::sys(static_cast<uint32_t>(in.imm), idx + 1)};
  }
  FaultInfo f;
  f.kind = FaultKind::bad_block;
  return fault_at(b, idx, f);
}

}  // namespace

StepResult step(MachineState& state, Mmu& mmu, const CodeBlock& block, uint32_t idx,
                Counters* counters) {
  if (idx >= block.instrs.size()) {
    FaultInfo f;
    f.kind = FaultKind::bad_block;
    return fault_at(block, idx, f);
  }
  return exec(state, mmu, block, idx, counters);
}

BlockExit run_block(MachineState& state, Mmu& mmu, CodeBlock& block, Counters* counters,
                    uint32_t start) {
  if (start == 0) ++block.exec_count;
  uint32_t idx = start;
  const auto n = static_cast<uint32_t>(block.instrs.size());
  for (;;) {
    if (idx >= n) {
      FaultInfo f;
      f.kind = FaultKind::bad_block;
      return fault_at(block, idx, f).exit;
    }
    StepResult r = exec(state, mmu, block, idx, counters);
    if (r.exited) return r.exit;
    idx = r.next;
  }
}

}  // namespace pinky
