#include "pinky/translator.hpp"

#include <fmt/format.h>

#include <bit>

#include "pinky/config.hpp"
#include "pinky/mmu.hpp"

namespace pinky {

using namespace xir;
using x86::GuestInstruction;
using x86::Mnemonic;
using x86::Operand;

int32_t escape_syscall_id(Mnemonic m) {
  switch (m) {
    case Mnemonic::fabs: return sysno::fabs;
    case Mnemonic::fchs: return sysno::fchs;
    case Mnemonic::fsqrt: return sysno::fsqrt;
    case Mnemonic::fld1: return sysno::fld1;
    default: return -1;
  }
}

Reg TempAllocator::alloc() {
  for (unsigned i = 0; i < kCount; ++i) {
    if (!used_[i]) {
      used_.set(i);
      high_water_ = std::max(high_water_, in_use());
      return static_cast<Reg>(reg::temp_first + i);
    }
  }
  throw x86::GuestError(x86::GuestErrc::temp_exhausted, 0, "temporary registers exhausted");
}

void TempAllocator::free(Reg r) {
  if (reg::is_temp(r)) used_.reset(r - reg::temp_first);
}

namespace {

constexpr Reg guest(uint8_t x86reg) { return static_cast<Reg>(reg::eax + (x86reg & 7)); }

constexpr Instruction op(Opcode o, Width w, Reg dst, Reg src, int32_t imm = 0) {
  return make(o, w, dst, src, imm);
}

struct Value {
  Reg src = 0;
  int32_t imm = 0;
};

struct Address {
  Reg base = 0;
  int32_t disp = 0;
};

// Per-instruction lowering context. Every temp taken here is released
// when the context goes out of scope.
class Lowering {
 public:
  Lowering(const GuestInstruction& g, Emitter& out, TempAllocator& temps)
      : g_(g), e_(out), temps_(temps) {}
  ~Lowering() {
    for (Reg r : held_) temps_.free(r);
  }

  void run();

 private:
  Reg tmp() {
    const Reg r = temps_.alloc();
    held_.push_back(r);
    return r;
  }
  void emit(const Instruction& i) { e_.emit(i); }

  // ALU ops whose r1 update is not wanted while guest flags sit in r1.
  void scratch_alu(const Instruction& i) {
    if (r1_live_) emit(op(Opcode::fsave, Width::b32, 0, 0));
    emit(i);
    if (r1_live_) emit(op(Opcode::frestore, Width::b32, 0, 0));
  }

  void load_flags() {
    emit(op(Opcode::mv, Width::b32, reg::flags, reg::eflags));
    r1_live_ = true;
  }
  void store_flags() {
    emit(op(Opcode::mv, Width::b32, reg::eflags, reg::flags));
    r1_live_ = false;
  }
  void flagged(Opcode o, Width w, Reg dst, Value v) {
    load_flags();
    emit(op(o, w, dst, v.src, v.imm));
    store_flags();
  }

  static bool plain_reg(const Operand& o) { return o.is_reg() && !o.is_high_byte(); }

  Address address(const Operand& m) {
    if (!m.has_index) return {m.has_base ? guest(m.base) : Reg{0}, m.disp};
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, guest(m.index)));
    if (m.scale > 1) {
      scratch_alu(op(Opcode::sl, Width::b32, t, 0, std::countr_zero(unsigned{m.scale})));
    }
    if (m.has_base) scratch_alu(op(Opcode::add, Width::b32, t, guest(m.base)));
    return {t, m.disp};
  }

  Reg extract_high(const Operand& o) {
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, guest(o.reg & 3)));
    scratch_alu(op(Opcode::sr, Width::b32, t, 0, 8));
    return t;
  }

  void compose_high(uint8_t x86reg, Reg value) {
    const Reg g = guest(x86reg & 3);
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, value));
    scratch_alu(op(Opcode::and_, Width::b32, t, 0, 0xFF));
    scratch_alu(op(Opcode::sl, Width::b32, t, 0, 8));
    scratch_alu(op(Opcode::and_, Width::b32, g, 0, static_cast<int32_t>(0xFFFF00FFu)));
    scratch_alu(op(Opcode::or_, Width::b32, g, t));
  }

  Value read(const Operand& o) {
    switch (o.kind) {
      case x86::OperandKind::imm:
        return {0, static_cast<int32_t>(o.imm)};
      case x86::OperandKind::reg:
        if (o.is_high_byte()) return {extract_high(o), 0};
        return {guest(o.reg), 0};
      case x86::OperandKind::mem: {
        const Address a = address(o);
        const Reg t = tmp();
        emit(op(Opcode::ld, o.width, t, a.base, a.disp));
        return {t, 0};
      }
      default:
        break;
    }
    return {};
  }

  // Copies an operand into a fresh temp; `where` receives the address of
  // a memory operand so the result can be stored back.
  Reg into_temp(const Operand& o, Address* where = nullptr) {
    if (o.is_mem()) {
      const Address a = address(o);
      if (where) *where = a;
      const Reg t = tmp();
      emit(op(Opcode::ld, o.width, t, a.base, a.disp));
      return t;
    }
    if (o.is_high_byte()) return extract_high(o);
    const Reg t = tmp();
    if (o.is_reg()) {
      emit(op(Opcode::mv, o.width, t, guest(o.reg)));
    } else {
      emit(op(Opcode::mv, o.width, t, 0, static_cast<int32_t>(o.imm)));
    }
    return t;
  }

  void write(const Operand& o, Reg value, const Address& a) {
    if (o.is_mem()) {
      emit(op(Opcode::st, o.width, a.base, value, a.disp));
    } else if (o.is_high_byte()) {
      compose_high(o.reg, value);
    } else if (guest(o.reg) != value) {
      emit(op(Opcode::mv, o.width, guest(o.reg), value));
    }
  }

  Reg materialize(Value v) {
    if (v.src != 0 && v.imm == 0) return v.src;
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, v.src, v.imm));
    return t;
  }

  // Two-operand ALU form; `store` is false for cmp.
  void binary(Opcode o, bool store) {
    const Operand& d = g_.ops[0];
    const Width w = d.width;
    if (plain_reg(d)) {
      const Value v = read(g_.ops[1]);
      flagged(o, w, guest(d.reg), v);
      return;
    }
    Address a;
    const Reg t = into_temp(d, &a);
    const Value v = read(g_.ops[1]);
    flagged(o, w, t, v);
    if (store) write(d, t, a);
  }

  void test() {
    const Reg t = into_temp(g_.ops[0]);
    const Value v = read(g_.ops[1]);
    flagged(Opcode::and_, g_.ops[0].width, t, v);
  }

  // inc/dec leave CF untouched.
  void inc_dec(Opcode o) {
    const Operand& d = g_.ops[0];
    const Width w = d.width;
    const Reg cf = tmp();
    emit(op(Opcode::mv, Width::b32, cf, reg::eflags));
    emit(op(Opcode::and_, Width::b32, cf, 0, 1));
    Address a;
    const Reg target = plain_reg(d) ? guest(d.reg) : into_temp(d, &a);
    load_flags();
    emit(op(o, w, target, 0, 1));
    const Reg f = tmp();
    emit(op(Opcode::mv, Width::b32, f, reg::flags));
    r1_live_ = false;
    emit(op(Opcode::and_, Width::b32, f, 0, static_cast<int32_t>(~flag::cf)));
    emit(op(Opcode::or_, Width::b32, f, cf));
    emit(op(Opcode::mv, Width::b32, reg::eflags, f));
    if (!plain_reg(d)) write(d, target, a);
  }

  void neg() {
    const Operand& d = g_.ops[0];
    Address a;
    const Reg x = plain_reg(d) ? guest(d.reg) : into_temp(d, &a);
    const Reg r = tmp();
    emit(op(Opcode::mv, Width::b32, r, 0, 0));
    flagged(Opcode::sub, d.width, r, {x, 0});
    write(d, r, a);
  }

  void not_() {
    const Operand& d = g_.ops[0];
    if (plain_reg(d)) {
      emit(op(Opcode::not_, d.width, guest(d.reg), guest(d.reg)));
      return;
    }
    Address a;
    const Reg t = into_temp(d, &a);
    emit(op(Opcode::not_, d.width, t, t));
    write(d, t, a);
  }

  void mul() {
    const Width w = g_.ops[0].width;
    const Value v = read(g_.ops[0]);
    flagged(Opcode::mul, w, reg::eax, v);
    if (w == Width::b8) {
      compose_high(4, reg::wide_hi);
    } else {
      emit(op(Opcode::mv, w, reg::edx, reg::wide_hi));
    }
  }

  void div() {
    const Width w = g_.ops[0].width;
    const Value v = read(g_.ops[0]);
    if (w == Width::b8) {
      const Reg ah = extract_high(x86::Operand{x86::OperandKind::reg, Width::b8, 4});
      emit(op(Opcode::mv, Width::b32, reg::wide_hi, ah));
    } else {
      emit(op(Opcode::mv, Width::b32, reg::wide_hi, reg::edx));
    }
    emit(op(Opcode::div, w, reg::eax, v.src, v.imm));
    if (w == Width::b8) {
      compose_high(4, reg::wide_hi);
    } else {
      emit(op(Opcode::mv, w, reg::edx, reg::wide_hi));
    }
  }

  void shift(Opcode o) {
    const Operand& d = g_.ops[0];
    const Value count = count_value();
    if (plain_reg(d)) {
      flagged(o, d.width, guest(d.reg), count);
      return;
    }
    Address a;
    const Reg t = into_temp(d, &a);
    flagged(o, d.width, t, count);
    write(d, t, a);
  }

  Value count_value() {
    const Operand& c = g_.ops[1];
    if (c.is_imm()) return {0, static_cast<int32_t>(c.imm)};
    return {reg::ecx, 0};
  }

  // sar as ((x ^ s) >> n) ^ s with s the sign mask; CF is recovered
  // from the logical shift and the sign.
  void sar() {
    const Operand& d = g_.ops[0];
    const Width w = d.width;
    const int32_t top = static_cast<int32_t>(width_bits(w) - 1);
    Address a;
    const Reg x = into_temp(d, &a);
    const Value count = count_value();
    const Reg n = tmp();
    emit(op(Opcode::mv, Width::b32, n, count.src, count.imm));
    emit(op(Opcode::and_, Width::b32, n, 0, 31));
    emit(op(Opcode::cmp, Width::b32, n, 0, 0));
    const size_t skip = e_.emit(make_jmp(Cond::eq, 0));

    const Reg sign = tmp();
    emit(op(Opcode::mv, Width::b32, sign, x));
    emit(op(Opcode::sr, w, sign, 0, top));
    const Reg mask = tmp();
    emit(op(Opcode::mv, Width::b32, mask, 0, 0));
    emit(op(Opcode::sub, w, mask, sign));
    emit(op(Opcode::xor_, w, x, mask));
    emit(op(Opcode::sr, w, x, n));
    const Reg cf = tmp();
    emit(op(Opcode::mv, Width::b32, cf, reg::flags));
    emit(op(Opcode::and_, Width::b32, cf, 0, 1));
    emit(op(Opcode::xor_, w, cf, sign));
    load_flags();
    emit(op(Opcode::xor_, w, x, mask));
    const Reg f = tmp();
    emit(op(Opcode::mv, Width::b32, f, reg::flags));
    r1_live_ = false;
    emit(op(Opcode::or_, Width::b32, f, cf));
    emit(op(Opcode::mv, Width::b32, reg::eflags, f));

    e_.patch_jump(skip, e_.here());
    write(d, x, a);
  }

  void mov() {
    const Operand& d = g_.ops[0];
    const Operand& s = g_.ops[1];
    const Width w = d.width;
    if (plain_reg(d)) {
      if (s.is_mem()) {
        const Address a = address(s);
        emit(op(Opcode::ld, w, guest(d.reg), a.base, a.disp));
      } else {
        const Value v = read(s);
        emit(op(Opcode::mv, w, guest(d.reg), v.src, v.imm));
      }
      return;
    }
    if (d.is_high_byte()) {
      const Reg v = s.is_imm() ? into_temp(s) : materialize(read(s));
      compose_high(d.reg, v);
      return;
    }
    const Address a = address(d);
    Reg v;
    if (plain_reg(s)) {
      v = guest(s.reg);
    } else {
      v = into_temp(s);
    }
    emit(op(Opcode::st, w, a.base, v, a.disp));
  }

  void movzx() {
    const Operand& s = g_.ops[1];
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, 0, 0));
    if (s.is_mem()) {
      const Address a = address(s);
      emit(op(Opcode::ld, s.width, t, a.base, a.disp));
    } else {
      const Value v = read(s);
      emit(op(Opcode::mv, s.width, t, v.src, v.imm));
    }
    emit(op(Opcode::mv, Width::b32, guest(g_.ops[0].reg), t));
  }

  void lea() {
    const Address a = address(g_.ops[1]);
    emit(op(Opcode::mv, Width::b32, guest(g_.ops[0].reg), a.base, a.disp));
  }

  void push_value(Reg v) {
    emit(op(Opcode::st, Width::b32, reg::esp, v, -4));
    emit(op(Opcode::mv, Width::b32, reg::esp, reg::esp, -4));
  }

  void push() {
    const Operand& s = g_.ops[0];
    push_value(s.is_reg() ? guest(s.reg) : into_temp(s));
  }

  void pop() {
    const Operand& d = g_.ops[0];
    if (d.is_reg()) {
      emit(op(Opcode::ld, Width::b32, guest(d.reg), reg::esp, 0));
      if (d.reg != x86::kEsp) emit(op(Opcode::mv, Width::b32, reg::esp, reg::esp, 4));
      return;
    }
    const Reg t = tmp();
    emit(op(Opcode::ld, Width::b32, t, reg::esp, 0));
    emit(op(Opcode::mv, Width::b32, reg::esp, reg::esp, 4));
    const Address a = address(d);
    emit(op(Opcode::st, Width::b32, a.base, t, a.disp));
  }

  void popfd() {
    const Reg t = tmp();
    emit(op(Opcode::ld, Width::b32, t, reg::esp, 0));
    emit(op(Opcode::and_, Width::b32, t, 0, 0xCD5));
    emit(op(Opcode::or_, Width::b32, t, 0, 0x202));
    emit(op(Opcode::mv, Width::b32, reg::eflags, t));
    emit(op(Opcode::mv, Width::b32, reg::esp, reg::esp, 4));
  }

  void ret_to(Value v) { emit(op(Opcode::ret, Width::b32, 0, v.src, v.imm)); }

  void call() {
    const int32_t next = static_cast<int32_t>(g_.next_va());
    if (g_.op_count == 0) {
      emit(op(Opcode::mv, Width::b32, reg::esp, reg::esp, -4));
      const Reg t = tmp();
      emit(op(Opcode::mv, Width::b32, t, 0, next));
      emit(op(Opcode::st, Width::b32, reg::esp, t, 0));
      ret_to({0, static_cast<int32_t>(g_.target)});
      return;
    }
    const Operand& s = g_.ops[0];
    Reg target = 0;
    const bool early = s.uses_reg(x86::kEsp);
    if (early) target = s.is_reg() ? materialize_copy(guest(s.reg)) : into_temp(s);
    emit(op(Opcode::mv, Width::b32, reg::esp, reg::esp, -4));
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, 0, next));
    emit(op(Opcode::st, Width::b32, reg::esp, t, 0));
    if (!early) {
      if (s.is_reg()) {
        target = guest(s.reg);
      } else {
        const Address a = address(s);
        emit(op(Opcode::ld, Width::b32, t, a.base, a.disp));
        target = t;
      }
    }
    ret_to({target, 0});
  }

  Reg materialize_copy(Reg r) {
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, r));
    return t;
  }

  void jmp() {
    if (g_.op_count == 0) {
      ret_to({0, static_cast<int32_t>(g_.target)});
      return;
    }
    const Operand& s = g_.ops[0];
    ret_to({s.is_reg() ? guest(s.reg) : into_temp(s), 0});
  }

  void jcc() {
    const Reg t = tmp();
    emit(op(Opcode::mv, Width::b32, t, 0, static_cast<int32_t>(g_.target)));
    load_flags();
    e_.emit(make_jmp(g_.cond, 1));
    r1_live_ = false;
    emit(op(Opcode::mv, Width::b32, t, 0, static_cast<int32_t>(g_.next_va())));
    ret_to({t, 0});
  }

  void ret() {
    const Reg t = tmp();
    const int32_t extra = g_.op_count ? static_cast<int32_t>(g_.ops[0].imm) : 0;
    emit(op(Opcode::ld, Width::b32, t, reg::esp, 0));
    emit(op(Opcode::mv, Width::b32, reg::esp, reg::esp, 4 + extra));
    ret_to({t, 0});
  }

  void xchg() {
    const Operand& a = g_.ops[0];
    const Operand& b = g_.ops[1];
    const Address none;
    const Reg va = into_temp(a);
    const Reg vb = into_temp(b);
    write(a, vb, none);
    write(b, va, none);
  }

  const GuestInstruction& g_;
  Emitter& e_;
  TempAllocator& temps_;
  std::vector<Reg> held_;
  bool r1_live_ = false;
};

void Lowering::run() {
  switch (g_.mnemonic) {
    case Mnemonic::mov: return mov();
    case Mnemonic::movzx: return movzx();
    case Mnemonic::lea: return lea();
    case Mnemonic::push: return push();
    case Mnemonic::pop: return pop();
    case Mnemonic::pushfd: return push_value(reg::eflags);
    case Mnemonic::popfd: return popfd();
    case Mnemonic::add: return binary(Opcode::add, true);
    case Mnemonic::adc: return binary(Opcode::addc, true);
    case Mnemonic::sub: return binary(Opcode::sub, true);
    case Mnemonic::sbb: return binary(Opcode::subc, true);
    case Mnemonic::and_: return binary(Opcode::and_, true);
    case Mnemonic::or_: return binary(Opcode::or_, true);
    case Mnemonic::xor_: return binary(Opcode::xor_, true);
    case Mnemonic::cmp: return binary(Opcode::cmp, false);
    case Mnemonic::test: return test();
    case Mnemonic::inc: return inc_dec(Opcode::add);
    case Mnemonic::dec: return inc_dec(Opcode::sub);
    case Mnemonic::neg: return neg();
    case Mnemonic::not_: return not_();
    case Mnemonic::mul: return mul();
    case Mnemonic::div: return div();
    case Mnemonic::shl: return shift(Opcode::sl);
    case Mnemonic::shr: return shift(Opcode::sr);
    case Mnemonic::rol: return shift(Opcode::rl);
    case Mnemonic::ror: return shift(Opcode::rr);
    case Mnemonic::sar: return sar();
    case Mnemonic::jmp: return jmp();
    case Mnemonic::jcc: return jcc();
    case Mnemonic::call: return call();
    case Mnemonic::ret: return ret();
    case Mnemonic::nop: return;
    case Mnemonic::clc:
      emit(op(Opcode::and_, Width::b32, reg::eflags, 0, static_cast<int32_t>(~flag::cf)));
      return;
    case Mnemonic::stc:
      emit(op(Opcode::or_, Width::b32, reg::eflags, 0, static_cast<int32_t>(flag::cf)));
      return;
    case Mnemonic::xchg: return xchg();
    case Mnemonic::fabs:
    case Mnemonic::fchs:
    case Mnemonic::fsqrt:
    case Mnemonic::fld1:
      emit(op(Opcode::syscall, Width::b32, 0, 0, escape_syscall_id(g_.mnemonic)));
      ret_to({0, static_cast<int32_t>(g_.next_va())});
      return;
    case Mnemonic::emucall:
      emit(op(Opcode::syscall, Width::b32, 0, 0, static_cast<int32_t>(g_.ops[0].imm)));
      ret_to({reg::host_ret, 0});
      return;
  }
}

}  // namespace

void Translator::lower(const GuestInstruction& g, Emitter& out) {
  out.guest_va = g.va;
  Lowering l(g, out, temps_);
  l.run();
}

CodeBlock Translator::translate(const Mmu& mmu, uint32_t va) {
  ++invocations_;
  Emitter e;
  std::vector<GuestInstruction> insns;
  std::vector<TraceEntry> trace;
  insns.reserve(max_instrs_);
  uint32_t pc = va;
  bool terminated = false;
  while (insns.size() < max_instrs_) {
    if (!insns.empty() && split_ && split_->count(pc)) break;
    GuestInstruction g;
    try {
      g = x86::decode_guest(mmu, pc);
    } catch (const x86::GuestError&) {
      if (insns.empty()) throw;
      break;
    }
    insns.push_back(g);
    const size_t first = e.here();
    lower(insns.back(), e);
    trace.push_back({nullptr, first, e.here()});
    pc = g.next_va();
    if (g.is_control_transfer()) {
      terminated = true;
      break;
    }
  }
  if (!terminated) {
    e.guest_va = insns.back().va;
    e.emit(make(Opcode::ret, Width::b32, 0, 0, static_cast<int32_t>(pc)));
    trace.back().last = e.here();
  }

  CodeBlock block;
  block.entry_va = va;
  block.instrs = std::move(e.code);
  block.origin = std::move(e.origin);
  block.guest_len = pc - va;
  block.guest_count = static_cast<uint32_t>(insns.size());

  if (logger_ && logger_->enabled(LogModule::ir, LogLevel::info)) {
    for (size_t i = 0; i < insns.size(); ++i) trace[i].insn = &insns[i];
    logger_->log(LogModule::ir, LogLevel::info, "Source -> IR:");
    logger_->raw(LogModule::ir, LogLevel::info, format_trace(trace, block.instrs));
  }
  return block;
}

std::string format_trace(const std::vector<TraceEntry>& entries,
                         const std::vector<Instruction>& code) {
  constexpr size_t kMarkerColumn = 35;
  std::string out;
  for (const auto& t : entries) {
    const auto addr = fmt::format("{:08X}", t.insn->va);
    std::string left = fmt::format("{} {}  ", addr, x86::format(*t.insn));
    if (left.size() < kMarkerColumn) left.append(kMarkerColumn - left.size(), '-');
    if (t.first == t.last) {
      out += left + "-\n";
      continue;
    }
    for (size_t i = t.first; i < t.last; ++i) {
      if (i != t.first) {
        left = addr;
        left.append(kMarkerColumn - left.size(), ' ');
      }
      out += left;
      out += i + 1 == t.last ? '-' : '+';
      out += "  ";
      out += render(code[i]);
      out += '\n';
    }
  }
  return out;
}

}  // namespace pinky
