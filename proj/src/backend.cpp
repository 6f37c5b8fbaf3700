#include "pinky/backend.hpp"

#include <vector>

#include "pinky/alu.hpp"
#include "pinky/guest_memory.hpp"

namespace pinky {

using namespace xir;

namespace {

struct PreOp;

struct Ctx {
  MachineState* s;
  Mmu* mmu;
  Counters* c;
  const PreOp* base;
  const CodeBlock* block;
  BlockExit exit;
};

// Returns the next op, or nullptr once ctx.exit is set.
using Handler = const PreOp* (*)(Ctx&, const PreOp*);

struct PreOp {
  Handler fn;
  Reg dst;
  Reg src;
  uint32_t imm;
  const PreOp* target;  // jmp destination
  Cond cond;
};

struct Predecoded final : CompiledForm {
  std::vector<PreOp> ops;
};

template <bool Src>
inline uint32_t value(const Ctx& c, const PreOp* op) {
  if constexpr (Src) return c.s->regs[op->src] + op->imm;
  return op->imm;
}

template <Width W>
inline void put(Ctx& c, Reg dst, uint32_t v) {
  detail::write_reg(*c.s, dst, v, width_mask(W));
}

inline const PreOp* fault(Ctx& c, const PreOp* op, FaultInfo f) {
  const auto idx = static_cast<uint32_t>(op - c.base);
  f.pc = idx < c.block->origin.size() ? c.block->origin[idx] : c.block->entry_va;
  f.index = idx;
  c.exit = BlockExit::faulted(f);
  return nullptr;
}

template <Width W, bool Src>
const PreOp* h_mv(Ctx& c, const PreOp* op) {
  put<W>(c, op->dst, value<Src>(c, op));
  return op + 1;
}

template <Width W, bool Src>
const PreOp* h_ld(Ctx& c, const PreOp* op) {
  uint32_t v;
  FaultInfo f;
  if (!detail::guest_load(*c.mmu, value<Src>(c, op), width_bytes(W), v, f)) [[unlikely]] {
    return fault(c, op, f);
  }
  ++c.c->mem_loads;
  put<W>(c, op->dst, v);
  return op + 1;
}

template <Width W, bool Src>
const PreOp* h_st(Ctx& c, const PreOp* op) {
  FaultInfo f;
  const uint32_t v = Src ? c.s->regs[op->src] : 0u;
  if (!detail::guest_store(*c.mmu, c.s->regs[op->dst] + op->imm, width_bytes(W), v, f)) [[unlikely]] {
    return fault(c, op, f);
  }
  ++c.c->mem_stores;
  return op + 1;
}

template <Opcode O, Width W>
inline alu::Result compute(uint32_t a, uint32_t v, uint32_t flags) {
  if constexpr (O == Opcode::add) return alu::add(a, v, 0, W);
  if constexpr (O == Opcode::addc) return alu::add(a, v, flags & flag::cf, W);
  if constexpr (O == Opcode::sub || O == Opcode::cmp) return alu::sub(a, v, 0, W);
  if constexpr (O == Opcode::subc) return alu::sub(a, v, flags & flag::cf, W);
  if constexpr (O == Opcode::and_) return alu::logic(a & v, W);
  if constexpr (O == Opcode::or_) return alu::logic(a | v, W);
  if constexpr (O == Opcode::xor_) return alu::logic(a ^ v, W);
  if constexpr (O == Opcode::sl) return alu::shl(a, v & width_mask(W), W);
  if constexpr (O == Opcode::sr) return alu::shr(a, v & width_mask(W), W);
  if constexpr (O == Opcode::rl) return alu::rol(a, v & width_mask(W), W);
  if constexpr (O == Opcode::rr) return alu::ror(a, v & width_mask(W), W);
  return {};
}

template <Opcode O, Width W, bool Src>
const PreOp* h_alu(Ctx& c, const PreOp* op) {
  uint32_t& fl = c.s->regs[reg::flags];
  const alu::Result r = compute<O, W>(c.s->regs[op->dst], value<Src>(c, op), fl);
  if constexpr (O != Opcode::cmp) put<W>(c, op->dst, r.value);
  fl = alu::merge(fl, r);
  return op + 1;
}

template <Width W, bool Src>
const PreOp* h_not(Ctx& c, const PreOp* op) {
  put<W>(c, op->dst, ~value<Src>(c, op));
  return op + 1;
}

template <Width W, bool Src>
const PreOp* h_mul(Ctx& c, const PreOp* op) {
  const auto r = alu::mul(c.s->regs[op->dst], value<Src>(c, op), W);
  put<W>(c, op->dst, r.low);
  c.s->regs[reg::wide_hi] = r.high;
  uint32_t& fl = c.s->regs[reg::flags];
  fl = (fl & ~r.written) | (r.flags & r.written);
  return op + 1;
}

template <Width W, bool Src>
const PreOp* h_div(Ctx& c, const PreOp* op) {
  uint32_t q, rem;
  if (!alu::div(c.s->regs[reg::wide_hi], c.s->regs[op->dst], value<Src>(c, op), W, q, rem)) {
    FaultInfo f;
    f.kind = FaultKind::divide_error;
    return fault(c, op, f);
  }
  put<W>(c, op->dst, q);
  c.s->regs[reg::wide_hi] = rem;
  return op + 1;
}

const PreOp* h_jmp_always(Ctx&, const PreOp* op) { return op->target; }

const PreOp* h_jmp_cond(Ctx& c, const PreOp* op) {
  return alu::condition_holds(op->cond, c.s->regs[reg::flags]) ? op->target : op + 1;
}

const PreOp* h_bad_jump(Ctx& c, const PreOp* op) {
  if (op->cond != Cond::always && !alu::condition_holds(op->cond, c.s->regs[reg::flags])) {
    return op + 1;
  }
  FaultInfo f;
  f.kind = FaultKind::bad_block;
  return fault(c, op, f);
}

const PreOp* h_fsave(Ctx& c, const PreOp* op) {
  c.s->regs[reg::shadow] = c.s->regs[reg::flags];
  return op + 1;
}

const PreOp* h_frestore(Ctx& c, const PreOp* op) {
  c.s->regs[reg::flags] = c.s->regs[reg::shadow];
  return op + 1;
}

template <bool Src>
const PreOp* h_ret(Ctx& c, const PreOp* op) {
  c.exit = BlockExit::next(value<Src>(c, op));
  return nullptr;
}

const PreOp* h_syscall(Ctx& c, const PreOp* op) {
  c.exit = BlockExit::sys(op->imm, static_cast<uint32_t>(op - c.base) + 1);
  return nullptr;
}

const PreOp* h_fall_off(Ctx& c, const PreOp* op) {
  FaultInfo f;
  f.kind = FaultKind::bad_block;
  return fault(c, op, f);
}

template <template <Width, bool> class Pick>
Handler by_shape(Width w, bool src) {
  switch (w) {
    case Width::b8: return src ? Pick<Width::b8, true>::fn : Pick<Width::b8, false>::fn;
    case Width::b16: return src ? Pick<Width::b16, true>::fn : Pick<Width::b16, false>::fn;
    default: return src ? Pick<Width::b32, true>::fn : Pick<Width::b32, false>::fn;
  }
}

#define PINKY_PICK(name, expr)                   \
  template <Width W, bool S>                     \
  struct name {                                  \
    static constexpr Handler fn = expr;          \
  };

PINKY_PICK(PickMv, (h_mv<W, S>))
PINKY_PICK(PickLd, (h_ld<W, S>))
PINKY_PICK(PickSt, (h_st<W, S>))
PINKY_PICK(PickNot, (h_not<W, S>))
PINKY_PICK(PickMul, (h_mul<W, S>))
PINKY_PICK(PickDiv, (h_div<W, S>))
#undef PINKY_PICK

template <Opcode O>
struct PickAlu {
  template <Width W, bool S>
  struct T {
    static constexpr Handler fn = h_alu<O, W, S>;
  };
};

Handler select(const Instruction& in) {
  const Width w = in.width();
  const bool src = in.src != 0;
  switch (in.op) {
    case Opcode::mv: return by_shape<PickMv>(w, src);
    case Opcode::ld: return by_shape<PickLd>(w, src);
    case Opcode::st: return by_shape<PickSt>(w, src);
    case Opcode::not_: return by_shape<PickNot>(w, src);
    case Opcode::mul: return by_shape<PickMul>(w, src);
    case Opcode::div: return by_shape<PickDiv>(w, src);
    case Opcode::add: return by_shape<PickAlu<Opcode::add>::T>(w, src);
    case Opcode::addc: return by_shape<PickAlu<Opcode::addc>::T>(w, src);
    case Opcode::sub: return by_shape<PickAlu<Opcode::sub>::T>(w, src);
    case Opcode::subc: return by_shape<PickAlu<Opcode::subc>::T>(w, src);
    case Opcode::cmp: return by_shape<PickAlu<Opcode::cmp>::T>(w, src);
    case Opcode::and_: return by_shape<PickAlu<Opcode::and_>::T>(w, src);
    case Opcode::or_: return by_shape<PickAlu<Opcode::or_>::T>(w, src);
    case Opcode::xor_: return by_shape<PickAlu<Opcode::xor_>::T>(w, src);
    case Opcode::sl: return by_shape<PickAlu<Opcode::sl>::T>(w, src);
    case Opcode::sr: return by_shape<PickAlu<Opcode::sr>::T>(w, src);
    case Opcode::rl: return by_shape<PickAlu<Opcode::rl>::T>(w, src);
    case Opcode::rr: return by_shape<PickAlu<Opcode::rr>::T>(w, src);
    case Opcode::fsave: return h_fsave;
    case Opcode::frestore: return h_frestore;
    case Opcode::ret: return src ? h_ret<true> : h_ret<false>;
    case Opcode::syscall: return h_syscall;
    case Opcode::jmp: return in.cond() == Cond::always ? h_jmp_always : h_jmp_cond;
  }
  return h_fall_off;
}

class PredecodedBackend final : public Backend {
 public:
  const char* name() const override { return "predecoded"; }

  std::unique_ptr<CompiledForm> compile(const CodeBlock& block) override {
    auto form = std::make_unique<Predecoded>();
    const size_t n = block.instrs.size();
    // one trailing sentinel so a block without terminator faults cleanly
    form->ops.resize(n + 1);
    for (size_t i = 0; i < n; ++i) {
      const Instruction& in = block.instrs[i];
      PreOp& p = form->ops[i];
      p.fn = select(in);
      p.dst = in.dst;
      p.src = in.src;
      p.imm = static_cast<uint32_t>(in.imm);
      p.cond = in.cond();
      if (in.op == Opcode::jmp) {
        const int64_t t = static_cast<int64_t>(i) + 1 + in.imm;
        if (t < 0 || t >= static_cast<int64_t>(n)) {
          p.fn = h_bad_jump;
        } else {
          p.target = form->ops.data() + t;
        }
      }
    }
    form->ops[n].fn = h_fall_off;
    return form;
  }

  BlockExit run(MachineState& state, Mmu& mmu, CodeBlock& block, const CompiledForm& form,
                Counters* counters, uint32_t start) override {
    const auto& ops = static_cast<const Predecoded&>(form).ops;
    Counters scratch;
    Ctx c{&state, &mmu, counters ? counters : &scratch, ops.data(), &block, {}};
    if (start == 0) ++block.exec_count;
    const PreOp* op = ops.data() + start;
    uint64_t executed = 0;
    while (op) {
      ++executed;
      op = op->fn(c, op);
    }
    // the trailing sentinel is not an instruction
    if (c.exit.kind == BlockExit::Kind::fault && c.exit.fault.index >= block.instrs.size()) --executed;
    c.c->instrs_interpreted += executed;
    return c.exit;
  }
};

}  // namespace

std::unique_ptr<Backend> make_predecoded_backend() { return std::make_unique<PredecodedBackend>(); }

}  // namespace pinky
