#include "support/programs.hpp"

#include <fmt/format.h>

#include "pinky/mmu.hpp"
#include "pinky/xir.hpp"

namespace support {

using oracle::Cpu;
using oracle::Insn;
using oracle::Op;
using oracle::Operand;
namespace fl = oracle::fl;

std::filesystem::path fixtures_dir() { return PINKY_FIXTURES_DIR; }

std::vector<uint8_t> exit_stub() {
  return {0x0F, 0x3F, static_cast<uint8_t>(kExitSyscall & 0xFF),
          static_cast<uint8_t>(kExitSyscall >> 8)};
}

namespace {

bool coin(Rng& rng, double p = 0.5) { return std::bernoulli_distribution(p)(rng); }

template <class T>
T pick(Rng& rng, std::initializer_list<T> items) {
  std::uniform_int_distribution<size_t> d(0, items.size() - 1);
  return *(items.begin() + d(rng));
}

int range(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

uint32_t mask_of(int bits) { return bits == 32 ? 0xFFFFFFFFu : (1u << bits) - 1; }

bool fits_s8(int32_t v) { return v >= -128 && v <= 127; }

class Encoder {
 public:
  Encoder(Rng& rng) : rng_(rng) {}

  std::vector<uint8_t> out;

  void b(uint8_t v) { out.push_back(v); }
  void le(uint32_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) b(static_cast<uint8_t>(v >> (8 * i)));
  }
  void imm(uint32_t v, int bits) { le(v, bits / 8); }
  void opsize(int bits) {
    if (bits == 16) b(0x66);
  }

  void modrm(int regfield, const Operand& rm) {
    if (rm.kind == Operand::kReg) {
      b(static_cast<uint8_t>(0xC0 | (regfield << 3) | rm.reg));
      return;
    }
    const int32_t disp = rm.disp;
    auto mod_for = [&](bool zero_ok) {
      if (disp == 0 && zero_ok && coin(rng_, 0.7)) return 0;
      if (fits_s8(disp) && coin(rng_, 0.7)) return 1;
      return 2;
    };
    auto tail = [&](int mod) {
      if (mod == 1) b(static_cast<uint8_t>(disp));
      if (mod == 2) le(static_cast<uint32_t>(disp), 4);
    };
    const int ss = rm.scale == 8 ? 3 : rm.scale == 4 ? 2 : rm.scale == 2 ? 1 : 0;
    if (rm.base < 0 && rm.index < 0) {
      if (coin(rng_, 0.8)) {
        b(static_cast<uint8_t>((regfield << 3) | 5));
      } else {
        // SIB with neither base nor index
        b(static_cast<uint8_t>((regfield << 3) | 4));
        b(static_cast<uint8_t>((range(rng_, 0, 3) << 6) | (4 << 3) | 5));
      }
      le(static_cast<uint32_t>(disp), 4);
      return;
    }
    if (rm.index < 0) {
      const bool sib = rm.base == oracle::ESP || coin(rng_, 0.1);
      const int mod = mod_for(rm.base != oracle::EBP);
      if (sib) {
        b(static_cast<uint8_t>((mod << 6) | (regfield << 3) | 4));
        b(static_cast<uint8_t>((range(rng_, 0, 3) << 6) | (4 << 3) | rm.base));
      } else {
        b(static_cast<uint8_t>((mod << 6) | (regfield << 3) | rm.base));
      }
      tail(mod);
      return;
    }
    if (rm.base < 0) {
      b(static_cast<uint8_t>((regfield << 3) | 4));
      b(static_cast<uint8_t>((ss << 6) | (rm.index << 3) | 5));
      le(static_cast<uint32_t>(disp), 4);
      return;
    }
    const int mod = mod_for(rm.base != oracle::EBP);
    b(static_cast<uint8_t>((mod << 6) | (regfield << 3) | 4));
    b(static_cast<uint8_t>((ss << 6) | (rm.index << 3) | rm.base));
    tail(mod);
  }

  void alu(int ext, const Operand& a, const Operand& s) {
    const int w = a.bits;
    const uint8_t base = static_cast<uint8_t>(ext << 3);
    opsize(w);
    const uint8_t wide = w == 8 ? 0 : 1;
    if (s.kind == Operand::kImm) {
      const uint32_t v = s.imm & mask_of(w);
      if (a.kind == Operand::kReg && a.reg == 0 && coin(rng_, 0.4)) {
        b(base + 4 + wide);
        imm(v, w);
        return;
      }
      if (w == 8) {
        b(0x80);
        modrm(ext, a);
        imm(v, 8);
        return;
      }
      const uint32_t sx = static_cast<uint32_t>(static_cast<int8_t>(v & 0xFF)) & mask_of(w);
      if (sx == v && coin(rng_, 0.7)) {
        b(0x83);
        modrm(ext, a);
        b(static_cast<uint8_t>(v));
      } else {
        b(0x81);
        modrm(ext, a);
        imm(v, w);
      }
      return;
    }
    if (a.kind == Operand::kReg && s.kind == Operand::kReg && coin(rng_)) {
      b(base + 2 + wide);
      modrm(a.reg, s);
    } else if (a.kind == Operand::kReg && s.kind == Operand::kMem) {
      b(base + 2 + wide);
      modrm(a.reg, s);
    } else {
      b(base + wide);
      modrm(s.reg, a);
    }
  }

  void group3(int ext, const Operand& a) {
    opsize(a.bits);
    b(a.bits == 8 ? 0xF6 : 0xF7);
    modrm(ext, a);
  }

  void encode(const Insn& in) {
    const Operand& a = in.a;
    const Operand& s = in.b;
    const int w = a.bits;
    switch (in.op) {
      case Op::nop: b(0x90); break;
      case Op::clc: b(0xF8); break;
      case Op::stc: b(0xF9); break;
      case Op::pushfd: b(0x9C); break;
      case Op::popfd: b(0x9D); break;
      case Op::add: alu(0, a, s); break;
      case Op::or_: alu(1, a, s); break;
      case Op::adc: alu(2, a, s); break;
      case Op::sbb: alu(3, a, s); break;
      case Op::and_: alu(4, a, s); break;
      case Op::sub: alu(5, a, s); break;
      case Op::xor_: alu(6, a, s); break;
      case Op::cmp: alu(7, a, s); break;
      case Op::mov:
        opsize(w);
        if (s.kind == Operand::kImm) {
          if (a.kind == Operand::kReg && coin(rng_, 0.7)) {
            b(static_cast<uint8_t>((w == 8 ? 0xB0 : 0xB8) + a.reg));
          } else {
            b(w == 8 ? 0xC6 : 0xC7);
            modrm(0, a);
          }
          imm(s.imm & mask_of(w), w);
        } else if (a.kind == Operand::kReg && (s.kind == Operand::kMem || coin(rng_))) {
          b(w == 8 ? 0x8A : 0x8B);
          modrm(a.reg, s);
        } else {
          b(w == 8 ? 0x88 : 0x89);
          modrm(s.reg, a);
        }
        break;
      case Op::movzx:
        b(0x0F);
        b(s.bits == 8 ? 0xB6 : 0xB7);
        modrm(a.reg, s);
        break;
      case Op::lea:
        b(0x8D);
        modrm(a.reg, s);
        break;
      case Op::push:
        if (a.kind == Operand::kImm) {
          if (fits_s8(static_cast<int32_t>(a.imm)) && coin(rng_, 0.7)) {
            b(0x6A);
            b(static_cast<uint8_t>(a.imm));
          } else {
            b(0x68);
            imm(a.imm, 32);
          }
        } else if (a.kind == Operand::kReg && coin(rng_, 0.7)) {
          b(static_cast<uint8_t>(0x50 + a.reg));
        } else {
          b(0xFF);
          modrm(6, a);
        }
        break;
      case Op::pop:
        if (a.kind == Operand::kReg && coin(rng_, 0.7)) {
          b(static_cast<uint8_t>(0x58 + a.reg));
        } else {
          b(0x8F);
          modrm(0, a);
        }
        break;
      case Op::inc:
      case Op::dec: {
        const int ext = in.op == Op::inc ? 0 : 1;
        opsize(w);
        if (w != 8 && a.kind == Operand::kReg && coin(rng_, 0.6)) {
          b(static_cast<uint8_t>((ext ? 0x48 : 0x40) + a.reg));
        } else {
          b(w == 8 ? 0xFE : 0xFF);
          modrm(ext, a);
        }
        break;
      }
      case Op::test:
        opsize(w);
        if (s.kind == Operand::kImm) {
          if (a.kind == Operand::kReg && a.reg == 0 && coin(rng_, 0.5)) {
            b(w == 8 ? 0xA8 : 0xA9);
          } else {
            b(w == 8 ? 0xF6 : 0xF7);
            modrm(0, a);
          }
          imm(s.imm & mask_of(w), w);
        } else {
          b(w == 8 ? 0x84 : 0x85);
          modrm(s.reg, a);
        }
        break;
      case Op::not_: group3(2, a); break;
      case Op::neg: group3(3, a); break;
      case Op::mul: group3(4, a); break;
      case Op::div: group3(6, a); break;
      case Op::rol:
      case Op::ror:
      case Op::shl:
      case Op::shr:
      case Op::sar: {
        int ext = in.op == Op::rol ? 0 : in.op == Op::ror ? 1 : in.op == Op::shr ? 5
                : in.op == Op::sar ? 7 : 4;
        if (in.op == Op::shl && coin(rng_, 0.2)) ext = 6;  // sal alias
        opsize(w);
        const uint8_t wide = w == 8 ? 0 : 1;
        if (s.kind == Operand::kReg) {
          b(0xD2 + wide);
          modrm(ext, a);
        } else if ((s.imm & 0xFF) == 1 && coin(rng_, 0.6)) {
          b(0xD0 + wide);
          modrm(ext, a);
        } else {
          b(0xC0 + wide);
          modrm(ext, a);
          b(static_cast<uint8_t>(s.imm));
        }
        break;
      }
      case Op::xchg:
        opsize(w);
        if (w != 8 && a.kind == Operand::kReg && s.kind == Operand::kReg &&
            (a.reg == 0) != (s.reg == 0) && coin(rng_, 0.6)) {
          b(static_cast<uint8_t>(0x90 + (a.reg == 0 ? s.reg : a.reg)));
        } else if (a.kind == Operand::kMem) {
          b(w == 8 ? 0x86 : 0x87);
          modrm(s.reg, a);
        } else {
          b(w == 8 ? 0x86 : 0x87);
          if (s.kind == Operand::kMem || coin(rng_)) {
            modrm(a.reg, s);
          } else {
            modrm(s.reg, a);
          }
        }
        break;
    }
  }

 private:
  Rng& rng_;
};

class Generator {
 public:
  Generator(Rng& rng, const Cpu& cpu) : rng_(rng), cpu_(cpu) {}

  int width() { return pick(rng_, {8, 16, 32, 32}); }

  // Registers an instruction may overwrite: everything but esp (and sp).
  int dst_reg(int bits) {
    if (bits == 8) return range(rng_, 0, 7);
    return pick(rng_, {0, 1, 2, 3, 5, 6, 7});
  }
  int any_reg() { return range(rng_, 0, 7); }

  Operand reg_op(int bits, bool writable = true) {
    return Operand::r(writable ? dst_reg(bits) : any_reg(), bits);
  }

  uint32_t imm(int bits) {
    uint32_t v;
    switch (range(rng_, 0, 4)) {
      case 0: v = static_cast<uint32_t>(range(rng_, -4, 4)); break;
      case 1:
        v = pick<uint32_t>(rng_, {0x7F, 0x80, 0xFF, 0x7FFF, 0x8000, 0xFFFF, 0x7FFFFFFF,
                                  0x80000000, 0xFFFFFFFF, 0x10, 0x0F});
        break;
      case 2: v = static_cast<uint32_t>(range(rng_, 0, 255)); break;
      default: v = static_cast<uint32_t>(rng_()); break;
    }
    return v & mask_of(bits);
  }

  /// Memory operand landing in the scratch page. `esp_bias` accounts for
  /// pop, which computes its destination after incrementing esp.
  Operand mem(int bits, uint32_t esp_bias = 0) {
    const uint32_t target =
        kScratchVa + static_cast<uint32_t>(range(rng_, 0x20, 0xFE0 - bits / 8));
    auto value = [&](int r) { return cpu_.r[r] + (r == oracle::ESP ? esp_bias : 0); };
    Operand m = Operand::m(-1, 0, bits);
    switch (range(rng_, 0, 5)) {
      case 0:
        break;
      case 1:
      case 2:
        m.base = any_reg();
        break;
      case 3:
        m.base = oracle::ESP;
        break;
      case 4:
        m.base = any_reg();
        m.index = pick(rng_, {0, 1, 2, 3, 5, 6, 7});
        m.scale = pick(rng_, {1, 2, 4, 8});
        break;
      default:
        m.index = pick(rng_, {0, 1, 2, 3, 5, 6, 7});
        m.scale = pick(rng_, {1, 2, 4, 8});
        break;
    }
    uint32_t base = 0;
    if (m.base >= 0) base += value(m.base);
    if (m.index >= 0) base += cpu_.r[m.index] * static_cast<uint32_t>(m.scale);
    m.disp = static_cast<int32_t>(target - base);
    return m;
  }

  Operand rm(int bits, bool writable = true) { return coin(rng_, 0.6) ? reg_op(bits, writable) : mem(bits); }

  Operand source(int bits, const Operand& dst) {
    // at most one memory operand
    const int k = range(rng_, 0, 2);
    if (k == 0) return Operand::i(imm(bits), bits);
    if (k == 1 || dst.kind == Operand::kMem) return reg_op(bits, false);
    return mem(bits);
  }

  std::vector<Insn> next() {
    static constexpr Op kOps[] = {
        Op::mov, Op::mov, Op::movzx, Op::lea, Op::push, Op::pop, Op::pushfd, Op::popfd,
        Op::add, Op::adc, Op::sub, Op::sbb, Op::and_, Op::or_, Op::xor_, Op::cmp, Op::test,
        Op::inc, Op::dec, Op::neg, Op::not_, Op::mul, Op::div, Op::shl, Op::shr, Op::sar,
        Op::rol, Op::ror, Op::xchg, Op::nop, Op::clc, Op::stc,
    };
    const Op op = kOps[range(rng_, 0, static_cast<int>(std::size(kOps)) - 1)];
    Insn in;
    in.op = op;
    switch (op) {
      case Op::nop:
      case Op::clc:
      case Op::stc:
      case Op::pushfd:
      case Op::popfd:
        break;
      case Op::mov: {
        const int w = width();
        in.a = rm(w);
        in.b = source(w, in.a);
        break;
      }
      case Op::movzx: {
        const int sw = pick(rng_, {8, 16});
        in.a = reg_op(32);
        in.b = coin(rng_) ? reg_op(sw, false) : mem(sw);
        break;
      }
      case Op::lea:
        in.a = reg_op(32);
        in.b = mem(32);
        if (coin(rng_, 0.3)) in.b.disp = static_cast<int32_t>(imm(32));
        break;
      case Op::push:
        switch (range(rng_, 0, 2)) {
          case 0: in.a = Operand::r(any_reg()); break;
          case 1: in.a = Operand::i(coin(rng_) ? static_cast<uint32_t>(range(rng_, -128, 127)) : imm(32)); break;
          default: in.a = mem(32); break;
        }
        break;
      case Op::pop:
        in.a = coin(rng_, 0.6) ? reg_op(32) : mem(32, 4);
        break;
      case Op::add:
      case Op::adc:
      case Op::sub:
      case Op::sbb:
      case Op::and_:
      case Op::or_:
      case Op::xor_: {
        const int w = width();
        in.a = rm(w);
        in.b = source(w, in.a);
        break;
      }
      case Op::cmp:
      case Op::test: {
        const int w = width();
        in.a = rm(w, false);
        in.b = coin(rng_, 0.4) ? Operand::i(imm(w), w) : reg_op(w, false);
        if (op == Op::cmp && in.a.kind == Operand::kReg && coin(rng_, 0.3)) in.b = mem(w);
        break;
      }
      case Op::inc:
      case Op::dec:
      case Op::neg:
      case Op::not_:
        in.a = rm(width());
        break;
      case Op::mul:
        in.a = rm(width(), false);
        break;
      case Op::div: {
        const int w = width();
        in.a = rm(w, false);
        if (coin(rng_, 0.6)) {
          // clear the high half of the dividend so the quotient fits
          Insn clear;
          clear.op = pick(rng_, {Op::xor_, Op::mov, Op::and_, Op::sub});
          const Operand hi = w == 8 ? Operand::r(4, 8) : Operand::r(oracle::EDX, w);
          clear.a = hi;
          clear.b = clear.op == Op::mov || clear.op == Op::and_ ? Operand::i(0, w) : hi;
          if (in.a.kind == Operand::kReg && (in.a.reg == oracle::EDX || (w == 8 && in.a.reg == 4))) {
            in.a = mem(w);
          }
          return {clear, in};
        }
        break;
      }
      case Op::shl:
      case Op::shr:
      case Op::sar:
      case Op::rol:
      case Op::ror: {
        const int w = width();
        in.a = rm(w);
        switch (range(rng_, 0, 3)) {
          case 0: in.b = Operand::i(1, 8); break;
          case 1: in.b = Operand::r(oracle::ECX, 8); break;
          case 2: in.b = Operand::i(static_cast<uint32_t>(range(rng_, 0, 255)), 8); break;
          default: in.b = Operand::i(static_cast<uint32_t>(range(rng_, 0, w)), 8); break;
        }
        break;
      }
      case Op::xchg: {
        // register forms only
        const int w = width();
        in.a = reg_op(w);
        in.b = reg_op(w);
        break;
      }
    }
    return {in};
  }

 private:
  Rng& rng_;
  const Cpu& cpu_;
};

uint32_t random_reg_value(Rng& rng) {
  switch (range(rng, 0, 5)) {
    case 0: return kScratchVa + static_cast<uint32_t>(range(rng, 0x40, 0xFC0));
    case 1: return static_cast<uint32_t>(range(rng, 0, 300));
    case 2: return pick<uint32_t>(rng, {0, 1, 0x7FFFFFFF, 0x80000000, 0xFFFFFFFF, 0xFFFF, 0x80});
    default: return static_cast<uint32_t>(rng());
  }
}

}  // namespace

std::vector<uint8_t> encode(const Insn& insn, Rng& rng) {
  Encoder e(rng);
  e.encode(insn);
  return std::move(e.out);
}

Program random_program(Rng& rng, const GeneratorOptions& opts) {
  Program p;
  Cpu& init = p.initial;
  init.page_va = kScratchVa;
  for (auto& byte : init.page) byte = static_cast<uint8_t>(rng());
  for (int r = 0; r < 8; ++r) init.r[r] = random_reg_value(rng);
  init.r[oracle::ESP] = kScratchVa + 0x800 + static_cast<uint32_t>(range(rng, -16, 16)) * 4;
  init.eflags = 0x202 | (static_cast<uint32_t>(rng()) & fl::STATUS);

  Cpu cur = init;
  const int len = range(rng, opts.min_len, opts.max_len);
  bool trapped = false;
  while (static_cast<int>(p.insns.size()) < len && !trapped) {
    Generator gen(rng, cur);
    std::vector<Insn> seq = gen.next();
    if (static_cast<int>(p.insns.size() + seq.size()) > opts.max_len) continue;
    Cpu trial = cur;
    bool ok = true;
    bool trap = false;
    for (const Insn& in : seq) {
      if (oracle::flags_read(in) & ~trial.defined) {
        ok = false;
        break;
      }
      if (in.op == Op::popfd) {
        const uint32_t off = trial.r[oracle::ESP] - kScratchVa;
        if (trial.page[off + 1] & 0x01) {  // TF would arm a single-step trap
          ok = false;
          break;
        }
      }
      const oracle::Trap t = oracle::execute(trial, in);
      if (t == oracle::Trap::memory) {
        ok = false;
        break;
      }
      if (t == oracle::Trap::divide) {
        trap = true;
        ok = &in == &seq.back() && coin(rng, opts.fault_rate);
        break;
      }
    }
    if (!ok) continue;
    p.insns.insert(p.insns.end(), seq.begin(), seq.end());
    cur = trial;
    trapped = trap;
  }

  for (const Insn& in : p.insns) {
    p.offsets.push_back(static_cast<uint32_t>(p.code.size()));
    const auto bytes = encode(in, rng);
    p.code.insert(p.code.end(), bytes.begin(), bytes.end());
  }
  const auto stub = exit_stub();
  p.code.insert(p.code.end(), stub.begin(), stub.end());
  return p;
}

Expected run_oracle(const Program& p) {
  Expected e{p.initial, std::nullopt};
  for (size_t i = 0; i < p.insns.size(); ++i) {
    if (oracle::execute(e.cpu, p.insns[i]) != oracle::Trap::none) {
      e.trap_at = i;
      break;
    }
  }
  return e;
}

pinky::ConfigStore make_config(const EngineSetup& s) {
  auto cfg = pinky::ConfigStore::with_defaults();
  cfg.set("engine.backend", s.backend);
  cfg.set("engine.tier_threshold", s.tier_threshold);
  cfg.set("engine.cache", s.cache);
  cfg.set("engine.cache_capacity", s.cache_capacity);
  cfg.set("engine.max_block_instrs", s.max_block_instrs);
  return cfg;
}

Observed run_emulator(const Program& p, const EngineSetup& setup, const RunHooks& hooks) {
  using namespace pinky;
  Mmu mmu;
  mmu.pmap(p.code.size(), kCodeVa, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "code");
  mmu.write_memory(kCodeVa, p.code);
  mmu.pmap(kPageSize, kScratchVa, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "scratch");
  mmu.write_memory(kScratchVa, p.initial.page);

  Engine engine(mmu, make_config(setup));
  engine.register_syscall(kExitSyscall, [](Engine& e, MachineState&, Mmu&) { e.request_exit(0); });
  MachineState st;
  for (int r = 0; r < 8; ++r) st.regs[xir::reg::eax + r] = p.initial.r[r];
  st.regs[xir::reg::eflags] = p.initial.eflags;

  if (hooks.prepare) hooks.prepare(engine);
  Observed o;
  o.stop = engine.run(st, kCodeVa);
  if (hooks.inspect) hooks.inspect(engine, mmu);
  o.cpu.page_va = kScratchVa;
  for (int r = 0; r < 8; ++r) o.cpu.r[r] = st.regs[xir::reg::eax + r];
  o.cpu.eflags = st.regs[xir::reg::eflags];
  o.cpu.page = mmu.read_memory(kScratchVa, kPageSize);
  o.translations = engine.translator().invocations();
  o.counters = engine.counters();
  return o;
}

std::string listing(const Program& p) {
  std::string s;
  for (int r = 0; r < 8; ++r) s += fmt::format("r{}={:08x} ", r, p.initial.r[r]);
  s += fmt::format("eflags={:08x}\n", p.initial.eflags);
  for (size_t i = 0; i < p.insns.size(); ++i) {
    const uint32_t end = i + 1 < p.insns.size() ? p.offsets[i + 1]
                                                : static_cast<uint32_t>(p.code.size() - 4);
    std::string hex;
    for (uint32_t k = p.offsets[i]; k < end; ++k) hex += fmt::format("{:02X}", p.code[k]);
    s += fmt::format("  {:08X} {:<24} {}\n", kCodeVa + p.offsets[i], hex, oracle::to_string(p.insns[i]));
  }
  return s;
}

std::string compare(const Program& p, const Expected& want, const Observed& got) {
  std::string diff;
  if (want.trap_at) {
    const uint32_t va = kCodeVa + p.offsets[*want.trap_at];
    if (got.stop.kind != pinky::StopKind::fault || got.stop.fault.kind != pinky::FaultKind::divide_error ||
        got.stop.fault.pc != va) {
      diff += fmt::format("expected divide fault at {:08X}, got {}\n", va, got.stop.describe());
    }
  } else if (got.stop.kind != pinky::StopKind::guest_exit) {
    diff += fmt::format("expected exit, got {}\n", got.stop.describe());
  }
  static const char* kNames[] = {"eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"};
  for (int r = 0; r < 8; ++r) {
    if (want.cpu.r[r] != got.cpu.r[r]) {
      diff += fmt::format("{}: want {:08x} got {:08x}\n", kNames[r], want.cpu.r[r], got.cpu.r[r]);
    }
  }
  const uint32_t care = (want.cpu.defined & fl::STATUS) | ~fl::STATUS;
  if ((want.cpu.eflags ^ got.cpu.eflags) & care) {
    diff += fmt::format("eflags: want {:08x} got {:08x} (defined {:03x})\n", want.cpu.eflags,
                        got.cpu.eflags, want.cpu.defined);
  }
  for (size_t i = 0; i < want.cpu.page.size(); ++i) {
    if (want.cpu.page[i] != got.cpu.page[i]) {
      diff += fmt::format("mem[{:08x}]: want {:02x} got {:02x}\n", kScratchVa + i, want.cpu.page[i],
                          got.cpu.page[i]);
      break;
    }
  }
  if (!diff.empty()) diff = listing(p) + diff;
  return diff;
}

}  // namespace support
