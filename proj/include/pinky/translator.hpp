#pragma once

// IA-32 → XIR lowering.

#include <bitset>
#include <set>
#include <cstdint>
#include <string>
#include <vector>

#include "pinky/x86.hpp"
#include "pinky/xir.hpp"

namespace pinky {

class Mmu;
class Logger;

/// Syscall ids emitted by the translator.
namespace sysno {
inline constexpr int32_t fabs = 1;
inline constexpr int32_t fchs = 2;
inline constexpr int32_t fsqrt = 3;
inline constexpr int32_t fld1 = 4;
/// Shim stubs trap with shim_base + shim index.
inline constexpr int32_t shim_base = 0x100;
}  // namespace sysno

int32_t escape_syscall_id(x86::Mnemonic m);

/// Lowest-first allocator over the TEMP register range.
class TempAllocator {
 public:
  static constexpr unsigned kCount = xir::reg::temp_last - xir::reg::temp_first + 1;

  xir::Reg alloc();
  void free(xir::Reg r);
  unsigned in_use() const { return static_cast<unsigned>(used_.count()); }
  unsigned high_water() const { return high_water_; }
  const std::bitset<kCount>& state() const { return used_; }

 private:
  std::bitset<kCount> used_;
  unsigned high_water_ = 0;
};

/// Accumulates the XIR of one block.
struct Emitter {
  std::vector<xir::Instruction> code;
  std::vector<uint32_t> origin;
  uint32_t guest_va = 0;

  size_t emit(const xir::Instruction& i) {
    code.push_back(i);
    origin.push_back(guest_va);
    return code.size() - 1;
  }
  size_t here() const { return code.size(); }
  /// Points the jmp at `at` to the instruction at `target`.
  void patch_jump(size_t at, size_t target) {
    code[at].imm = static_cast<int32_t>(target) - static_cast<int32_t>(at) - 1;
  }
};

class Translator {
 public:
  /// Guest instructions per block before a fall-through RET.
  void set_max_instrs(unsigned n) { max_instrs_ = n == 0 ? 1 : n; }
  unsigned max_instrs() const { return max_instrs_; }

  /// Emits the two-column guest→XIR listing while log.ir is on.
  void set_logger(Logger* log) { logger_ = log; }

  /// A block ends before any non-first instruction at one of these VAs.
  void set_split_points(const std::set<uint32_t>* points) { split_ = points; }

  xir::CodeBlock translate(const Mmu& mmu, uint32_t va);

  /// Lowers a single guest instruction. Temps are balanced on return.
  void lower(const x86::GuestInstruction& g, Emitter& out);

  uint64_t invocations() const { return invocations_; }
  const TempAllocator& temps() const { return temps_; }

 private:
  unsigned max_instrs_ = 32;
  uint64_t invocations_ = 0;
  TempAllocator temps_;
  Logger* logger_ = nullptr;
  const std::set<uint32_t>* split_ = nullptr;
};

struct TraceEntry {
  const x86::GuestInstruction* insn;
  size_t first;  // XIR index range [first, last)
  size_t last;
};

/// Two-column listing: guest line on the left, one XIR line per row.
std::string format_trace(const std::vector<TraceEntry>& entries,
                         const std::vector<xir::Instruction>& code);

}  // namespace pinky
