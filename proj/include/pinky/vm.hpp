#pragma once

// XIR interpreter.

#include <array>
#include <cstdint>
#include <string>

#include "pinky/counters.hpp"
#include "pinky/xir.hpp"

namespace pinky {

class Mmu;

struct MachineState {
  std::array<uint32_t, 256> regs{};
  uint32_t pc = 0;

  uint32_t& reg(xir::Reg r) { return regs[r]; }
  uint32_t reg(xir::Reg r) const { return regs[r]; }
  uint32_t flags() const { return regs[xir::reg::flags]; }
  uint32_t shadow_flags() const { return regs[xir::reg::shadow]; }
  uint32_t eflags() const { return regs[xir::reg::eflags]; }

  friend bool operator==(const MachineState&, const MachineState&) = default;
};

enum class FaultKind : uint8_t {
  unmapped_read,
  unmapped_write,
  protection_read,
  protection_write,
  divide_error,
  unmapped_fetch,
  bad_block,
};

const char* fault_name(FaultKind k);

struct FaultInfo {
  FaultKind kind = FaultKind::unmapped_read;
  uint32_t va = 0;      // faulting data address (or guest pc for fetch)
  uint8_t size = 0;     // access width in bytes
  uint32_t pc = 0;      // guest instruction that faulted
  uint32_t index = 0;   // XIR index within the block

  std::string describe() const;
  friend bool operator==(const FaultInfo&, const FaultInfo&) = default;
};

struct BlockExit {
  enum class Kind : uint8_t { next_va, syscall, fault };
  Kind kind = Kind::next_va;
  uint32_t value = 0;   // next VA or syscall id
  uint32_t resume = 0;  // XIR index to resume at after a syscall
  FaultInfo fault{};

  static BlockExit next(uint32_t va) { return {Kind::next_va, va, 0, {}}; }
  static BlockExit sys(uint32_t id, uint32_t resume) { return {Kind::syscall, id, resume, {}}; }
  static BlockExit faulted(const FaultInfo& f) { return {Kind::fault, 0, 0, f}; }
  friend bool operator==(const BlockExit&, const BlockExit&) = default;
};

struct StepResult {
  bool exited = false;
  uint32_t next = 0;
  BlockExit exit{};
};

/// Executes the single XIR instruction at `idx`.
StepResult step(MachineState& state, Mmu& mmu, const xir::CodeBlock& block, uint32_t idx,
                Counters* counters = nullptr);

/// Runs `block` from `start` to its first exit. A run from index 0
/// counts as one execution of the block.
BlockExit run_block(MachineState& state, Mmu& mmu, xir::CodeBlock& block,
                    Counters* counters = nullptr, uint32_t start = 0);

}  // namespace pinky
