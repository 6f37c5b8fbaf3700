#pragma once

// Execution tiers beyond the plain interpreter.

#include <memory>

#include "pinky/vm.hpp"
#include "pinky/xir.hpp"

namespace pinky {

/// Backend-specific executable form of a block.
struct CompiledForm {
  virtual ~CompiledForm() = default;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual const char* name() const = 0;
  virtual std::unique_ptr<CompiledForm> compile(const xir::CodeBlock& block) = 0;
  /// Must be observationally identical to run_block on the same block.
  virtual BlockExit run(MachineState& state, Mmu& mmu, xir::CodeBlock& block,
                        const CompiledForm& form, Counters* counters, uint32_t start) = 0;
};

/// Portable backend: dispatch and operand decoding are resolved once per
/// op into a handler pointer specialised by width and source presence.
std::unique_ptr<Backend> make_predecoded_backend();

}  // namespace pinky
