#pragma once

// Fetch → (cache | translate) → execute loop with tiering, self-modifying
// code invalidation, host syscalls and deterministic stop conditions.

#include <array>
#include <functional>
#include <list>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <unordered_map>

#include "pinky/backend.hpp"
#include "pinky/config.hpp"
#include "pinky/counters.hpp"
#include "pinky/metrics.hpp"
#include "pinky/probes.hpp"
#include "pinky/translator.hpp"
#include "pinky/vm.hpp"

namespace pinky {

class Mmu;

struct CacheEntry {
  xir::CodeBlock block;
  std::unique_ptr<CompiledForm> compiled;
};
using EntryPtr = std::shared_ptr<CacheEntry>;

enum class CacheStrategy { unbounded, lru };

/// Entry VA → translated block, with a page index so guest writes can
/// evict every block they touch. Indexed pages are watched in the MMU.
class BlockCache {
 public:
  explicit BlockCache(Mmu& mmu) : mmu_(mmu) {}
  ~BlockCache();

  void set_strategy(CacheStrategy s, size_t capacity);
  CacheStrategy strategy() const { return strategy_; }
  size_t capacity() const { return capacity_; }

  /// Hit refreshes LRU recency.
  EntryPtr find(uint32_t va);
  bool contains(uint32_t va) const { return map_.count(va) != 0; }
  void insert(EntryPtr e);
  void erase(uint32_t va);
  /// Evicts every block overlapping a page of [va, va + len).
  size_t invalidate(uint32_t va, uint64_t len);
  void clear();

  size_t size() const { return map_.size(); }
  uint64_t evictions() const { return evictions_; }
  /// Entry VAs indexed under `page` (for invariant checks).
  std::vector<uint32_t> indexed(uint32_t page) const;

 private:
  struct Slot {
    EntryPtr entry;
    std::list<uint32_t>::iterator lru;
  };
  void index(const CacheEntry& e, bool add);
  void trim();

  Mmu& mmu_;
  CacheStrategy strategy_ = CacheStrategy::unbounded;
  size_t capacity_ = 4096;
  std::unordered_map<uint32_t, Slot> map_;
  std::list<uint32_t> order_;  // most recent at the front
  std::unordered_map<uint32_t, std::set<uint32_t>> pages_;
  uint64_t evictions_ = 0;
};

/// x87 side state for escaped FPU instructions.
struct FpuState {
  std::array<double, 8> slots{};
  unsigned top = 0;

  double& st(unsigned i) { return slots[(top + i) & 7]; }
  void push(double v) {
    top = (top + 7) & 7;
    slots[top] = v;
  }
};

enum class StopKind {
  guest_exit,
  metric_threshold,
  breakpoint,
  fault,
  unsupported_instruction,
  unknown_syscall,
  watchpoint,
  block_limit,
};

const char* stop_kind_name(StopKind k);

struct StopReason {
  StopKind kind = StopKind::guest_exit;
  uint32_t va = 0;      // stop location (next guest pc)
  uint32_t code = 0;    // exit code, syscall id, watched address
  double metric = 0;
  FaultInfo fault{};
  std::string message;

  std::string describe() const;
};

class Engine;
using SyscallHandler = std::function<void(Engine&, MachineState&, Mmu&)>;

struct RunOptions {
  /// Do not report block_enter for the first block (resume after a stop).
  bool skip_first_enter = false;
};

class Engine {
 public:
  explicit Engine(Mmu& mmu, ConfigStore config = ConfigStore::with_defaults(),
                  std::ostream* log = nullptr);
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;
  ~Engine();

  StopReason run(MachineState& state, uint32_t start_va, RunOptions opts = {});
  /// Same loop with every probe site compiled out (overhead baseline).
  StopReason run_without_probes(MachineState& state, uint32_t start_va);

  CacheEntry& lookup_or_translate(uint32_t va);
  size_t invalidate(uint32_t va, uint64_t len) { return cache_.invalidate(va, len); }

  void register_syscall(uint32_t id, SyscallHandler handler);
  bool has_syscall(uint32_t id) const { return syscalls_.count(id) != 0; }
  /// Returns false when no handler is registered.
  bool handle_syscall(uint32_t id, MachineState& state);

  /// Ends the current run after the running handler returns.
  void request_stop(StopReason r) { pending_stop_ = std::move(r); }
  void request_exit(uint32_t code);

  /// Blocks never extend across a split point (breakpoint addresses).
  void add_split_point(uint32_t va);
  void remove_split_point(uint32_t va);

  ConfigStore& config() { return config_; }
  Logger& logger() { return logger_; }
  ProbeRegistry& probes() { return probes_; }
  Translator& translator() { return translator_; }
  BlockCache& cache() { return cache_; }
  Counters& counters() { return counters_; }
  FpuState& fpu() { return fpu_; }
  metrics::MetricModel& model() { return model_; }
  Backend* backend() { return backend_.get(); }
  Mmu& mmu() { return mmu_; }
  uint64_t backend_compiles() const { return compiles_; }
  bool step_mode() const { return step_mode_; }

  struct ProbeIds {
    ProbeId block_enter, block_exit, step_mode, mmu_write, vfs_open, import_resolved, syscall;
  };
  const ProbeIds& probe_ids() const { return ids_; }

  void reset_counters();

 private:
  template <bool WithProbes>
  StopReason run_impl(MachineState& state, uint32_t start_va, RunOptions opts);
  EntryPtr fetch(uint32_t va);
  void apply_config();
  void install_fpu_handlers();
  bool fire_stop(ProbeId id, ProbeContext& ctx);

  Mmu& mmu_;
  ConfigStore config_;
  Logger logger_;
  ProbeRegistry probes_;
  ProbeIds ids_{};
  Translator translator_;
  BlockCache cache_;
  std::unique_ptr<Backend> backend_;
  std::unordered_map<uint32_t, SyscallHandler> syscalls_;
  Counters counters_;
  FpuState fpu_;
  metrics::MetricModel model_;
  std::optional<StopReason> pending_stop_;
  std::optional<StopReason> watch_stop_;
  std::set<uint32_t> split_points_;
  uint64_t tier_threshold_ = 16;
  uint64_t max_blocks_ = 0;
  uint64_t compiles_ = 0;
  bool step_mode_ = false;
  const bool* enter_on_ = nullptr;
  const bool* exit_on_ = nullptr;
  const bool* syscall_on_ = nullptr;
};

}  // namespace pinky
