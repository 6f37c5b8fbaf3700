#pragma once

// Named instrumentation points. A probe has one provider and any number
// of consumers; a disabled probe costs one flag test at the fire site.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pinky {

namespace xir {
struct CodeBlock;
}
class Mmu;
struct MachineState;

using ProbeId = uint32_t;

enum class Verdict { none, stop, single_step };

/// Payload handed to consumers. Valid only for the duration of a fire.
struct ProbeContext {
  uint32_t pc = 0;
  uint32_t block_va = 0;
  const xir::CodeBlock* block = nullptr;
  MachineState* state = nullptr;
  Mmu* mmu = nullptr;
  std::string_view text;
  uint32_t address = 0;
  uint32_t size = 0;
  uint64_t value = 0;
  Verdict verdict = Verdict::none;
};

enum class ProbeErrc { duplicate_name, unknown_probe, duplicate_consumer_id };

class ProbeError : public std::runtime_error {
 public:
  ProbeError(ProbeErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ProbeErrc code() const { return code_; }

 private:
  ProbeErrc code_;
};

class ProbeRegistry {
 public:
  using Consumer = std::function<void(ProbeContext&)>;
  /// Provider hook invoked with the new state on enable/disable.
  using Enabler = std::function<void(bool enabled)>;
  /// Called when a consumer throws; the consumer is then disabled.
  using ErrorSink = std::function<void(std::string_view probe, int consumer_id, std::string_view what)>;

  ProbeId create(std::string name, std::string provider, Enabler enabler = {});
  void register_consumer(ProbeId id, int consumer_id, Consumer consumer);
  void register_consumer(std::string_view name, int consumer_id, Consumer consumer);
  void unregister_consumer(ProbeId id, int consumer_id);
  void enable(ProbeId id);
  void disable(ProbeId id);
  bool is_enabled(ProbeId id) const { return probe(id).enabled; }
  /// Stable address of the probe's enabled flag, for fire sites that
  /// test it before building a context.
  const bool* enabled_flag(ProbeId id) const { return &probe(id).enabled; }

  ProbeId id_of(std::string_view name) const;
  /// Accepts "x86.step_mode" or the underscore form "x86_step_mode".
  ProbeId resolve(std::string_view name) const;
  const std::string& name_of(ProbeId id) const { return probe(id).name; }
  std::vector<std::string> names() const;
  size_t consumer_count(ProbeId id) const { return probe(id).consumers.size(); }

  void set_error_sink(ErrorSink sink) { error_sink_ = std::move(sink); }

  /// Hot-path entry: a single flag test when disabled.
  void fire(ProbeId id, ProbeContext& ctx) {
    Probe& p = *probes_[id - 1];
    if (!p.enabled) [[likely]] return;
    broadcast(p, ctx);
  }
  /// Walks all consumers of an enabled probe in registration order.
  void probe_cb_consumers(ProbeId id, ProbeContext& ctx) { broadcast(probe(id), ctx); }

  /// Pulls a single consumer's trigger (provider-side filtering).
  void fire_consumer(ProbeId id, int consumer_id, ProbeContext& ctx);

 private:
  struct ConsumerSlot {
    int id;
    Consumer fn;
    bool active = true;
  };
  struct Probe {
    ProbeId id;
    std::string name;
    std::string provider;
    Enabler enabler;
    bool enabled = false;
    std::vector<ConsumerSlot> consumers;
  };

  Probe& probe(ProbeId id);
  const Probe& probe(ProbeId id) const;
  void broadcast(Probe& p, ProbeContext& ctx);
  void invoke(Probe& p, ConsumerSlot& slot, ProbeContext& ctx);

  std::vector<std::unique_ptr<Probe>> probes_;
  ErrorSink error_sink_;
};

/// Stable public probe names.
namespace probe_names {
inline constexpr std::string_view block_enter = "engine.block_enter";
inline constexpr std::string_view block_exit = "engine.block_exit";
inline constexpr std::string_view step_mode = "x86.step_mode";
inline constexpr std::string_view mmu_write = "mmu.write";
inline constexpr std::string_view vfs_open = "vfs.open";
inline constexpr std::string_view import_resolved = "loader.import_resolved";
inline constexpr std::string_view syscall = "engine.syscall";
}  // namespace probe_names

}  // namespace pinky
