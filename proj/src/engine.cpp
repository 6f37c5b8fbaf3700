#include "pinky/engine.hpp"

#include <fmt/format.h>

#include <cmath>
#include <cstring>

#include "pinky/mmu.hpp"
#include "pinky/x86.hpp"

namespace pinky {

// ---------------------------------------------------------------- cache

BlockCache::~BlockCache() { clear(); }

void BlockCache::set_strategy(CacheStrategy s, size_t capacity) {
  strategy_ = s;
  capacity_ = capacity == 0 ? 1 : capacity;
  trim();
}

EntryPtr BlockCache::find(uint32_t va) {
  auto it = map_.find(va);
  if (it == map_.end()) return nullptr;
  if (strategy_ == CacheStrategy::lru) order_.splice(order_.begin(), order_, it->second.lru);
  return it->second.entry;
}

void BlockCache::insert(EntryPtr e) {
  const uint32_t va = e->block.entry_va;
  erase(va);
  order_.push_front(va);
  index(*e, true);
  map_.emplace(va, Slot{std::move(e), order_.begin()});
  trim();
}

void BlockCache::erase(uint32_t va) {
  auto it = map_.find(va);
  if (it == map_.end()) return;
  index(*it->second.entry, false);
  order_.erase(it->second.lru);
  map_.erase(it);
}

void BlockCache::trim() {
  if (strategy_ != CacheStrategy::lru) return;
  while (map_.size() > capacity_) {
    erase(order_.back());
    ++evictions_;
  }
}

void BlockCache::index(const CacheEntry& e, bool add) {
  const uint32_t va = e.block.entry_va;
  const uint64_t last = uint64_t{va} + std::max<uint32_t>(e.block.guest_len, 1) - 1;
  const uint32_t first_page = page_of(va);
  const uint32_t last_page = page_of(static_cast<uint32_t>(std::min<uint64_t>(last, 0xFFFFFFFF)));
  for (uint32_t p = first_page;; ++p) {
    if (add) {
      auto& set = pages_[p];
      set.insert(va);
      if (set.size() == 1) mmu_.watch_page(p, true);
    } else if (auto it = pages_.find(p); it != pages_.end()) {
      it->second.erase(va);
      if (it->second.empty()) {
        pages_.erase(it);
        mmu_.watch_page(p, false);
      }
    }
    if (p == last_page) break;
  }
}

size_t BlockCache::invalidate(uint32_t va, uint64_t len) {
  if (len == 0 || pages_.empty()) return 0;
  const uint64_t end = std::min<uint64_t>(uint64_t{va} + len - 1, 0xFFFFFFFF);
  std::vector<uint32_t> victims;
  for (uint64_t p = page_of(va); p <= page_of(static_cast<uint32_t>(end)); ++p) {
    auto it = pages_.find(static_cast<uint32_t>(p));
    if (it == pages_.end()) continue;
    victims.insert(victims.end(), it->second.begin(), it->second.end());
  }
  size_t n = 0;
  for (uint32_t v : victims) {
    if (map_.count(v)) {
      erase(v);
      ++n;
    }
  }
  return n;
}

void BlockCache::clear() {
  for (const auto& [page, set] : pages_) mmu_.watch_page(page, false);
  pages_.clear();
  map_.clear();
  order_.clear();
}

std::vector<uint32_t> BlockCache::indexed(uint32_t page) const {
  auto it = pages_.find(page);
  if (it == pages_.end()) return {};
  return {it->second.begin(), it->second.end()};
}

// ---------------------------------------------------------------- stop

const char* stop_kind_name(StopKind k) {
  switch (k) {
    case StopKind::guest_exit: return "GuestExit";
    case StopKind::metric_threshold: return "MetricThreshold";
    case StopKind::breakpoint: return "Breakpoint";
    case StopKind::fault: return "Fault";
    case StopKind::unsupported_instruction: return "UnsupportedInstruction";
    case StopKind::unknown_syscall: return "UnknownSyscall";
    case StopKind::watchpoint: return "Watchpoint";
    case StopKind::block_limit: return "BlockLimit";
  }
  return "?";
}

std::string StopReason::describe() const {
  switch (kind) {
    case StopKind::guest_exit: return fmt::format("GuestExit({})", code);
    case StopKind::metric_threshold:
      return fmt::format("MetricThreshold({:.6g}) at 0x{:08X}", metric, va);
    case StopKind::breakpoint: return fmt::format("Breakpoint at 0x{:08X}", va);
    case StopKind::fault: return fmt::format("Fault({})", fault.describe());
    case StopKind::unsupported_instruction:
      return fmt::format("UnsupportedInstruction at 0x{:08X}{}{}", va, message.empty() ? "" : ": ",
                         message);
    case StopKind::unknown_syscall:
      return fmt::format("UnknownSyscall({}) at 0x{:08X}", code, va);
    case StopKind::watchpoint:
      return fmt::format("Watchpoint write to 0x{:08X}, stopped at 0x{:08X}", code, va);
    case StopKind::block_limit: return fmt::format("BlockLimit at 0x{:08X}", va);
  }
  return "?";
}

// ---------------------------------------------------------------- engine

Engine::Engine(Mmu& mmu, ConfigStore config, std::ostream* log)
    : mmu_(mmu), config_(std::move(config)), logger_(log), cache_(mmu) {
  logger_.bind(config_);
  probes_.set_error_sink([this](std::string_view probe, int consumer, std::string_view what) {
    logger_.log(LogModule::probes, LogLevel::info,
                fmt::format("consumer {} on {} disabled: {}", consumer, probe, what));
  });

  ids_.block_enter = probes_.create(std::string(probe_names::block_enter), "engine");
  ids_.block_exit = probes_.create(std::string(probe_names::block_exit), "engine");
  enter_on_ = probes_.enabled_flag(ids_.block_enter);
  exit_on_ = probes_.enabled_flag(ids_.block_exit);
  ids_.step_mode = probes_.create(std::string(probe_names::step_mode), "x86", [this](bool on) {
    step_mode_ = on;
    translator_.set_max_instrs(on ? 1u : static_cast<unsigned>(config_.get_int("engine.max_block_instrs")));
  });
  ids_.mmu_write = probes_.create(std::string(probe_names::mmu_write), "mmu", [this](bool on) {
    if (on) {
      mmu_.set_write_observer([this](uint32_t va, std::span<const uint8_t> bytes) {
        ProbeContext ctx;
        ctx.mmu = &mmu_;
        ctx.address = va;
        ctx.size = static_cast<uint32_t>(bytes.size());
        uint64_t v = 0;
        std::memcpy(&v, bytes.data(), std::min<size_t>(bytes.size(), sizeof v));
        ctx.value = v;
        probes_.fire(ids_.mmu_write, ctx);
        if (ctx.verdict == Verdict::stop && !watch_stop_) {
          StopReason r;
          r.kind = StopKind::watchpoint;
          r.code = va;
          watch_stop_ = r;
        }
      });
    } else {
      mmu_.set_write_observer({});
    }
    mmu_.set_force_slow_writes(on);
  });
  ids_.vfs_open = probes_.create(std::string(probe_names::vfs_open), "vfs");
  ids_.import_resolved = probes_.create(std::string(probe_names::import_resolved), "loader");
  ids_.syscall = probes_.create(std::string(probe_names::syscall), "engine");
  syscall_on_ = probes_.enabled_flag(ids_.syscall);

  translator_.set_logger(&logger_);
  translator_.set_split_points(&split_points_);
  mmu_.set_write_hook([this](uint32_t va, uint64_t len) {
    const size_t n = cache_.invalidate(va, len);
    if (n && logger_.enabled(LogModule::engine, LogLevel::debug)) {
      logger_.log(LogModule::engine, LogLevel::debug,
                  fmt::format("write to 0x{:08X} invalidated {} block(s)", va, n));
    }
  });

  for (const char* key : {"engine.tier_threshold", "engine.cache", "engine.cache_capacity",
                          "engine.backend", "engine.max_block_instrs", "stop.threshold_metrics",
                          "stop.metrics_per_second", "stop.weights", "stop.max_blocks",
                          "mmu.enforce_protection"}) {
    config_.subscribe(key, [this](const ConfigValue&) { apply_config(); });
  }
  apply_config();
  install_fpu_handlers();
}

Engine::~Engine() {
  mmu_.set_write_hook({});
  mmu_.set_write_observer({});
  mmu_.set_force_slow_writes(false);
}

void Engine::apply_config() {
  tier_threshold_ = static_cast<uint64_t>(config_.get_int("engine.tier_threshold"));
  max_blocks_ = static_cast<uint64_t>(config_.get_int("stop.max_blocks"));
  cache_.set_strategy(config_.get_string("engine.cache") == "lru" ? CacheStrategy::lru
                                                                   : CacheStrategy::unbounded,
                      static_cast<size_t>(config_.get_int("engine.cache_capacity")));
  const bool want_backend = config_.get_string("engine.backend") != "none";
  if (want_backend != (backend_ != nullptr)) {
    backend_ = want_backend ? make_predecoded_backend() : nullptr;
    cache_.clear();  // compiled forms belong to the previous backend
  }
  if (!step_mode_) {
    translator_.set_max_instrs(static_cast<unsigned>(config_.get_int("engine.max_block_instrs")));
  }
  model_.threshold = config_.get_double("stop.threshold_metrics");
  model_.platform_speed = config_.get_double("stop.metrics_per_second");
  try {
    model_.weights = metrics::parse_weights(config_.get_string("stop.weights"));
  } catch (const metrics::MetricsError& e) {
    logger_.log(LogModule::metrics, LogLevel::info, fmt::format("stop.weights ignored: {}", e.what()));
  }
  mmu_.set_enforce_protection(config_.get_bool("mmu.enforce_protection"));
}

void Engine::install_fpu_handlers() {
  register_syscall(sysno::fabs, [](Engine& e, MachineState&, Mmu&) {
    double& st0 = e.fpu().st(0);
    if (!std::isnan(st0)) st0 = std::fabs(st0);
  });
  register_syscall(sysno::fchs, [](Engine& e, MachineState&, Mmu&) {
    double& st0 = e.fpu().st(0);
    st0 = -st0;
  });
  register_syscall(sysno::fsqrt, [](Engine& e, MachineState&, Mmu&) {
    double& st0 = e.fpu().st(0);
    st0 = std::sqrt(st0);
  });
  register_syscall(sysno::fld1, [](Engine& e, MachineState&, Mmu&) { e.fpu().push(1.0); });
}

void Engine::register_syscall(uint32_t id, SyscallHandler handler) {
  syscalls_[id] = std::move(handler);
}

bool Engine::handle_syscall(uint32_t id, MachineState& state) {
  auto it = syscalls_.find(id);
  if (it == syscalls_.end()) return false;
  it->second(*this, state, mmu_);
  return true;
}

void Engine::request_exit(uint32_t code) {
  StopReason r;
  r.kind = StopKind::guest_exit;
  r.code = code;
  pending_stop_ = r;
}

void Engine::add_split_point(uint32_t va) {
  if (split_points_.insert(va).second) cache_.invalidate(va, 1);
}

void Engine::remove_split_point(uint32_t va) { split_points_.erase(va); }

void Engine::reset_counters() { counters_ = {}; }

EntryPtr Engine::fetch(uint32_t va) {
  if (EntryPtr e = cache_.find(va)) {
    if (!step_mode_ || e->block.guest_count <= 1) return e;
    cache_.erase(va);
  }
  auto e = std::make_shared<CacheEntry>();
  e->block = translator_.translate(mmu_, va);
  ++counters_.blocks_translated;
  cache_.insert(e);
  return e;
}

CacheEntry& Engine::lookup_or_translate(uint32_t va) {
  EntryPtr e = fetch(va);
  // the cache keeps the entry alive
  return *e;
}

bool Engine::fire_stop(ProbeId id, ProbeContext& ctx) {
  probes_.fire(id, ctx);
  return ctx.verdict == Verdict::stop;
}

template <bool WithProbes>
StopReason Engine::run_impl(MachineState& st, uint32_t start_va, RunOptions opts) {
  pending_stop_.reset();
  watch_stop_.reset();
  uint32_t pc = start_va;
  bool skip_enter = opts.skip_first_enter;

  auto stop = [&](StopKind k) {
    StopReason r;
    r.kind = k;
    r.va = pc;
    st.pc = pc;
    return r;
  };

  for (;;) {
    st.pc = pc;
    counters_.pages_mapped = mmu_.pages_mapped_total();
    if (model_.threshold > 0) {
      const double m = model_.metric(counters_);
      if (m >= model_.threshold) {
        StopReason r = stop(StopKind::metric_threshold);
        r.metric = m;
        return r;
      }
    }
    if (max_blocks_ && counters_.blocks_executed >= max_blocks_) return stop(StopKind::block_limit);

    EntryPtr entry;
    try {
      entry = fetch(pc);
    } catch (const x86::GuestError& err) {
      if (err.code() == x86::GuestErrc::unmapped_fetch) {
        StopReason r = stop(StopKind::fault);
        r.fault.kind = FaultKind::unmapped_fetch;
        r.fault.va = err.va();
        r.fault.pc = pc;
        return r;
      }
      StopReason r = stop(StopKind::unsupported_instruction);
      r.message = err.what();
      return r;
    }
    CacheEntry& ce = *entry;

    if constexpr (WithProbes) {
      if (!skip_enter && (*enter_on_ || step_mode_)) {
        ProbeContext ctx;
        ctx.pc = pc;
        ctx.block_va = pc;
        ctx.block = &ce.block;
        ctx.state = &st;
        ctx.mmu = &mmu_;
        if (fire_stop(ids_.block_enter, ctx)) return stop(StopKind::breakpoint);
        if (step_mode_) {
          std::string text;
          try {
            text = x86::format(x86::decode_guest(mmu_, pc));
          } catch (const x86::GuestError&) {
          }
          ctx.text = text;
          if (fire_stop(ids_.step_mode, ctx)) return stop(StopKind::breakpoint);
        }
      }
      skip_enter = false;
    }

    if (backend_ && !ce.compiled && ce.block.exec_count >= tier_threshold_) {
      ce.compiled = backend_->compile(ce.block);
      ce.block.tier = xir::Tier::compiled;
      ++compiles_;
    }

    ++counters_.blocks_executed;
    auto execute = [&](uint32_t from) {
      if (ce.compiled && backend_) return backend_->run(st, mmu_, ce.block, *ce.compiled, &counters_, from);
      return run_block(st, mmu_, ce.block, &counters_, from);
    };
    BlockExit x = execute(0);
    while (x.kind == BlockExit::Kind::syscall) {
      ++counters_.syscalls;
      if constexpr (WithProbes) {
        if (*syscall_on_) {
          ProbeContext ctx;
          ctx.pc = pc;
          ctx.block_va = pc;
          ctx.state = &st;
          ctx.mmu = &mmu_;
          ctx.value = x.value;
          probes_.fire(ids_.syscall, ctx);
        }
      }
      if (!handle_syscall(x.value, st)) {
        StopReason r = stop(StopKind::unknown_syscall);
        r.code = x.value;
        return r;
      }
      if (pending_stop_) {
        StopReason r = std::move(*pending_stop_);
        pending_stop_.reset();
        r.va = pc;
        st.pc = pc;
        return r;
      }
      x = execute(x.resume);
    }
    if (x.kind == BlockExit::Kind::fault) {
      pc = x.fault.pc;
      StopReason r = stop(StopKind::fault);
      r.fault = x.fault;
      return r;
    }
    pc = x.value;

    if constexpr (WithProbes) {
      if (*exit_on_) {
        ProbeContext ctx;
        ctx.pc = pc;
        ctx.block_va = ce.block.entry_va;
        ctx.block = &ce.block;
        ctx.state = &st;
        ctx.mmu = &mmu_;
        if (fire_stop(ids_.block_exit, ctx)) return stop(StopKind::breakpoint);
      }
      if (watch_stop_) {
        StopReason r = *watch_stop_;
        watch_stop_.reset();
        r.va = pc;
        st.pc = pc;
        return r;
      }
    }
  }
}

StopReason Engine::run(MachineState& state, uint32_t start_va, RunOptions opts) {
  return run_impl<true>(state, start_va, opts);
}

StopReason Engine::run_without_probes(MachineState& state, uint32_t start_va) {
  return run_impl<false>(state, start_va, {});
}

}  // namespace pinky
