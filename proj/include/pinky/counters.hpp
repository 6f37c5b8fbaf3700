#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace pinky {

/// Work counters sampled by the stopping model.
struct Counters {
  static constexpr size_t kCount = 8;

  uint64_t blocks_translated = 0;
  uint64_t blocks_executed = 0;
  uint64_t instrs_interpreted = 0;
  uint64_t mem_loads = 0;
  uint64_t mem_stores = 0;
  uint64_t syscalls = 0;
  uint64_t api_calls = 0;
  uint64_t pages_mapped = 0;

  static constexpr std::array<std::string_view, kCount> names() {
    return {"blocks_translated", "blocks_executed", "instrs_interpreted", "mem_loads",
            "mem_stores",        "syscalls",        "api_calls",          "pages_mapped"};
  }

  std::array<uint64_t, kCount> values() const {
    return {blocks_translated, blocks_executed, instrs_interpreted, mem_loads,
            mem_stores,        syscalls,        api_calls,          pages_mapped};
  }

  friend bool operator==(const Counters&, const Counters&) = default;
};

}  // namespace pinky
