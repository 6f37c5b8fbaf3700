#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pinky {

inline constexpr uint32_t kPageSize = 4096;
inline constexpr unsigned kPageBits = 12;

constexpr uint32_t page_of(uint32_t va) { return va >> kPageBits; }
constexpr uint32_t page_offset(uint32_t va) { return va & (kPageSize - 1); }

/// Region flags. Protection bits are advisory unless enforcement is on.
namespace map_flags {
inline constexpr uint32_t read = 0x1;
inline constexpr uint32_t write = 0x2;
inline constexpr uint32_t exec = 0x4;
inline constexpr uint32_t rwx = read | write | exec;
inline constexpr uint32_t fixed = 0x10;
}  // namespace map_flags

enum class MmuErrc {
  range_exhausted,
  fixed_collision,
  unmapped_read,
  unmapped_write,
  protection,
  invalid_argument,
  io_error,
};

class MmuError : public std::runtime_error {
 public:
  MmuError(MmuErrc code, uint32_t va, const std::string& what)
      : std::runtime_error(what), code_(code), va_(va) {}
  MmuErrc code() const { return code_; }
  uint32_t va() const { return va_; }

 private:
  MmuErrc code_;
  uint32_t va_;
};

struct Region {
  uint32_t start = 0;
  uint32_t size = 0;  // multiple of kPageSize
  uint32_t flags = 0;
  std::string label;
  std::unique_ptr<uint8_t[]> memory;

  uint64_t end() const { return uint64_t{start} + size; }
};

/// Guest memory: flat 4 KiB paging over the 32-bit address space with
/// O(1) page lookup and contiguous per-region backing storage.
class Mmu {
 public:
  using WriteHook = std::function<void(uint32_t va, uint64_t len)>;
  using WriteObserver = std::function<void(uint32_t va, std::span<const uint8_t> bytes)>;

  Mmu();
  Mmu(const Mmu&) = delete;
  Mmu& operator=(const Mmu&) = delete;

  uint32_t pmap(uint64_t size, uint32_t pref_va, uint32_t flags = map_flags::rwx,
                uint32_t min_va = 0, uint32_t max_va = 0xFFFFFFFF,
                std::string label = "anon");
  uint32_t pmap_lookup(uint32_t count, uint32_t pref_va, uint32_t min_va = 0,
                       uint32_t max_va = 0xFFFFFFFF) const;
  /// Unmaps [start_va, end_va); both bounds page-aligned, end_va may be
  /// 2^32.
  void pmap_remove(uint32_t start_va, uint64_t end_va);

  void read_memory(uint32_t va, std::span<uint8_t> out) const;
  void write_memory(uint32_t va, std::span<const uint8_t> bytes);
  std::vector<uint8_t> read_memory(uint32_t va, uint32_t size) const;

  struct AccessFault {
    uint32_t va;
    bool protection;
  };
  /// Non-throwing variants; report the first faulting VA on failure.
  std::optional<AccessFault> try_read(uint32_t va, std::span<uint8_t> out) const;
  std::optional<AccessFault> try_write(uint32_t va, std::span<const uint8_t> bytes);

  uint32_t read_u32(uint32_t va) const;
  void write_u32(uint32_t va, uint32_t value);

  bool is_mapped(uint32_t va) const { return entry(page_of(va)).host != nullptr; }

  /// Direct host pointers for the interpreter's fast path. Null when the
  /// page is unmapped or when writes must go through write_memory.
  const uint8_t* read_page(uint32_t page) const { return entry(page).fast_read; }
  uint8_t* fast_write_page(uint32_t page) const { return entry(page).fast_write; }

  /// Writes into watched pages bypass the fast path and fire the hook.
  void watch_page(uint32_t page, bool on);
  bool is_watched(uint32_t page) const { return entry(page).watched; }
  void set_write_hook(WriteHook hook) { write_hook_ = std::move(hook); }

  /// Routes every write through write_memory and reports it (mmu.write).
  void set_write_observer(WriteObserver obs);
  void set_force_slow_writes(bool on);

  void set_enforce_protection(bool on);
  bool enforce_protection() const { return enforce_protection_; }

  void dump(const std::filesystem::path& dir) const;
  /// Replaces all mappings with the contents of a dump directory.
  void restore(const std::filesystem::path& dir);
  void clear();

  const std::map<uint32_t, Region>& regions() const { return regions_; }
  const Region* region_at(uint32_t va) const;
  size_t mapped_pages() const { return mapped_pages_; }
  /// Monotone count of pages ever mapped.
  uint64_t pages_mapped_total() const { return pages_mapped_total_; }

  /// Region-cover check: regions are disjoint, page-aligned and map
  /// exactly the set of present pages. Returns violations.
  std::vector<std::string> check_invariants() const;

 private:
  struct PageEntry {
    uint8_t* host = nullptr;
    uint8_t* fast_read = nullptr;
    uint8_t* fast_write = nullptr;
    bool watched = false;
    bool writable = true;
    bool readable = true;
  };
  using Table = std::array<PageEntry, 1024>;

  const PageEntry& entry(uint32_t page) const {
    const auto& t = dir_[page >> 10];
    return t ? (*t)[page & 1023] : kEmpty;
  }
  PageEntry& entry_mut(uint32_t page);
  void refresh_fast(PageEntry& e) const;
  void install(Region& r);
  void uninstall(uint32_t first_page, uint32_t count);
  std::optional<uint32_t> find_free(uint64_t size, uint64_t from, uint64_t min, uint64_t max) const;
  bool range_free(uint64_t start, uint64_t size) const;
  std::optional<AccessFault> check_range(uint32_t va, size_t len, bool for_write) const;

  static const PageEntry kEmpty;

  std::array<std::unique_ptr<Table>, 1024> dir_;
  std::map<uint32_t, Region> regions_;
  size_t mapped_pages_ = 0;
  uint64_t pages_mapped_total_ = 0;
  size_t watched_pages_ = 0;
  bool force_slow_ = false;
  bool enforce_protection_ = false;
  WriteHook write_hook_;
  WriteObserver write_observer_;
};

}  // namespace pinky
