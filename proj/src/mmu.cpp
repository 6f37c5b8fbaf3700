#include "pinky/mmu.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pinky {

namespace fs = std::filesystem;

const Mmu::PageEntry Mmu::kEmpty{};

namespace {

constexpr uint64_t kSpace = uint64_t{1} << 32;

constexpr uint64_t align_up(uint64_t v) { return (v + kPageSize - 1) & ~uint64_t{kPageSize - 1}; }

}  // namespace

Mmu::Mmu() = default;

Mmu::PageEntry& Mmu::entry_mut(uint32_t page) {
  auto& t = dir_[page >> 10];
  if (!t) t = std::make_unique<Table>();
  return (*t)[page & 1023];
}

void Mmu::refresh_fast(PageEntry& e) const {
  const bool can_read = !enforce_protection_ || e.readable;
  const bool can_write = !enforce_protection_ || e.writable;
  e.fast_read = e.host && can_read ? e.host : nullptr;
  e.fast_write = e.host && can_write && !e.watched && !force_slow_ ? e.host : nullptr;
}

void Mmu::install(Region& r) {
  const uint32_t first = page_of(r.start);
  const uint32_t count = r.size / kPageSize;
  for (uint32_t i = 0; i < count; ++i) {
    auto& e = entry_mut(first + i);
    e.host = r.memory.get() + size_t{i} * kPageSize;
    e.readable = (r.flags & map_flags::read) != 0;
    e.writable = (r.flags & map_flags::write) != 0;
    refresh_fast(e);
  }
}

void Mmu::uninstall(uint32_t first_page, uint32_t count) {
  for (uint32_t i = 0; i < count; ++i) {
    auto& e = entry_mut(first_page + i);
    if (e.watched) --watched_pages_;
    e = PageEntry{};
  }
}

bool Mmu::range_free(uint64_t start, uint64_t size) const {
  auto it = regions_.lower_bound(static_cast<uint32_t>(std::min<uint64_t>(start, 0xFFFFFFFF)));
  if (it != regions_.begin()) {
    auto prev = std::prev(it);
    if (prev->second.end() > start) return false;
  }
  return it == regions_.end() || it->second.start >= start + size;
}

std::optional<uint32_t> Mmu::find_free(uint64_t size, uint64_t from, uint64_t min,
                                       uint64_t max) const {
  uint64_t cand = std::max(align_up(from), align_up(min));
  while (cand + size - 1 <= max && cand + size <= kSpace) {
    auto it = regions_.upper_bound(static_cast<uint32_t>(cand));
    if (it != regions_.begin()) {
      const auto& prev = std::prev(it)->second;
      if (prev.end() > cand) {
        cand = prev.end();
        continue;
      }
    }
    if (it != regions_.end() && it->second.start < cand + size) {
      cand = it->second.end();
      continue;
    }
    return static_cast<uint32_t>(cand);
  }
  return std::nullopt;
}

uint32_t Mmu::pmap_lookup(uint32_t count, uint32_t pref_va, uint32_t min_va,
                          uint32_t max_va) const {
  if (count == 0 || min_va > max_va) {
    throw MmuError(MmuErrc::invalid_argument, pref_va, "pmap_lookup: bad arguments");
  }
  const uint64_t size = uint64_t{count} * kPageSize;
  uint64_t from = pref_va;
  if (from < min_va || from > max_va) from = min_va;
  if (auto va = find_free(size, from, min_va, max_va)) return *va;
  if (from > min_va) {
    if (auto va = find_free(size, min_va, min_va, max_va)) return *va;
  }
  throw MmuError(MmuErrc::range_exhausted, pref_va,
                 fmt::format("no room for {} pages in [0x{:08x}, 0x{:08x}]", count, min_va, max_va));
}

uint32_t Mmu::pmap(uint64_t size, uint32_t pref_va, uint32_t flags, uint32_t min_va,
                   uint32_t max_va, std::string label) {
  if (size == 0 || min_va > max_va) {
    throw MmuError(MmuErrc::invalid_argument, pref_va, "pmap: bad arguments");
  }
  const uint64_t bytes = align_up(size);
  if (bytes >= kSpace) throw MmuError(MmuErrc::range_exhausted, pref_va, "pmap: size too large");

  uint32_t va;
  if (flags & map_flags::fixed) {
    if (page_offset(pref_va) != 0) {
      throw MmuError(MmuErrc::invalid_argument, pref_va, "pmap: fixed address not page-aligned");
    }
    if (uint64_t{pref_va} + bytes > kSpace) {
      throw MmuError(MmuErrc::range_exhausted, pref_va, "pmap: fixed range exceeds space");
    }
    if (!range_free(pref_va, bytes)) {
      throw MmuError(MmuErrc::fixed_collision, pref_va,
                     fmt::format("pmap: 0x{:08x} already mapped", pref_va));
    }
    va = pref_va;
  } else {
    va = pmap_lookup(static_cast<uint32_t>(bytes / kPageSize), pref_va, min_va, max_va);
  }

  Region r;
  r.start = va;
  r.size = static_cast<uint32_t>(bytes);
  r.flags = flags;
  r.label = label.empty() ? "anon" : std::move(label);
  r.memory = std::make_unique<uint8_t[]>(r.size);  // value-initialized: zero pages
  auto [it, _] = regions_.emplace(va, std::move(r));
  install(it->second);
  const uint32_t pages = it->second.size / kPageSize;
  mapped_pages_ += pages;
  pages_mapped_total_ += pages;
  return va;
}

void Mmu::pmap_remove(uint32_t start_va, uint64_t end_va) {
  if (page_offset(start_va) != 0 || (end_va & (kPageSize - 1)) != 0 || end_va > kSpace) {
    throw MmuError(MmuErrc::invalid_argument, start_va, "pmap_remove: unaligned bounds");
  }
  if (end_va <= start_va) return;

  std::vector<uint32_t> touched;
  for (auto it = regions_.begin(); it != regions_.end(); ++it) {
    if (it->second.end() > start_va && it->second.start < end_va) touched.push_back(it->first);
  }
  for (uint32_t key : touched) {
    auto node = regions_.extract(key);
    Region& old = node.mapped();
    const uint64_t cut_lo = std::max<uint64_t>(old.start, start_va);
    const uint64_t cut_hi = std::min<uint64_t>(old.end(), end_va);
    const uint32_t removed = static_cast<uint32_t>((cut_hi - cut_lo) / kPageSize);
    uninstall(page_of(static_cast<uint32_t>(cut_lo)), removed);
    mapped_pages_ -= removed;

    auto keep = [&](uint64_t lo, uint64_t hi) {
      if (hi <= lo) return;
      Region part;
      part.start = static_cast<uint32_t>(lo);
      part.size = static_cast<uint32_t>(hi - lo);
      part.flags = old.flags;
      part.label = old.label;
      part.memory = std::make_unique<uint8_t[]>(part.size);
      std::memcpy(part.memory.get(), old.memory.get() + (lo - old.start), part.size);
      auto [ins, _] = regions_.emplace(part.start, std::move(part));
      install(ins->second);
    };
    keep(old.start, cut_lo);
    keep(cut_hi, old.end());
  }
  if (write_hook_) write_hook_(start_va, end_va - start_va);
}

std::optional<Mmu::AccessFault> Mmu::check_range(uint32_t va, size_t len, bool for_write) const {
  if (len == 0) return std::nullopt;
  const uint64_t last = uint64_t{va} + len - 1;
  if (last >= kSpace) {
    // wraps past 4 GiB: fault at the first unmapped byte or at 2^32
    for (uint64_t p = page_of(va); p <= 0xFFFFF; ++p) {
      const auto& e = entry(static_cast<uint32_t>(p));
      if (!e.host) return AccessFault{std::max(va, static_cast<uint32_t>(p << kPageBits)), false};
    }
    return AccessFault{0, false};
  }
  for (uint64_t p = page_of(va); p <= (last >> kPageBits); ++p) {
    const auto& e = entry(static_cast<uint32_t>(p));
    const uint32_t at = std::max(va, static_cast<uint32_t>(p << kPageBits));
    if (!e.host) return AccessFault{at, false};
    if (enforce_protection_ && !(for_write ? e.writable : e.readable)) return AccessFault{at, true};
  }
  return std::nullopt;
}

std::optional<Mmu::AccessFault> Mmu::try_read(uint32_t va, std::span<uint8_t> out) const {
  if (auto f = check_range(va, out.size(), false)) return f;
  size_t done = 0;
  while (done < out.size()) {
    const uint32_t at = va + static_cast<uint32_t>(done);
    const size_t chunk = std::min<size_t>(out.size() - done, kPageSize - page_offset(at));
    std::memcpy(out.data() + done, entry(page_of(at)).host + page_offset(at), chunk);
    done += chunk;
  }
  return std::nullopt;
}

std::optional<Mmu::AccessFault> Mmu::try_write(uint32_t va, std::span<const uint8_t> bytes) {
  if (auto f = check_range(va, bytes.size(), true)) return f;
  size_t done = 0;
  bool hit_watched = false;
  while (done < bytes.size()) {
    const uint32_t at = va + static_cast<uint32_t>(done);
    const size_t chunk = std::min<size_t>(bytes.size() - done, kPageSize - page_offset(at));
    const auto& e = entry(page_of(at));
    hit_watched |= e.watched;
    std::memcpy(e.host + page_offset(at), bytes.data() + done, chunk);
    done += chunk;
  }
  if (write_observer_) write_observer_(va, bytes);
  if (hit_watched && write_hook_) write_hook_(va, bytes.size());
  return std::nullopt;
}

void Mmu::read_memory(uint32_t va, std::span<uint8_t> out) const {
  if (auto f = try_read(va, out)) {
    throw MmuError(f->protection ? MmuErrc::protection : MmuErrc::unmapped_read, f->va,
                   fmt::format("read fault at 0x{:08x}", f->va));
  }
}

void Mmu::write_memory(uint32_t va, std::span<const uint8_t> bytes) {
  if (auto f = try_write(va, bytes)) {
    throw MmuError(f->protection ? MmuErrc::protection : MmuErrc::unmapped_write, f->va,
                   fmt::format("write fault at 0x{:08x}", f->va));
  }
}

std::vector<uint8_t> Mmu::read_memory(uint32_t va, uint32_t size) const {
  std::vector<uint8_t> out(size);
  read_memory(va, out);
  return out;
}

uint32_t Mmu::read_u32(uint32_t va) const {
  uint8_t b[4];
  read_memory(va, b);
  return uint32_t{b[0]} | (uint32_t{b[1]} << 8) | (uint32_t{b[2]} << 16) | (uint32_t{b[3]} << 24);
}

void Mmu::write_u32(uint32_t va, uint32_t value) {
  const uint8_t b[4] = {static_cast<uint8_t>(value), static_cast<uint8_t>(value >> 8),
                        static_cast<uint8_t>(value >> 16), static_cast<uint8_t>(value >> 24)};
  write_memory(va, b);
}

void Mmu::watch_page(uint32_t page, bool on) {
  auto& e = entry_mut(page);
  if (!e.host || e.watched == on) return;
  e.watched = on;
  watched_pages_ += on ? 1 : -1;
  refresh_fast(e);
}

void Mmu::set_write_observer(WriteObserver obs) { write_observer_ = std::move(obs); }

void Mmu::set_force_slow_writes(bool on) {
  if (force_slow_ == on) return;
  force_slow_ = on;
  for (auto& [start, r] : regions_) install(r);
}

void Mmu::set_enforce_protection(bool on) {
  if (enforce_protection_ == on) return;
  enforce_protection_ = on;
  for (auto& [start, r] : regions_) install(r);
}

const Region* Mmu::region_at(uint32_t va) const {
  auto it = regions_.upper_bound(va);
  if (it == regions_.begin()) return nullptr;
  --it;
  return it->second.end() > va ? &it->second : nullptr;
}

void Mmu::dump(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream manifest(dir / "manifest.txt", std::ios::binary | std::ios::trunc);
  if (!manifest) {
    throw MmuError(MmuErrc::io_error, 0, "cannot write " + (dir / "manifest.txt").string());
  }
  for (const auto& [start, r] : regions_) {
    const auto name = fmt::format("region_{:08x}.bin", start);
    std::ofstream bin(dir / name, std::ios::binary | std::ios::trunc);
    bin.write(reinterpret_cast<const char*>(r.memory.get()), r.size);
    if (!bin) throw MmuError(MmuErrc::io_error, start, "cannot write " + (dir / name).string());
    manifest << fmt::format("{:08x} {} {:x} {}\n", start, r.size, r.flags, r.label);
  }
  if (!manifest) throw MmuError(MmuErrc::io_error, 0, "manifest write failed");
}

void Mmu::restore(const fs::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw MmuError(MmuErrc::io_error, 0, "cannot read " + (dir / "manifest.txt").string());
  clear();
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string start_hex, flags_hex, label;
    uint64_t size = 0;
    in >> start_hex >> size >> flags_hex;
    std::getline(in >> std::ws, label);
    const auto start = static_cast<uint32_t>(std::stoul(start_hex, nullptr, 16));
    const auto flags = static_cast<uint32_t>(std::stoul(flags_hex, nullptr, 16));
    pmap(size, start, flags | map_flags::fixed, 0, 0xFFFFFFFF, label);
    regions_.at(start).flags = flags;

    const auto name = fmt::format("region_{:08x}.bin", start);
    std::ifstream bin(dir / name, std::ios::binary);
    std::vector<uint8_t> data(size);
    bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
    if (!bin) throw MmuError(MmuErrc::io_error, start, "cannot read " + (dir / name).string());
    std::memcpy(regions_.at(start).memory.get(), data.data(), size);
  }
}

void Mmu::clear() {
  if (!regions_.empty()) pmap_remove(0, kSpace);
}

std::vector<std::string> Mmu::check_invariants() const {
  std::vector<std::string> out;
  uint64_t prev_end = 0;
  size_t region_pages = 0;
  for (const auto& [start, r] : regions_) {
    if (start != r.start) out.push_back(fmt::format("region key mismatch at 0x{:08x}", start));
    if (page_offset(r.start) != 0 || r.size % kPageSize != 0 || r.size == 0) {
      out.push_back(fmt::format("region 0x{:08x} not page-aligned", r.start));
    }
    if (r.start < prev_end) out.push_back(fmt::format("region 0x{:08x} overlaps", r.start));
    prev_end = r.end();
    for (uint32_t i = 0; i < r.size / kPageSize; ++i) {
      if (entry(page_of(r.start) + i).host != r.memory.get() + size_t{i} * kPageSize) {
        out.push_back(fmt::format("page 0x{:05x} not backed by its region", page_of(r.start) + i));
      }
    }
    region_pages += r.size / kPageSize;
  }
  size_t present = 0;
  for (const auto& t : dir_) {
    if (!t) continue;
    for (const auto& e : *t) present += e.host != nullptr;
  }
  if (present != region_pages || present != mapped_pages_) {
    out.push_back(fmt::format("{} present pages, {} in regions, {} counted", present, region_pages,
                              mapped_pages_));
  }
  return out;
}

}  // namespace pinky
