#pragma once

// Load/store helpers used by both execution tiers: a direct page access
// when the span stays inside one fast page, the MMU path otherwise.

#include <bit>
#include <cstring>

#include "pinky/mmu.hpp"
#include "pinky/vm.hpp"

namespace pinky::detail {

static_assert(std::endian::native == std::endian::little, "host must be little-endian");

inline bool guest_load(const Mmu& mmu, uint32_t va, unsigned size, uint32_t& out, FaultInfo& f) {
  const uint32_t off = page_offset(va);
  if (off + size <= kPageSize) {
    if (const uint8_t* p = mmu.read_page(page_of(va))) [[likely]] {
      uint32_t v = 0;
      std::memcpy(&v, p + off, size);
      out = v;
      return true;
    }
  }
  uint8_t buf[4] = {};
  if (auto fault = mmu.try_read(va, std::span<uint8_t>(buf, size))) {
    f.kind = fault->protection ? FaultKind::protection_read : FaultKind::unmapped_read;
    f.va = fault->va;
    f.size = static_cast<uint8_t>(size);
    return false;
  }
  uint32_t v = 0;
  std::memcpy(&v, buf, size);
  out = v;
  return true;
}

inline bool guest_store(Mmu& mmu, uint32_t va, unsigned size, uint32_t value, FaultInfo& f) {
  const uint32_t off = page_offset(va);
  if (off + size <= kPageSize) {
    if (uint8_t* p = mmu.fast_write_page(page_of(va))) [[likely]] {
      std::memcpy(p + off, &value, size);
      return true;
    }
  }
  uint8_t buf[4];
  std::memcpy(buf, &value, 4);
  if (auto fault = mmu.try_write(va, std::span<const uint8_t>(buf, size))) {
    f.kind = fault->protection ? FaultKind::protection_write : FaultKind::unmapped_write;
    f.va = fault->va;
    f.size = static_cast<uint8_t>(size);
    return false;
  }
  return true;
}

/// Width-masked register write that keeps the untouched upper bytes.
inline void write_reg(MachineState& s, xir::Reg dst, uint32_t value, uint32_t mask) {
  if (dst == 0) return;
  uint32_t& r = s.regs[dst];
  r = (r & ~mask) | (value & mask);
}

}  // namespace pinky::detail
