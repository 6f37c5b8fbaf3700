#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "pinky/mmu.hpp"
#include "support/mmu_model.hpp"
#include "support/scenarios.hpp"

using namespace pinky;
namespace fs = std::filesystem;

TEST(MmuProperty, RandomOperationsMatchPageModel) {
  EXPECT_EQ(support::mmu_random_operations(0x3117, 100000), "");
}

TEST(MmuPages, CrossingRoundtrip) {
  Mmu mmu;
  mmu.pmap(3 * kPageSize, 0x40000, map_flags::rwx | map_flags::fixed);
  mmu.pmap(kPageSize, 0x43000, map_flags::rwx | map_flags::fixed);  // separate region, adjacent
  for (uint32_t off : {0xFFDu, 0x1FFFu, 0x2FFEu}) {
    std::vector<uint8_t> data(9);
    for (size_t k = 0; k < data.size(); ++k) data[k] = static_cast<uint8_t>(off + k);
    mmu.write_memory(0x40000 + off, data);
    EXPECT_EQ(mmu.read_memory(0x40000 + off, 9), data);
  }
  mmu.write_u32(0x40FFE, 0xA1B2C3D4);
  EXPECT_EQ(mmu.read_u32(0x40FFE), 0xA1B2C3D4u);
  EXPECT_EQ(mmu.read_memory(0x40FFE, 4), (std::vector<uint8_t>{0xD4, 0xC3, 0xB2, 0xA1}));
}

TEST(MmuPages, FailedWriteIsAtomic) {
  Mmu mmu;
  mmu.pmap(kPageSize, 0x40000, map_flags::rwx | map_flags::fixed);
  const std::vector<uint8_t> data(8, 0xEE);
  EXPECT_THROW(mmu.write_memory(0x40FFC, data), MmuError);
  EXPECT_EQ(mmu.read_memory(0x40FFC, 4), (std::vector<uint8_t>(4, 0)));
  const auto f = mmu.try_write(0x40FFC, data);
  ASSERT_TRUE(f);
  EXPECT_EQ(f->va, 0x41000u);
}

TEST(MmuPages, RemoveSplitsAndTopOfSpace) {
  Mmu mmu;
  mmu.pmap(4 * kPageSize, 0x10000, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "four");
  mmu.write_memory(0x13000, std::vector<uint8_t>{1, 2, 3});
  mmu.pmap_remove(0x11000, 0x12000);
  ASSERT_EQ(mmu.regions().size(), 2u);
  EXPECT_EQ(mmu.region_at(0x13000)->label, "four");
  EXPECT_EQ(mmu.read_memory(0x13000, 3), (std::vector<uint8_t>{1, 2, 3}));
  EXPECT_FALSE(mmu.is_mapped(0x11000));

  mmu.pmap(kPageSize, 0xFFFFF000, map_flags::rwx | map_flags::fixed);
  EXPECT_TRUE(mmu.is_mapped(0xFFFFFFFF));
  mmu.pmap_remove(0xFFFFF000, uint64_t{1} << 32);
  EXPECT_FALSE(mmu.is_mapped(0xFFFFFFFF));
  EXPECT_THROW(mmu.pmap_remove(0x10001, 0x20000), MmuError);
  EXPECT_TRUE(mmu.check_invariants().empty());
}

TEST(MmuPages, ProtectionEnforcement) {
  Mmu mmu;
  mmu.pmap(kPageSize, 0x10000, map_flags::read | map_flags::fixed);
  const std::vector<uint8_t> one{1};
  EXPECT_NO_THROW(mmu.write_memory(0x10000, one));  // advisory by default
  mmu.set_enforce_protection(true);
  try {
    mmu.write_memory(0x10000, one);
    FAIL();
  } catch (const MmuError& e) {
    EXPECT_EQ(e.code(), MmuErrc::protection);
  }
  EXPECT_EQ(mmu.read_memory(0x10000, 1), one);
}

TEST(MmuDump, RestoreReproducesEveryRegion) {
  std::mt19937_64 rng(4);
  Mmu a;
  a.pmap(2 * kPageSize, 0x400000, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "image");
  a.pmap(kPageSize, 0x7FFE0000, map_flags::read | map_flags::fixed, 0, 0xFFFFFFFF, "peb");
  a.pmap(5 * kPageSize, 0x10000000, map_flags::rwx, 0x10000000, 0x20000000, "heap");
  for (const auto& [start, r] : a.regions()) {
    std::vector<uint8_t> data(r.size);
    for (auto& b : data) b = static_cast<uint8_t>(rng());
    a.write_memory(start, data);
  }
  const fs::path dir = fs::temp_directory_path() / "pinky_mmu_dump_test";
  fs::remove_all(dir);
  a.dump(dir);
  Mmu b;
  b.pmap(kPageSize, 0x1000, map_flags::rwx | map_flags::fixed);  // replaced by restore
  b.restore(dir);
  EXPECT_EQ(support::memory_image(a), support::memory_image(b));
  EXPECT_TRUE(b.check_invariants().empty());
  EXPECT_FALSE(b.is_mapped(0x1000));
  // dumping the restored image gives the same files
  const fs::path again = dir.string() + "_again";
  fs::remove_all(again);
  b.dump(again);
  Mmu c;
  c.restore(again);
  EXPECT_EQ(support::memory_image(a), support::memory_image(c));
  fs::remove_all(dir);
  fs::remove_all(again);

  Mmu d;
  try {
    d.restore(fs::temp_directory_path() / "pinky_no_such_dump");
    FAIL();
  } catch (const MmuError& e) {
    EXPECT_EQ(e.code(), MmuErrc::io_error);
  }
}

TEST(MmuWatch, HookSeesWritesToWatchedPages) {
  Mmu mmu;
  mmu.pmap(2 * kPageSize, 0x10000, map_flags::rwx | map_flags::fixed);
  std::vector<std::pair<uint32_t, uint64_t>> seen;
  mmu.set_write_hook([&](uint32_t va, uint64_t len) { seen.emplace_back(va, len); });
  mmu.watch_page(page_of(0x11000), true);
  EXPECT_EQ(mmu.fast_write_page(page_of(0x11000)), nullptr);
  EXPECT_NE(mmu.fast_write_page(page_of(0x10000)), nullptr);
  mmu.write_memory(0x10000, std::vector<uint8_t>{1});
  mmu.write_memory(0x10FFF, std::vector<uint8_t>{1, 2});
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_EQ(seen[0], std::make_pair(0x10FFFu, uint64_t{2}));
}
