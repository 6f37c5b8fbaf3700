#include "pinky/loader.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>

#include "pinky/config.hpp"
#include "pinky/engine.hpp"
#include "pinky/mmu.hpp"
#include "pinky/translator.hpp"
#include "pinky/vfs.hpp"
#include "pinky/vm.hpp"

namespace pinky {

const char* loader_errc_name(LoaderErrc c) {
  switch (c) {
    case LoaderErrc::bad_dos_magic: return "BadDosMagic";
    case LoaderErrc::bad_nt_magic: return "BadNtMagic";
    case LoaderErrc::truncated_headers: return "TruncatedHeaders";
    case LoaderErrc::unsupported_format: return "UnsupportedFormat";
    case LoaderErrc::bad_image: return "BadImage";
    case LoaderErrc::unresolved_import: return "UnresolvedImport";
    case LoaderErrc::fixed_base_collision: return "FixedBaseCollision";
    case LoaderErrc::import_cycle: return "ImportCycle";
    case LoaderErrc::range_exhausted: return "RangeExhausted";
    case LoaderErrc::fixed_collision: return "FixedCollision";
    case LoaderErrc::empty_image: return "EmptyImage";
  }
  return "?";
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string dll_name(std::string_view s) {
  std::string n = lower(s);
  if (n.find('.') == std::string::npos) n += ".dll";
  return n;
}

uint32_t align_page(uint64_t v) { return static_cast<uint32_t>((v + kPageSize - 1) & ~uint64_t{kPageSize - 1}); }

struct Reader {
  std::span<const uint8_t> b;

  bool has(uint64_t off, uint64_t n) const { return off <= b.size() && n <= b.size() - off; }
  uint16_t u16(uint64_t off) const { return static_cast<uint16_t>(b[off] | b[off + 1] << 8); }
  uint32_t u32(uint64_t off) const {
    return uint32_t{b[off]} | uint32_t{b[off + 1]} << 8 | uint32_t{b[off + 2]} << 16 |
           uint32_t{b[off + 3]} << 24;
  }
};

std::string read_cstring(const Mmu& mmu, uint32_t va, size_t max = 512) {
  std::string out;
  for (size_t i = 0; i < max; ++i) {
    uint8_t c = 0;
    mmu.read_memory(va + static_cast<uint32_t>(i), std::span<uint8_t>(&c, 1));
    if (c == 0) break;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- parsing

namespace pe {

Image parse(std::span<const uint8_t> file) {
  Reader r{file};
  if (file.size() < 2) throw LoaderError(LoaderErrc::truncated_headers, "file too small");
  if (file[0] != 'M' || file[1] != 'Z') throw LoaderError(LoaderErrc::bad_dos_magic, "missing MZ signature");
  if (file.size() < 64) throw LoaderError(LoaderErrc::truncated_headers, "DOS header truncated");
  const uint32_t nt = r.u32(0x3C);
  if (!r.has(nt, 24)) throw LoaderError(LoaderErrc::truncated_headers, "NT headers truncated");
  if (r.u32(nt) != 0x00004550) throw LoaderError(LoaderErrc::bad_nt_magic, "missing PE signature");
  const uint64_t fh = nt + 4;
  if (const uint16_t machine = r.u16(fh); machine != 0x14C) {
    throw LoaderError(LoaderErrc::unsupported_format, fmt::format("machine 0x{:X} is not i386", machine));
  }
  const uint16_t nsec = r.u16(fh + 2);
  const uint16_t opt_size = r.u16(fh + 16);
  const uint64_t opt = fh + 20;
  if (opt_size < 2 || !r.has(opt, opt_size)) {
    throw LoaderError(LoaderErrc::truncated_headers, "optional header truncated");
  }
  const uint16_t magic = r.u16(opt);
  if (magic == 0x20B) throw LoaderError(LoaderErrc::unsupported_format, "PE32+ images are not supported");
  if (magic != 0x10B) throw LoaderError(LoaderErrc::unsupported_format, fmt::format("optional header magic 0x{:X}", magic));
  if (opt_size < 96) throw LoaderError(LoaderErrc::truncated_headers, "optional header too short");

  Image img;
  img.entry_rva = r.u32(opt + 16);
  img.preferred_base = r.u32(opt + 28);
  img.size_of_image = r.u32(opt + 56);
  img.size_of_headers = r.u32(opt + 60);
  const uint32_t ndirs = r.u32(opt + 92);
  auto dir = [&](uint32_t i) {
    DataDir d;
    if (i < ndirs && 96 + 8 * (i + 1) <= opt_size) {
      d.rva = r.u32(opt + 96 + 8 * i);
      d.size = r.u32(opt + 96 + 8 * i + 4);
    }
    return d;
  };
  img.export_dir = dir(0);
  img.import_dir = dir(1);
  img.reloc_dir = dir(5);
  if (img.size_of_image == 0 || img.size_of_image > 0x40000000) {
    throw LoaderError(LoaderErrc::bad_image, fmt::format("SizeOfImage 0x{:X}", img.size_of_image));
  }

  const uint64_t sec = opt + opt_size;
  if (!r.has(sec, uint64_t{40} * nsec)) throw LoaderError(LoaderErrc::truncated_headers, "section table truncated");
  for (unsigned i = 0; i < nsec; ++i) {
    const uint64_t s = sec + 40 * i;
    Section x;
    x.name.assign(reinterpret_cast<const char*>(file.data() + s), 8);
    x.name.resize(std::min(x.name.find('\0'), x.name.size()));
    x.virtual_size = r.u32(s + 8);
    x.rva = r.u32(s + 12);
    x.raw_size = r.u32(s + 16);
    x.raw_offset = r.u32(s + 20);
    x.characteristics = r.u32(s + 36);
    img.sections.push_back(std::move(x));
  }

  auto offset_of = [&](uint32_t rva) -> uint64_t {
    if (rva < img.size_of_headers && rva < file.size()) return rva;
    for (const auto& s : img.sections) {
      if (rva >= s.rva && rva - s.rva < s.raw_size) return uint64_t{s.raw_offset} + (rva - s.rva);
    }
    throw LoaderError(LoaderErrc::bad_image, fmt::format("RVA 0x{:X} not backed by file data", rva));
  };
  auto cstring = [&](uint32_t rva) {
    const uint64_t off = offset_of(rva);
    std::string s;
    for (uint64_t i = off; i < file.size() && file[i] != 0 && s.size() < 512; ++i) {
      s.push_back(static_cast<char>(file[i]));
    }
    return s;
  };

  if (img.import_dir.rva) {
    for (uint32_t d = img.import_dir.rva;; d += 20) {
      const uint64_t off = offset_of(d);
      if (!r.has(off, 20)) throw LoaderError(LoaderErrc::bad_image, "import descriptor truncated");
      const uint32_t oft = r.u32(off), name = r.u32(off + 12), ft = r.u32(off + 16);
      if (name == 0 && ft == 0) break;
      if (img.imports.size() > 4096) throw LoaderError(LoaderErrc::bad_image, "runaway import table");
      ImportDll dll;
      dll.dll = cstring(name);
      const uint32_t thunks = oft ? oft : ft;
      for (uint32_t i = 0;; ++i) {
        const uint64_t toff = offset_of(thunks + 4 * i);
        if (!r.has(toff, 4)) throw LoaderError(LoaderErrc::bad_image, "thunk truncated");
        const uint32_t t = r.u32(toff);
        if (t == 0) break;
        if (i > 65535) throw LoaderError(LoaderErrc::bad_image, "runaway thunk list");
        ImportFunction fn;
        fn.iat_rva = ft + 4 * i;
        if (t & 0x80000000u) {
          fn.ordinal = static_cast<uint16_t>(t);
        } else {
          fn.name = cstring(t + 2);
        }
        dll.functions.push_back(std::move(fn));
      }
      img.imports.push_back(std::move(dll));
    }
  }
  return img;
}

}  // namespace pe

// ---------------------------------------------------------------- shims

uint32_t ShimCall::arg(unsigned i) const {
  return mmu.read_u32(state.regs[xir::reg::esp] + 4 + 4 * i);
}

namespace {

constexpr uint32_t kInvalidHandle = 0xFFFFFFFF;
constexpr uint32_t kStdIn = 0xF0000000, kStdOut = 0xF0000001, kStdErr = 0xF0000002;

uint32_t write_file(ShimCall& c) {
  const uint32_t h = c.arg(0), buf = c.arg(1), n = c.arg(2), written = c.arg(3);
  const auto bytes = c.mmu.read_memory(buf, n);
  if (h == kStdOut || h == kStdErr) {
    c.loader.write_stdout({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
  } else {
    const int fd = c.loader.fd_of(h);
    if (fd < 0) return 0;
    try {
      c.loader.vfs().write(fd, bytes);
    } catch (const VfsError&) {
      return 0;
    }
  }
  if (written) c.mmu.write_u32(written, n);
  return 1;
}

uint32_t read_file(ShimCall& c) {
  const uint32_t h = c.arg(0), buf = c.arg(1), n = c.arg(2), got_ptr = c.arg(3);
  const int fd = c.loader.fd_of(h);
  if (fd < 0) return 0;
  std::vector<uint8_t> tmp(n);
  size_t got = 0;
  try {
    got = c.loader.vfs().read(fd, tmp);
  } catch (const VfsError&) {
    return 0;
  }
  c.mmu.write_memory(buf, std::span<const uint8_t>(tmp.data(), got));
  if (got_ptr) c.mmu.write_u32(got_ptr, static_cast<uint32_t>(got));
  return 1;
}

uint32_t create_file(ShimCall& c) {
  const std::string name = read_cstring(c.mmu, c.arg(0));
  const uint32_t access = c.arg(1), disposition = c.arg(4);
  unsigned mode = 0;
  if (access & 0x80000000u || access == 0) mode |= open_mode::read;
  if (access & 0x40000000u) mode |= open_mode::write;
  Vfs& vfs = c.loader.vfs();
  switch (disposition) {
    case 1:  // CREATE_NEW
      if (vfs.exists(name)) return kInvalidHandle;
      mode |= open_mode::create;
      break;
    case 2: mode |= open_mode::create | open_mode::truncate; break;  // CREATE_ALWAYS
    case 3: break;                                                  // OPEN_EXISTING
    case 4: mode |= open_mode::create; break;                       // OPEN_ALWAYS
    case 5: mode |= open_mode::truncate; break;                     // TRUNCATE_EXISTING
    default: return kInvalidHandle;
  }
  try {
    return c.loader.open_handle(vfs.open(name, mode));
  } catch (const VfsError&) {
    return kInvalidHandle;
  }
}

uint32_t virtual_alloc(ShimCall& c) {
  const uint32_t addr = c.arg(0), size = c.arg(1);
  if (size == 0) return 0;
  try {
    if (addr) {
      if (const Region* r = c.mmu.region_at(addr); r && uint64_t{addr} + size <= r->end()) return addr;
      return c.mmu.pmap(size, addr & ~(kPageSize - 1), map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF,
                        "virtualalloc");
    }
    return c.mmu.pmap(size, 0x00400000, map_flags::rwx, 0x00010000, 0x7FFEFFFF, "virtualalloc");
  } catch (const MmuError&) {
    return 0;
  }
}

uint32_t virtual_free(ShimCall& c) {
  const uint32_t addr = c.arg(0);
  const Region* r = c.mmu.region_at(addr);
  if (!r || r->start != addr || r->label != "virtualalloc") return 0;
  c.mmu.pmap_remove(r->start, r->end());
  return 1;
}

bool is_shim_dll(std::string_view dll) {
  const std::string n = dll_name(dll);
  const auto& t = shim_table();
  return std::any_of(t.begin(), t.end(), [&](const Shim& s) { return s.dll == n; });
}

uint32_t get_module_handle(ShimCall& c) {
  const uint32_t p = c.arg(0);
  if (p == 0) return c.loader.main_base();
  const std::string name = read_cstring(c.mmu, p);
  if (const LoadedModule* m = c.loader.module_by_name(name)) return m->base;
  return is_shim_dll(name) ? kTrampolineBase : 0;
}

uint32_t load_library(ShimCall& c) {
  const std::string name = read_cstring(c.mmu, c.arg(0));
  if (is_shim_dll(name)) return kTrampolineBase;
  try {
    return c.loader.load_library(name);
  } catch (const LoaderError&) {
    return 0;
  }
}

uint32_t get_proc_address(ShimCall& c) {
  const uint32_t h = c.arg(0), p = c.arg(1);
  if (h == kTrampolineBase) {
    if (p < 0x10000) return 0;
    const std::string name = read_cstring(c.mmu, p);
    const auto& t = shim_table();
    for (size_t i = 0; i < t.size(); ++i) {
      if (t[i].name == name) return shim_trampoline(i);
    }
    return 0;
  }
  const LoadedModule* m = c.loader.module_at(h);
  if (!m) return 0;
  if (p < 0x10000) {
    auto it = m->ordinals.find(p);
    return it == m->ordinals.end() ? 0 : it->second;
  }
  auto it = m->exports.find(read_cstring(c.mmu, p));
  return it == m->exports.end() ? 0 : it->second;
}

std::vector<Shim> make_shims() {
  std::vector<Shim> t;
  auto add = [&](std::string name, unsigned args, std::function<uint32_t(ShimCall&)> fn) {
    t.push_back({"kernel32.dll", std::move(name), args, std::move(fn)});
  };
  add("ExitProcess", 1, [](ShimCall& c) {
    c.engine.request_exit(c.arg(0));
    return 0u;
  });
  add("GetSystemTimeAsFileTime", 1, [](ShimCall& c) {
    // fixed epoch advanced by executed blocks keeps runs reproducible
    const uint64_t t = 0x01D6000000000000ull + c.engine.counters().blocks_executed * 10;
    c.mmu.write_u32(c.arg(0), static_cast<uint32_t>(t));
    c.mmu.write_u32(c.arg(0) + 4, static_cast<uint32_t>(t >> 32));
    return 0u;
  });
  add("GetTickCount", 0, [](ShimCall& c) {
    return static_cast<uint32_t>(0x10000 + c.engine.counters().blocks_executed);
  });
  add("WriteFile", 5, write_file);
  add("VirtualAlloc", 4, virtual_alloc);
  add("VirtualFree", 3, virtual_free);
  add("GetModuleHandleA", 1, get_module_handle);
  add("LoadLibraryA", 1, load_library);
  add("GetProcAddress", 2, get_proc_address);
  add("GetStdHandle", 1, [](ShimCall& c) {
    switch (static_cast<int32_t>(c.arg(0))) {
      case -10: return kStdIn;
      case -11: return kStdOut;
      case -12: return kStdErr;
      default: return kInvalidHandle;
    }
  });
  add("CreateFileA", 7, create_file);
  add("ReadFile", 5, read_file);
  add("CloseHandle", 1, [](ShimCall& c) {
    const uint32_t h = c.arg(0);
    if (c.loader.fd_of(h) < 0) return uint32_t{h == kStdIn || h == kStdOut || h == kStdErr};
    c.loader.close_handle(h);
    return 1u;
  });
  return t;
}

}  // namespace

const std::vector<Shim>& shim_table() {
  static const std::vector<Shim> table = make_shims();
  return table;
}

uint32_t shim_trampoline(size_t index) { return kTrampolineBase + 4 * static_cast<uint32_t>(index); }

// ---------------------------------------------------------------- loader

Loader::Loader(Vfs& vfs, Mmu& mmu) : vfs_(vfs), mmu_(mmu) {}

Loader::~Loader() {
  if (attached_) {
    vfs_.set_open_observer({});
    vfs_.set_logger(nullptr);
  }
}

void Loader::attach(Engine& engine) {
  attached_ = true;
  const auto& table = shim_table();
  for (size_t i = 0; i < table.size(); ++i) {
    engine.register_syscall(
        static_cast<uint32_t>(sysno::shim_base) + static_cast<uint32_t>(i),
        [this, i](Engine& e, MachineState& st, Mmu& mmu) {
          const Shim& shim = shim_table()[i];
          try {
            const uint32_t esp = st.regs[xir::reg::esp];
            const uint32_t ret = mmu.read_u32(esp);
            ShimCall call{e, st, mmu, *this};
            const uint32_t result = shim.handler(call);
            st.regs[xir::reg::eax] = result;
            st.regs[xir::reg::esp] = esp + 4 + 4 * shim.args;
            st.regs[xir::reg::host_ret] = ret;
          } catch (const MmuError& err) {
            StopReason r;
            r.kind = StopKind::fault;
            r.fault.kind = err.code() == MmuErrc::unmapped_write ? FaultKind::unmapped_write
                                                                 : FaultKind::unmapped_read;
            r.fault.va = err.va();
            r.fault.pc = shim_trampoline(i);
            r.message = fmt::format("{} ({})", shim.name, err.what());
            e.request_stop(r);
          }
        });
  }
  logger_ = &engine.logger();
  vfs_.set_logger(&engine.logger());
  Engine* eng = &engine;
  set_import_observer([eng](const ImportResolution& res) {
    ProbeContext ctx;
    ctx.mmu = &eng->mmu();
    ctx.address = res.iat_va;
    ctx.value = res.resolved_va;
    const std::string text = res.dll + "!" + (res.name.empty() ? fmt::format("#{}", res.ordinal) : res.name);
    ctx.text = text;
    eng->probes().fire(eng->probe_ids().import_resolved, ctx);
  });
  vfs_.set_open_observer([eng](const std::string& path, int fd) {
    ProbeContext ctx;
    ctx.mmu = &eng->mmu();
    ctx.text = path;
    ctx.value = static_cast<uint64_t>(fd);
    eng->probes().fire(eng->probe_ids().vfs_open, ctx);
  });
}

void Loader::map_trampolines() {
  if (const Region* r = mmu_.region_at(kTrampolineBase); r && r->label == "trampolines") return;
  const auto& table = shim_table();
  const uint32_t size = align_page(4 * table.size());
  try {
    mmu_.pmap(size, kTrampolineBase, map_flags::read | map_flags::exec | map_flags::fixed, 0, 0xFFFFFFFF,
              "trampolines");
  } catch (const MmuError& e) {
    throw LoaderError(LoaderErrc::range_exhausted, fmt::format("trampoline region: {}", e.what()));
  }
  std::vector<uint8_t> stubs;
  for (size_t i = 0; i < table.size(); ++i) {
    const uint32_t id = static_cast<uint32_t>(sysno::shim_base) + static_cast<uint32_t>(i);
    stubs.insert(stubs.end(), {0x0F, 0x3F, static_cast<uint8_t>(id), static_cast<uint8_t>(id >> 8)});
  }
  const bool enforce = mmu_.enforce_protection();
  mmu_.set_enforce_protection(false);
  mmu_.write_memory(kTrampolineBase, stubs);
  mmu_.set_enforce_protection(enforce);
}

uint32_t Loader::exit_trampoline() const {
  const auto& table = shim_table();
  for (size_t i = 0; i < table.size(); ++i) {
    if (table[i].name == "ExitProcess") return shim_trampoline(i);
  }
  return 0;
}

LoadedImage Loader::load_pe(std::string_view vfs_path) {
  std::vector<uint8_t> bytes;
  try {
    bytes = vfs_.read_file(vfs_path);
  } catch (const VfsError& e) {
    throw LoaderError(LoaderErrc::bad_image, fmt::format("cannot read {}: {}", vfs_path, e.what()));
  }
  return load_pe_bytes(bytes, vfs_path);
}

LoadedImage Loader::load_pe_bytes(std::span<const uint8_t> file, std::string_view name) {
  LoadedImage out;
  const size_t first = modules_.size();
  std::string base_name(name);
  if (auto slash = base_name.find_last_of("/\\"); slash != std::string::npos) base_name.erase(0, slash + 1);
  LoadedModule& main = map_module(file, lower(base_name), std::string(name), out);
  main_base_ = main.base;
  out.entry_va = main.entry_va;
  out.base = main.base;
  out.images.assign(modules_.begin() + static_cast<std::ptrdiff_t>(first), modules_.end());
  return out;
}

LoadedModule& Loader::map_module(std::span<const uint8_t> file, std::string name, std::string path,
                                 LoadedImage& out) {
  const pe::Image img = pe::parse(file);
  const uint32_t size = align_page(img.size_of_image);
  uint32_t base;
  try {
    base = mmu_.pmap(size, img.preferred_base & ~(kPageSize - 1), map_flags::rwx | map_flags::fixed, 0,
                     0xFFFFFFFF, name);
  } catch (const MmuError& e) {
    if (!img.has_relocs()) {
      throw LoaderError(LoaderErrc::fixed_base_collision,
                        fmt::format("{}: base 0x{:08X} unavailable and no relocations", name, img.preferred_base));
    }
    try {
      base = mmu_.pmap(size, img.preferred_base, map_flags::rwx, 0x00010000, 0x7FFEFFFF, name);
    } catch (const MmuError&) {
      throw LoaderError(LoaderErrc::range_exhausted, fmt::format("{}: no room for 0x{:X} bytes", name, size));
    }
  }

  auto copy = [&](uint32_t rva, uint64_t off, uint64_t n) {
    if (n == 0) return;
    if (off > file.size() || n > file.size() - off) {
      throw LoaderError(LoaderErrc::bad_image, fmt::format("{}: section data beyond end of file", name));
    }
    if (uint64_t{rva} + n > size) throw LoaderError(LoaderErrc::bad_image, fmt::format("{}: section beyond image", name));
    mmu_.write_memory(base + rva, file.subspan(static_cast<size_t>(off), static_cast<size_t>(n)));
  };
  copy(0, 0, std::min<uint64_t>({img.size_of_headers, file.size(), size}));
  for (const auto& s : img.sections) {
    const uint32_t vsize = s.virtual_size ? s.virtual_size : s.raw_size;
    copy(s.rva, s.raw_offset, std::min(s.raw_size, vsize));
  }

  const uint32_t delta = base - img.preferred_base;
  if (delta != 0 && img.has_relocs()) {
    uint32_t at = img.reloc_dir.rva;
    const uint32_t end = img.reloc_dir.rva + img.reloc_dir.size;
    while (at + 8 <= end) {
      const uint32_t page = mmu_.read_u32(base + at);
      const uint32_t block = mmu_.read_u32(base + at + 4);
      if (block < 8 || at + block > end) throw LoaderError(LoaderErrc::bad_image, "bad relocation block");
      for (uint32_t e = 8; e + 2 <= block; e += 2) {
        uint8_t raw[2];
        mmu_.read_memory(base + at + e, raw);
        const uint16_t entry = static_cast<uint16_t>(raw[0] | raw[1] << 8);
        const unsigned type = entry >> 12;
        if (type == 0) continue;
        if (type != 3) throw LoaderError(LoaderErrc::bad_image, fmt::format("relocation type {}", type));
        const uint32_t va = base + page + (entry & 0xFFF);
        mmu_.write_u32(va, mmu_.read_u32(va) + delta);
      }
      at += block;
    }
  }

  LoadedModule m;
  m.name = name;
  m.path = std::move(path);
  m.base = base;
  m.size = size;
  m.entry_va = img.entry_rva ? base + img.entry_rva : 0;
  if (img.export_dir.rva) {
    const uint32_t ed = base + img.export_dir.rva;
    const uint32_t ord_base = mmu_.read_u32(ed + 16);
    const uint32_t nfuncs = mmu_.read_u32(ed + 20), nnames = mmu_.read_u32(ed + 24);
    const uint32_t funcs = mmu_.read_u32(ed + 28), names = mmu_.read_u32(ed + 32),
                   ords = mmu_.read_u32(ed + 36);
    if (nfuncs > 65536 || nnames > 65536) throw LoaderError(LoaderErrc::bad_image, "runaway export table");
    std::vector<uint32_t> fva(nfuncs);
    for (uint32_t i = 0; i < nfuncs; ++i) {
      const uint32_t rva = mmu_.read_u32(base + funcs + 4 * i);
      fva[i] = rva ? base + rva : 0;
      if (rva) m.ordinals[ord_base + i] = base + rva;
    }
    for (uint32_t j = 0; j < nnames; ++j) {
      const std::string n = read_cstring(mmu_, base + mmu_.read_u32(base + names + 4 * j));
      uint8_t raw[2];
      mmu_.read_memory(base + ords + 2 * j, raw);
      const uint16_t idx = static_cast<uint16_t>(raw[0] | raw[1] << 8);
      if (idx < nfuncs && fva[idx]) m.exports[n] = fva[idx];
    }
  }
  if (logger_ && logger_->enabled(LogModule::loader, LogLevel::info)) {
    logger_->log(LogModule::loader, LogLevel::info,
                 fmt::format("mapped {} at 0x{:08X} (0x{:X} bytes)", name, base, size));
  }
  modules_.push_back(std::move(m));
  LoadedModule& mod = modules_.back();

  loading_.insert(mod.name);
  for (const auto& dll : img.imports) {
    for (const auto& fn : dll.functions) {
      ImportResolution res;
      res.dll = dll_name(dll.dll);
      res.name = fn.name;
      res.ordinal = fn.ordinal;
      res.iat_va = base + fn.iat_rva;
      res.resolved_va = resolve(res.dll, fn, out, res);
      mmu_.write_u32(res.iat_va, res.resolved_va);
      if (logger_ && logger_->enabled(LogModule::loader, LogLevel::debug)) {
        logger_->log(LogModule::loader, LogLevel::debug,
                     fmt::format("{}!{} -> 0x{:08X}", res.dll, res.name, res.resolved_va));
      }
      if (import_observer_) import_observer_(res);
      out.imports.push_back(std::move(res));
    }
  }
  loading_.erase(mod.name);
  return mod;
}

uint32_t Loader::resolve(const std::string& dll, const pe::ImportFunction& fn, LoadedImage& out,
                         ImportResolution& res) {
  const std::string what = fn.name.empty() ? fmt::format("#{}", fn.ordinal) : fn.name;
  if (!fn.name.empty()) {
    const auto& table = shim_table();
    for (size_t i = 0; i < table.size(); ++i) {
      if (table[i].dll == dll && table[i].name == fn.name) {
        map_trampolines();
        res.native = true;
        res.shim_id = static_cast<uint32_t>(sysno::shim_base) + static_cast<uint32_t>(i);
        return shim_trampoline(i);
      }
    }
  }
  const std::string path = std::string(kSystemDir) + "/" + dll;
  if (loading_.count(dll)) {
    throw LoaderError(LoaderErrc::import_cycle, fmt::format("import cycle through {}", dll));
  }
  const LoadedModule* m = module_by_name(dll);
  if (!m) {
    if (!vfs_.exists(path)) {
      throw LoaderError(LoaderErrc::unresolved_import, fmt::format("unresolved import {}!{}", dll, what));
    }
    m = &load_dll(dll, out);
  }
  res.provider = m->path;
  if (fn.name.empty()) {
    if (auto it = m->ordinals.find(fn.ordinal); it != m->ordinals.end()) return it->second;
  } else if (auto it = m->exports.find(fn.name); it != m->exports.end()) {
    return it->second;
  }
  throw LoaderError(LoaderErrc::unresolved_import, fmt::format("unresolved import {}!{}", dll, what));
}

LoadedModule& Loader::load_dll(const std::string& dll, LoadedImage& out) {
  const std::string path = std::string(kSystemDir) + "/" + dll;
  const std::vector<uint8_t> bytes = vfs_.read_file(path);
  return map_module(bytes, dll, path, out);
}

uint32_t Loader::load_library(std::string_view name) {
  const std::string dll = dll_name(name);
  if (const LoadedModule* m = module_by_name(dll)) return m->base;
  if (!vfs_.exists(std::string(kSystemDir) + "/" + dll)) return 0;
  LoadedImage scratch;
  return load_dll(dll, scratch).base;
}

const LoadedModule* Loader::module_by_name(std::string_view name) const {
  const std::string n = dll_name(name);
  for (const auto& m : modules_) {
    if (m.name == n) return &m;
  }
  return nullptr;
}

const LoadedModule* Loader::module_at(uint32_t base) const {
  for (const auto& m : modules_) {
    if (m.base == base) return &m;
  }
  return nullptr;
}

void Loader::setup_process(MachineState& state, const LoadedImage& image) {
  map_trampolines();
  try {
    mmu_.pmap(kStackSize, kStackBase, map_flags::read | map_flags::write | map_flags::fixed, 0, 0xFFFFFFFF,
              "stack");
  } catch (const MmuError& e) {
    throw LoaderError(LoaderErrc::range_exhausted, fmt::format("stack: {}", e.what()));
  }
  state = MachineState{};
  const uint32_t esp = kStackTop - 16;
  mmu_.write_u32(esp, exit_trampoline());
  state.regs[xir::reg::esp] = esp;
  state.regs[xir::reg::ebp] = esp;
  state.regs[xir::reg::eflags] = 0x202;
  state.pc = image.entry_va;
}

void Loader::write_stdout(std::string_view text) {
  stdout_text_.append(text);
  if (stdout_) stdout_->write(text.data(), static_cast<std::streamsize>(text.size()));
}

uint32_t Loader::open_handle(int fd) {
  const uint32_t h = next_handle_;
  next_handle_ += 4;
  handles_[h] = fd;
  return h;
}

int Loader::fd_of(uint32_t handle) const {
  auto it = handles_.find(handle);
  return it == handles_.end() ? -1 : it->second;
}

void Loader::close_handle(uint32_t handle) {
  auto it = handles_.find(handle);
  if (it == handles_.end()) return;
  try {
    vfs_.close(it->second);
  } catch (const VfsError&) {
  }
  handles_.erase(it);
}

uint32_t load_flat(Mmu& mmu, std::span<const uint8_t> bytes, uint32_t base_va) {
  if (bytes.empty()) throw LoaderError(LoaderErrc::empty_image, "flat image is empty");
  const uint32_t start = base_va & ~(kPageSize - 1);
  const uint64_t end = (uint64_t{base_va} + bytes.size() + kPageSize - 1) & ~uint64_t{kPageSize - 1};
  if (end > 0x100000000ull) throw LoaderError(LoaderErrc::range_exhausted, "flat image exceeds address space");
  try {
    mmu.pmap(end - start, start, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "flat");
  } catch (const MmuError& e) {
    throw LoaderError(LoaderErrc::fixed_collision, fmt::format("flat image at 0x{:08X}: {}", base_va, e.what()));
  }
  mmu.write_memory(base_va, bytes);
  return base_va;
}

}  // namespace pinky
