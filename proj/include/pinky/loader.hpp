#pragma once

// PE32 loader: maps images, applies relocations, binds imports to host
// shims or VFS-hosted DLLs and prepares the initial process state.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pinky {

class Engine;
class Logger;
class Mmu;
class Vfs;
struct MachineState;

enum class LoaderErrc {
  bad_dos_magic,
  bad_nt_magic,
  truncated_headers,
  unsupported_format,
  bad_image,
  unresolved_import,
  fixed_base_collision,
  import_cycle,
  range_exhausted,
  fixed_collision,
  empty_image,
};

class LoaderError : public std::runtime_error {
 public:
  LoaderError(LoaderErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  LoaderErrc code() const { return code_; }

 private:
  LoaderErrc code_;
};

const char* loader_errc_name(LoaderErrc c);

namespace pe {

struct Section {
  std::string name;
  uint32_t rva = 0;
  uint32_t raw_offset = 0;
  uint32_t raw_size = 0;
  uint32_t virtual_size = 0;
  uint32_t characteristics = 0;
};

struct ImportFunction {
  std::string name;  // empty for ordinal imports
  uint16_t ordinal = 0;
  uint32_t iat_rva = 0;
};

struct ImportDll {
  std::string dll;
  std::vector<ImportFunction> functions;
};

struct DataDir {
  uint32_t rva = 0;
  uint32_t size = 0;
};

struct Image {
  uint32_t preferred_base = 0;
  uint32_t entry_rva = 0;
  uint32_t size_of_image = 0;
  uint32_t size_of_headers = 0;
  std::vector<Section> sections;
  std::vector<ImportDll> imports;
  DataDir export_dir, import_dir, reloc_dir;
  bool has_relocs() const { return reloc_dir.rva != 0 && reloc_dir.size != 0; }
};

/// Header, section table and import parsing from the file bytes.
Image parse(std::span<const uint8_t> file);

}  // namespace pe

inline constexpr uint32_t kTrampolineBase = 0x7DD80000;
inline constexpr uint32_t kStackBase = 0x00100000;
inline constexpr uint32_t kStackSize = 0x00100000;
inline constexpr uint32_t kStackTop = kStackBase + kStackSize;

struct ImportResolution {
  std::string dll;
  std::string name;
  uint16_t ordinal = 0;
  uint32_t iat_va = 0;
  uint32_t resolved_va = 0;
  bool native = false;    // shim trampoline
  uint32_t shim_id = 0;   // syscall id when native
  std::string provider;   // VFS path of the DLL otherwise
};

struct LoadedModule {
  std::string name;  // lower-case file name
  std::string path;
  uint32_t base = 0;
  uint32_t size = 0;
  uint32_t entry_va = 0;
  std::map<std::string, uint32_t> exports;  // name -> VA
  std::map<uint32_t, uint32_t> ordinals;    // ordinal -> VA
};

struct LoadedImage {
  uint32_t entry_va = 0;
  uint32_t base = 0;
  std::vector<LoadedModule> images;  // main image first
  std::vector<ImportResolution> imports;
};

class Loader;

struct ShimCall {
  Engine& engine;
  MachineState& state;
  Mmu& mmu;
  Loader& loader;
  uint32_t arg(unsigned i) const;
};

struct Shim {
  std::string dll;  // lower case
  std::string name;
  unsigned args = 0;  // stdcall argument count
  std::function<uint32_t(ShimCall&)> handler;
};

/// The host-implemented API set. Shim i traps with sysno::shim_base + i.
const std::vector<Shim>& shim_table();
uint32_t shim_trampoline(size_t index);

class Loader {
 public:
  static constexpr const char* kSystemDir = "windows/system32";

  Loader(Vfs& vfs, Mmu& mmu);
  /// Detaches the VFS hooks installed by attach().
  ~Loader();
  Loader(const Loader&) = delete;
  Loader& operator=(const Loader&) = delete;

  /// Registers shim syscalls and routes import/VFS events to the
  /// engine's probes.
  void attach(Engine& engine);

  LoadedImage load_pe(std::string_view vfs_path);
  LoadedImage load_pe_bytes(std::span<const uint8_t> file, std::string_view name);

  void setup_process(MachineState& state, const LoadedImage& image);

  /// Loads (or returns) a DLL from the VFS system directory; 0 if absent.
  uint32_t load_library(std::string_view name);
  const LoadedModule* module_by_name(std::string_view name) const;
  const LoadedModule* module_at(uint32_t base) const;
  uint32_t main_base() const { return main_base_; }

  uint32_t exit_trampoline() const;
  /// Maps the trampoline page (idempotent).
  void map_trampolines();

  void set_logger(Logger* log) { logger_ = log; }
  void set_import_observer(std::function<void(const ImportResolution&)> obs) {
    import_observer_ = std::move(obs);
  }

  /// Guest stdout (WriteFile on the standard output handle).
  void set_stdout(std::ostream* out) { stdout_ = out; }
  const std::string& stdout_text() const { return stdout_text_; }
  void write_stdout(std::string_view text);

  Vfs& vfs() { return vfs_; }
  Mmu& mmu() { return mmu_; }

  /// Guest file handles over VFS descriptors.
  uint32_t open_handle(int fd);
  int fd_of(uint32_t handle) const;
  void close_handle(uint32_t handle);

 private:
  LoadedModule& map_module(std::span<const uint8_t> file, std::string name, std::string path,
                           LoadedImage& out);
  uint32_t resolve(const std::string& dll, const pe::ImportFunction& fn, LoadedImage& out,
                   ImportResolution& res);
  LoadedModule& load_dll(const std::string& dll, LoadedImage& out);

  Vfs& vfs_;
  Mmu& mmu_;
  Logger* logger_ = nullptr;
  bool attached_ = false;
  std::deque<LoadedModule> modules_;
  std::set<std::string> loading_;
  std::function<void(const ImportResolution&)> import_observer_;
  std::ostream* stdout_ = nullptr;
  std::string stdout_text_;
  std::map<uint32_t, int> handles_;
  uint32_t next_handle_ = 0x100;
  uint32_t main_base_ = 0;
};

/// Copies raw bytes to `base_va` in a fresh mapping; returns the entry.
uint32_t load_flat(Mmu& mmu, std::span<const uint8_t> bytes, uint32_t base_va);

}  // namespace pinky
