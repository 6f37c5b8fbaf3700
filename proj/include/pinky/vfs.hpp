#pragma once

// Container-backed virtual file system with a copy-on-write overlay and a
// UNIX-style descriptor API.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pinky {

class Logger;

enum class VfsErrc {
  bad_magic,
  bad_version,
  corrupt_entry_table,
  not_found,
  bad_fd,
  read_only_container_violation,
  invalid_path,
  too_many_files,
  is_special,
  invalid_argument,
  io_error,
};

class VfsError : public std::runtime_error {
 public:
  VfsError(VfsErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  VfsErrc code() const { return code_; }

 private:
  VfsErrc code_;
};

const char* vfs_errc_name(VfsErrc c);

namespace pvfs {

inline constexpr char kMagic[4] = {'P', 'V', 'F', 'S'};
inline constexpr uint32_t kVersion = 1;
/// Root-entry attribute: paths compare case-insensitively.
inline constexpr uint32_t kAttrWindowsProfile = 0x80000000u;
/// Sidecar written by unpack, read by pack: attributes and modes.
inline constexpr const char* kMetaFile = ".pvfsmeta";

struct Entry {
  std::string path;  // '/'-separated, no leading slash; "" is the root entry
  uint64_t offset = 0;
  uint64_t size = 0;
  uint32_t attributes = 0;
  uint32_t mode = 0;
};

struct Container {
  std::vector<Entry> entries;
  std::vector<uint8_t> image;
  bool windows_profile = false;

  std::span<const uint8_t> data(const Entry& e) const {
    return {image.data() + e.offset, static_cast<size_t>(e.size)};
  }
};

/// Validates and indexes an image.
Container parse(std::vector<uint8_t> image);

struct FileSpec {
  std::string path;
  std::vector<uint8_t> data;
  uint32_t attributes = 0;
  uint32_t mode = 0644;
};

/// Canonical image: entries sorted by normalized path, blobs in entry
/// order immediately after the table.
std::vector<uint8_t> build(std::vector<FileSpec> files);

std::vector<uint8_t> pack(const std::filesystem::path& dir);
void unpack(const Container& c, const std::filesystem::path& dir);

std::vector<uint8_t> read_image(const std::filesystem::path& file);
void write_image(const std::filesystem::path& file, std::span<const uint8_t> image);

}  // namespace pvfs

/// Splits on '/' or '\\', drops empty and "." parts; ".." is rejected.
std::string normalize_path(std::string_view path, bool fold_case);

namespace open_mode {
inline constexpr unsigned read = 0x1;
inline constexpr unsigned write = 0x2;
inline constexpr unsigned append = 0x4;
inline constexpr unsigned create = 0x8;
inline constexpr unsigned truncate = 0x10;
}  // namespace open_mode

/// fopen-style "r", "w", "a", "r+", "w+", "a+" (a trailing 'b' is ignored).
unsigned parse_open_mode(std::string_view mode);

struct VfsStat {
  uint64_t size = 0;
  uint32_t attributes = 0;
  uint32_t mode = 0;
  uint64_t base = 0;  // container offset, 0 for overlay-only files
};

/// Synthetic files under a path prefix. Providers shadow the container.
class SpecialProvider {
 public:
  virtual ~SpecialProvider() = default;
  /// `rel` is the normalized path below the prefix.
  virtual std::optional<std::vector<uint8_t>> read(const std::string& rel) = 0;
  /// Called on close of a handle that was written to.
  virtual bool write(const std::string& rel, std::span<const uint8_t> data) = 0;
};

/// Key/value registry seeded from `key=value` lines.
class RegistryProvider : public SpecialProvider {
 public:
  explicit RegistryProvider(std::string_view seed = {});
  std::optional<std::vector<uint8_t>> read(const std::string& rel) override;
  bool write(const std::string& rel, std::span<const uint8_t> data) override;

  std::optional<std::string> get(std::string_view key) const;
  void set(std::string_view key, std::string value);
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;  // lower-cased keys
};

/// Reads as empty, swallows writes.
class NullProvider : public SpecialProvider {
 public:
  std::optional<std::vector<uint8_t>> read(const std::string&) override { return std::vector<uint8_t>{}; }
  bool write(const std::string&, std::span<const uint8_t>) override { return true; }
};

class Vfs {
 public:
  static constexpr int kFirstFd = 3;
  static constexpr size_t kMaxOpen = 4096;
  static constexpr const char* kRegistrySeed = "windows/registry.txt";

  Vfs();
  /// Empty file system (no container).
  void init();
  void init(std::vector<uint8_t> image);
  void init_file(const std::filesystem::path& image_file);

  int open(std::string_view path, unsigned mode);
  int open(std::string_view path, std::string_view mode) { return open(path, parse_open_mode(mode)); }
  void close(int fd);
  size_t read(int fd, std::span<uint8_t> buffer);
  size_t write(int fd, std::span<const uint8_t> buffer);
  uint64_t seek(int fd, int64_t pos, int whence = 0);
  void unlink(std::string_view path);
  VfsStat stat(std::string_view path) const;
  void chmod(std::string_view path, uint32_t attributes);
  void rename(std::string_view from, std::string_view to);

  bool exists(std::string_view path) const;
  std::vector<uint8_t> read_file(std::string_view path);
  std::vector<std::string> list() const;
  size_t open_count() const { return fds_.size(); }

  void set_overlay_enabled(bool on) { overlay_enabled_ = on; }
  bool overlay_enabled() const { return overlay_enabled_; }
  bool windows_profile() const { return windows_profile_; }

  void add_provider(std::string prefix, std::shared_ptr<SpecialProvider> provider);
  RegistryProvider* registry() { return registry_.get(); }

  /// Called after every successful open (the vfs.open probe site).
  void set_open_observer(std::function<void(const std::string& path, int fd)> obs) {
    open_observer_ = std::move(obs);
  }
  void set_logger(Logger* log) { logger_ = log; }

  /// Writes created/modified files and a `.pvfsdeleted` list.
  void dump_overlay(const std::filesystem::path& dir) const;
  bool overlay_dirty() const;
  const pvfs::Container& container() const { return container_; }

 private:
  struct Node {
    std::string path;
    uint32_t attributes = 0;
    uint32_t mode = 0644;
    const pvfs::Entry* backing = nullptr;  // null once copied or created
    std::vector<uint8_t> data;
    bool dirty = false;
    bool from_container = false;

    uint64_t size() const { return backing ? backing->size : data.size(); }
  };
  struct Handle {
    std::shared_ptr<Node> node;
    SpecialProvider* provider = nullptr;
    std::string special_rel;
    uint64_t pos = 0;
    unsigned mode = 0;
    bool written = false;
  };

  std::string key(std::string_view path) const;
  void require_overlay(std::string_view what) const;
  Handle& handle(int fd);
  void materialize(Node& n);
  std::pair<SpecialProvider*, std::string> provider_for(const std::string& k) const;
  int allocate_fd() const;
  void seed_registry();

  pvfs::Container container_;
  std::map<std::string, std::shared_ptr<Node>> nodes_;
  std::vector<std::string> deleted_;
  std::map<int, Handle> fds_;
  std::vector<std::pair<std::string, std::shared_ptr<SpecialProvider>>> providers_;
  std::shared_ptr<RegistryProvider> registry_;
  std::function<void(const std::string&, int)> open_observer_;
  Logger* logger_ = nullptr;
  bool windows_profile_ = false;
  bool overlay_enabled_ = true;
};

}  // namespace pinky
