#include "pinky/vfs.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "pinky/config.hpp"

namespace pinky {

namespace fs = std::filesystem;

const char* vfs_errc_name(VfsErrc c) {
  switch (c) {
    case VfsErrc::bad_magic: return "BadMagic";
    case VfsErrc::bad_version: return "BadVersion";
    case VfsErrc::corrupt_entry_table: return "CorruptEntryTable";
    case VfsErrc::not_found: return "NotFound";
    case VfsErrc::bad_fd: return "BadFd";
    case VfsErrc::read_only_container_violation: return "ReadOnlyContainerViolation";
    case VfsErrc::invalid_path: return "InvalidPath";
    case VfsErrc::too_many_files: return "TooManyFiles";
    case VfsErrc::is_special: return "IsSpecial";
    case VfsErrc::invalid_argument: return "InvalidArgument";
    case VfsErrc::io_error: return "IoError";
  }
  return "?";
}

std::string normalize_path(std::string_view path, bool fold_case) {
  std::vector<std::string_view> parts;
  size_t i = 0;
  while (i <= path.size()) {
    size_t j = i;
    while (j < path.size() && path[j] != '/' && path[j] != '\\') ++j;
    std::string_view part = path.substr(i, j - i);
    if (part.find('\0') != std::string_view::npos) {
      throw VfsError(VfsErrc::invalid_path, "NUL in path");
    }
    if (part == "..") throw VfsError(VfsErrc::invalid_path, fmt::format("'..' in {}", path));
    // drive letter on Windows-profile paths
    const bool drive = fold_case && parts.empty() && i == 0 && part.size() == 2 && part[1] == ':' &&
                       std::isalpha(static_cast<unsigned char>(part[0]));
    if (!part.empty() && part != "." && !drive) parts.push_back(part);
    i = j + 1;
  }
  std::string out;
  for (auto p : parts) {
    if (!out.empty()) out += '/';
    out += p;
  }
  if (fold_case) {
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

unsigned parse_open_mode(std::string_view mode) {
  std::string m(mode);
  m.erase(std::remove(m.begin(), m.end(), 'b'), m.end());
  using namespace open_mode;
  if (m == "r") return read;
  if (m == "r+") return read | write;
  if (m == "w") return write | create | truncate;
  if (m == "w+") return read | write | create | truncate;
  if (m == "a") return write | create | append;
  if (m == "a+") return read | write | create | append;
  throw VfsError(VfsErrc::invalid_argument, fmt::format("bad open mode '{}'", mode));
}

// ---------------------------------------------------------------- container

namespace pvfs {

namespace {

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>(uint64_t{v} >> (8 * i)));
}

template <typename T>
T get(const std::vector<uint8_t>& in, size_t& at) {
  if (in.size() - at < sizeof(T) || at > in.size()) {
    throw VfsError(VfsErrc::corrupt_entry_table, "entry table truncated");
  }
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t{in[at + i]} << (8 * i);
  at += sizeof(T);
  return static_cast<T>(v);
}

std::string sort_key(const std::string& path, bool windows) { return normalize_path(path, windows); }

}  // namespace

Container parse(std::vector<uint8_t> image) {
  if (image.size() < 4 || std::memcmp(image.data(), kMagic, 4) != 0) {
    throw VfsError(VfsErrc::bad_magic, "not a PVFS container");
  }
  size_t at = 4;
  if (image.size() < 12) throw VfsError(VfsErrc::corrupt_entry_table, "header truncated");
  const auto version = get<uint32_t>(image, at);
  if (version != kVersion) throw VfsError(VfsErrc::bad_version, fmt::format("version {}", version));
  const auto count = get<uint32_t>(image, at);

  Container c;
  c.entries.reserve(std::min<size_t>(count, image.size() / 26));
  for (uint32_t n = 0; n < count; ++n) {
    Entry e;
    const auto len = get<uint16_t>(image, at);
    if (image.size() - at < len) throw VfsError(VfsErrc::corrupt_entry_table, "path truncated");
    e.path.assign(reinterpret_cast<const char*>(image.data() + at), len);
    at += len;
    e.offset = get<uint64_t>(image, at);
    e.size = get<uint64_t>(image, at);
    e.attributes = get<uint32_t>(image, at);
    e.mode = get<uint32_t>(image, at);
    c.entries.push_back(std::move(e));
  }
  for (const auto& e : c.entries) {
    if (e.offset > image.size() || e.size > image.size() - e.offset) {
      throw VfsError(VfsErrc::corrupt_entry_table, fmt::format("'{}' out of bounds", e.path));
    }
  }
  if (!c.entries.empty() && c.entries.front().path.empty()) {
    c.windows_profile = (c.entries.front().attributes & kAttrWindowsProfile) != 0;
  }
  std::string prev;
  for (size_t i = 0; i < c.entries.size(); ++i) {
    std::string k;
    try {
      k = sort_key(c.entries[i].path, c.windows_profile);
    } catch (const VfsError&) {
      throw VfsError(VfsErrc::corrupt_entry_table, fmt::format("bad path '{}'", c.entries[i].path));
    }
    if (k.empty() && i != 0) throw VfsError(VfsErrc::corrupt_entry_table, "misplaced root entry");
    if (i > 0 && !(prev < k)) {
      throw VfsError(VfsErrc::corrupt_entry_table,
                     fmt::format("entries unsorted or duplicate at '{}'", c.entries[i].path));
    }
    prev = std::move(k);
  }
  c.image = std::move(image);
  return c;
}

std::vector<uint8_t> build(std::vector<FileSpec> files) {
  bool windows = false;
  for (auto& f : files) {
    f.path = normalize_path(f.path, false);
    if (f.path.empty()) windows = (f.attributes & kAttrWindowsProfile) != 0;
  }
  std::vector<std::pair<std::string, FileSpec*>> order;
  for (auto& f : files) order.emplace_back(sort_key(f.path, windows), &f);
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (size_t i = 1; i < order.size(); ++i) {
    if (order[i].first == order[i - 1].first) {
      throw VfsError(VfsErrc::invalid_path, fmt::format("duplicate path '{}'", order[i].second->path));
    }
  }
  uint64_t offset = 12;
  for (const auto& [k, f] : order) {
    if (f->path.size() > 0xFFFF) throw VfsError(VfsErrc::invalid_path, "path too long");
    offset += 2 + f->path.size() + 8 + 8 + 4 + 4;
  }
  std::vector<uint8_t> out(kMagic, kMagic + 4);
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, static_cast<uint32_t>(order.size()));
  for (const auto& [k, f] : order) {
    const uint64_t size = f->path.empty() ? 0 : f->data.size();
    put<uint16_t>(out, static_cast<uint16_t>(f->path.size()));
    out.insert(out.end(), f->path.begin(), f->path.end());
    put<uint64_t>(out, offset);
    put<uint64_t>(out, size);
    put<uint32_t>(out, f->attributes);
    put<uint32_t>(out, f->mode);
    offset += size;
  }
  for (const auto& [k, f] : order) {
    if (!f->path.empty()) out.insert(out.end(), f->data.begin(), f->data.end());
  }
  return out;
}

namespace {

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw VfsError(VfsErrc::io_error, fmt::format("cannot read {}", p.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, std::span<const uint8_t> bytes) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw VfsError(VfsErrc::io_error, fmt::format("cannot write {}", p.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw VfsError(VfsErrc::io_error, fmt::format("short write to {}", p.string()));
}

struct Meta {
  uint32_t attributes;
  uint32_t mode;
};

std::map<std::string, Meta> read_meta(const fs::path& file) {
  std::map<std::string, Meta> out;
  std::ifstream in(file);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string attr, mode;
    ss >> attr >> mode;
    std::string path;
    std::getline(ss >> std::ws, path);
    try {
      out[normalize_path(path, false)] = {static_cast<uint32_t>(std::stoul(attr, nullptr, 16)),
                                          static_cast<uint32_t>(std::stoul(mode, nullptr, 8))};
    } catch (const std::logic_error&) {
      throw VfsError(VfsErrc::io_error, fmt::format("bad {} line '{}'", kMetaFile, line));
    }
  }
  return out;
}

}  // namespace

std::vector<uint8_t> pack(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw VfsError(VfsErrc::io_error, fmt::format("{} is not a directory", dir.string()));
  auto meta = read_meta(dir / kMetaFile);
  std::vector<FileSpec> files;
  if (auto it = meta.find(""); it != meta.end()) {
    files.push_back({"", {}, it->second.attributes, it->second.mode});
  }
  for (const auto& de : fs::recursive_directory_iterator(dir)) {
    if (!de.is_regular_file() || de.is_symlink()) continue;
    const std::string rel = fs::relative(de.path(), dir).generic_string();
    if (rel == kMetaFile || rel == ".pvfsdeleted") continue;
    FileSpec f;
    f.path = rel;
    f.data = slurp(de.path());
    const std::string k = normalize_path(rel, false);
    if (auto it = meta.find(k); it != meta.end()) {
      f.attributes = it->second.attributes;
      f.mode = it->second.mode;
    } else {
      f.mode = static_cast<uint32_t>(de.status().permissions() & fs::perms::mask) & 0777;
    }
    files.push_back(std::move(f));
  }
  return build(std::move(files));
}

void unpack(const Container& c, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::string meta;
  for (const auto& e : c.entries) {
    meta += fmt::format("{:08x} {:04o} {}\n", e.attributes, e.mode, e.path.empty() ? "/" : e.path);
    if (e.path.empty()) continue;
    spit(dir / fs::path(e.path), c.data(e));
  }
  spit(dir / kMetaFile, {reinterpret_cast<const uint8_t*>(meta.data()), meta.size()});
}

std::vector<uint8_t> read_image(const fs::path& file) { return slurp(file); }

void write_image(const fs::path& file, std::span<const uint8_t> image) { spit(file, image); }

}  // namespace pvfs

// ---------------------------------------------------------------- registry

namespace {

std::string registry_key(std::string_view key) { return normalize_path(key, true); }

}  // namespace

RegistryProvider::RegistryProvider(std::string_view seed) {
  std::istringstream in{std::string(seed)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    set(line.substr(0, eq), line.substr(eq + 1));
  }
}

std::optional<std::vector<uint8_t>> RegistryProvider::read(const std::string& rel) {
  auto it = values_.find(registry_key(rel));
  if (it == values_.end()) return std::nullopt;
  return std::vector<uint8_t>(it->second.begin(), it->second.end());
}

bool RegistryProvider::write(const std::string& rel, std::span<const uint8_t> data) {
  set(rel, std::string(data.begin(), data.end()));
  return true;
}

std::optional<std::string> RegistryProvider::get(std::string_view key) const {
  auto it = values_.find(registry_key(key));
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

void RegistryProvider::set(std::string_view key, std::string value) {
  values_[registry_key(key)] = std::move(value);
}

// ---------------------------------------------------------------- vfs

Vfs::Vfs() { init(); }

void Vfs::init() { init(pvfs::build({})); }

void Vfs::init(std::vector<uint8_t> image) {
  pvfs::Container c = pvfs::parse(std::move(image));
  fds_.clear();
  nodes_.clear();
  deleted_.clear();
  container_ = std::move(c);
  windows_profile_ = container_.windows_profile;
  for (const auto& e : container_.entries) {
    if (e.path.empty()) continue;
    auto n = std::make_shared<Node>();
    n->path = e.path;
    n->attributes = e.attributes;
    n->mode = e.mode;
    n->backing = &e;
    n->from_container = true;
    nodes_.emplace(key(e.path), std::move(n));
  }
  providers_.clear();
  seed_registry();
  add_provider("registry", registry_);
  add_provider("dev/null", std::make_shared<NullProvider>());
}

void Vfs::init_file(const fs::path& image_file) { init(pvfs::read_image(image_file)); }

void Vfs::seed_registry() {
  std::string seed;
  if (auto it = nodes_.find(key(kRegistrySeed)); it != nodes_.end()) {
    const auto d = container_.data(*it->second->backing);
    seed.assign(d.begin(), d.end());
  }
  registry_ = std::make_shared<RegistryProvider>(seed);
}

void Vfs::add_provider(std::string prefix, std::shared_ptr<SpecialProvider> provider) {
  providers_.emplace_back(normalize_path(prefix, false), std::move(provider));
}

std::string Vfs::key(std::string_view path) const { return normalize_path(path, windows_profile_); }

void Vfs::require_overlay(std::string_view what) const {
  if (!overlay_enabled_) {
    throw VfsError(VfsErrc::read_only_container_violation,
                   fmt::format("{} with the overlay disabled", what));
  }
}

std::pair<SpecialProvider*, std::string> Vfs::provider_for(const std::string& k) const {
  for (const auto& [prefix, p] : providers_) {
    const std::string pk = key(prefix);
    if (k == pk) return {p.get(), std::string()};
    if (k.size() > pk.size() && k.compare(0, pk.size(), pk) == 0 && k[pk.size()] == '/') {
      return {p.get(), k.substr(pk.size() + 1)};
    }
  }
  return {nullptr, {}};
}

int Vfs::allocate_fd() const {
  if (fds_.size() >= kMaxOpen) {
    throw VfsError(VfsErrc::too_many_files, fmt::format("{} descriptors open", fds_.size()));
  }
  int fd = kFirstFd;
  for (const auto& [used, h] : fds_) {
    if (used != fd) break;
    ++fd;
  }
  return fd;
}

Vfs::Handle& Vfs::handle(int fd) {
  auto it = fds_.find(fd);
  if (it == fds_.end()) throw VfsError(VfsErrc::bad_fd, fmt::format("bad fd {}", fd));
  return it->second;
}

void Vfs::materialize(Node& n) {
  if (!n.backing) return;
  const auto d = container_.data(*n.backing);
  n.data.assign(d.begin(), d.end());
  n.backing = nullptr;
}

int Vfs::open(std::string_view path, unsigned mode) {
  if ((mode & (open_mode::read | open_mode::write)) == 0) mode |= open_mode::read;
  const std::string k = key(path);
  if (k.empty()) throw VfsError(VfsErrc::invalid_path, fmt::format("empty path '{}'", path));
  const bool mutating = (mode & (open_mode::write | open_mode::truncate)) != 0;

  Handle h;
  h.mode = mode;
  if (auto [prov, rel] = provider_for(k); prov) {
    auto content = prov->read(rel);
    if (!content && !(mode & open_mode::create)) throw VfsError(VfsErrc::not_found, fmt::format("not found: {}", path));
    h.node = std::make_shared<Node>();
    h.node->path = k;
    if (content && !(mode & open_mode::truncate)) h.node->data = std::move(*content);
    h.provider = prov;
    h.special_rel = rel;
  } else {
    auto it = nodes_.find(k);
    if (it == nodes_.end()) {
      if (!(mode & open_mode::create)) throw VfsError(VfsErrc::not_found, fmt::format("not found: {}", path));
      require_overlay("create");
      auto n = std::make_shared<Node>();
      n->path = normalize_path(path, false);
      n->dirty = true;
      it = nodes_.emplace(k, std::move(n)).first;
    } else if (mutating) {
      require_overlay("open for writing");
    }
    h.node = it->second;
    if (mode & open_mode::truncate) {
      h.node->backing = nullptr;
      h.node->data.clear();
      h.node->dirty = true;
    }
  }
  if (mode & open_mode::append) h.pos = h.node->size();
  const int fd = allocate_fd();
  fds_.emplace(fd, std::move(h));
  if (logger_ && logger_->enabled(LogModule::vfs, LogLevel::debug)) {
    logger_->log(LogModule::vfs, LogLevel::debug, fmt::format("open {} -> fd {}", k, fd));
  }
  if (open_observer_) open_observer_(k, fd);
  return fd;
}

void Vfs::close(int fd) {
  Handle& h = handle(fd);
  if (h.provider && h.written) h.provider->write(h.special_rel, h.node->data);
  fds_.erase(fd);
}

size_t Vfs::read(int fd, std::span<uint8_t> buffer) {
  Handle& h = handle(fd);
  if (!(h.mode & open_mode::read)) throw VfsError(VfsErrc::bad_fd, fmt::format("fd {} not readable", fd));
  const Node& n = *h.node;
  const uint64_t size = n.size();
  if (h.pos >= size) return 0;
  const size_t count = static_cast<size_t>(std::min<uint64_t>(buffer.size(), size - h.pos));
  const uint8_t* src = n.backing ? container_.data(*n.backing).data() : n.data.data();
  std::memcpy(buffer.data(), src + h.pos, count);
  h.pos += count;
  return count;
}

size_t Vfs::write(int fd, std::span<const uint8_t> buffer) {
  Handle& h = handle(fd);
  if (!(h.mode & open_mode::write)) throw VfsError(VfsErrc::bad_fd, fmt::format("fd {} not writable", fd));
  Node& n = *h.node;
  if (!h.provider) require_overlay("write");
  materialize(n);
  if (h.mode & open_mode::append) h.pos = n.data.size();
  if (n.data.size() < h.pos + buffer.size()) n.data.resize(h.pos + buffer.size());
  std::copy(buffer.begin(), buffer.end(), n.data.begin() + static_cast<std::ptrdiff_t>(h.pos));
  h.pos += buffer.size();
  h.written = true;
  n.dirty = true;
  return buffer.size();
}

uint64_t Vfs::seek(int fd, int64_t pos, int whence) {
  Handle& h = handle(fd);
  int64_t base = 0;
  switch (whence) {
    case 0: base = 0; break;
    case 1: base = static_cast<int64_t>(h.pos); break;
    case 2: base = static_cast<int64_t>(h.node->size()); break;
    default: throw VfsError(VfsErrc::invalid_argument, fmt::format("bad whence {}", whence));
  }
  const int64_t target = base + pos;
  if (target < 0) throw VfsError(VfsErrc::invalid_argument, "seek before start of file");
  h.pos = static_cast<uint64_t>(target);
  return h.pos;
}

void Vfs::unlink(std::string_view path) {
  const std::string k = key(path);
  if (provider_for(k).first) throw VfsError(VfsErrc::is_special, fmt::format("special file: {}", path));
  auto it = nodes_.find(k);
  if (it == nodes_.end()) throw VfsError(VfsErrc::not_found, fmt::format("not found: {}", path));
  require_overlay("unlink");
  if (it->second->from_container) deleted_.push_back(it->second->path);
  nodes_.erase(it);
}

VfsStat Vfs::stat(std::string_view path) const {
  const std::string k = key(path);
  if (auto [prov, rel] = provider_for(k); prov) {
    auto content = prov->read(rel);
    if (!content) throw VfsError(VfsErrc::not_found, fmt::format("not found: {}", path));
    return {content->size(), 0, 0644, 0};
  }
  auto it = nodes_.find(k);
  if (it == nodes_.end()) throw VfsError(VfsErrc::not_found, fmt::format("not found: {}", path));
  const Node& n = *it->second;
  return {n.size(), n.attributes, n.mode, n.backing ? n.backing->offset : 0};
}

void Vfs::chmod(std::string_view path, uint32_t attributes) {
  const std::string k = key(path);
  if (provider_for(k).first) throw VfsError(VfsErrc::is_special, fmt::format("special file: {}", path));
  auto it = nodes_.find(k);
  if (it == nodes_.end()) throw VfsError(VfsErrc::not_found, fmt::format("not found: {}", path));
  require_overlay("chmod");
  it->second->attributes = attributes;
  it->second->dirty = true;
}

void Vfs::rename(std::string_view from, std::string_view to) {
  const std::string kf = key(from), kt = key(to);
  if (kt.empty()) throw VfsError(VfsErrc::invalid_path, fmt::format("empty path '{}'", to));
  if (provider_for(kf).first || provider_for(kt).first) {
    throw VfsError(VfsErrc::is_special, "rename of a special file");
  }
  auto it = nodes_.find(kf);
  if (it == nodes_.end()) throw VfsError(VfsErrc::not_found, fmt::format("not found: {}", from));
  require_overlay("rename");
  if (kf == kt) {
    it->second->path = normalize_path(to, false);
    it->second->dirty = true;
    return;
  }
  std::shared_ptr<Node> n = std::move(it->second);
  nodes_.erase(it);
  if (auto t = nodes_.find(kt); t != nodes_.end()) {
    if (t->second->from_container) deleted_.push_back(t->second->path);
    nodes_.erase(t);
  }
  if (n->from_container) {
    deleted_.push_back(n->path);
    n->from_container = false;
  }
  n->path = normalize_path(to, false);
  n->dirty = true;
  nodes_.emplace(kt, std::move(n));
}

bool Vfs::exists(std::string_view path) const {
  const std::string k = key(path);
  if (auto [prov, rel] = provider_for(k); prov) return prov->read(rel).has_value();
  return nodes_.count(k) != 0;
}

std::vector<uint8_t> Vfs::read_file(std::string_view path) {
  const int fd = open(path, open_mode::read);
  std::vector<uint8_t> out(static_cast<size_t>(fds_.at(fd).node->size()));
  const size_t n = read(fd, out);
  out.resize(n);
  close(fd);
  return out;
}

std::vector<std::string> Vfs::list() const {
  std::vector<std::string> out;
  for (const auto& [k, n] : nodes_) out.push_back(n->path);
  return out;
}

bool Vfs::overlay_dirty() const {
  if (!deleted_.empty()) return true;
  return std::any_of(nodes_.begin(), nodes_.end(), [](const auto& kv) { return kv.second->dirty; });
}

void Vfs::dump_overlay(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw VfsError(VfsErrc::io_error, fmt::format("cannot create {}", dir.string()));
  std::string meta;
  for (const auto& [k, n] : nodes_) {
    if (!n->dirty) continue;
    const auto bytes = n->backing ? container_.data(*n->backing) : std::span<const uint8_t>(n->data);
    pvfs::write_image(dir / fs::path(n->path), bytes);
    meta += fmt::format("{:08x} {:04o} {}\n", n->attributes, n->mode, n->path);
  }
  std::set<std::string> deleted(deleted_.begin(), deleted_.end());
  std::string del;
  for (const auto& d : deleted) del += d + "\n";
  auto as_bytes = [](const std::string& s) {
    return std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size());
  };
  pvfs::write_image(dir / pvfs::kMetaFile, as_bytes(meta));
  pvfs::write_image(dir / ".pvfsdeleted", as_bytes(del));
}

}  // namespace pinky
