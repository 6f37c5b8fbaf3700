#pragma once

// Runtime key/value configuration and per-module leveled logging.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace pinky {

using ConfigValue = std::variant<int64_t, bool, std::string, double>;

enum class ConfigErrc { unknown_key, type_mismatch, invalid_value, duplicate_key, io_error };

class ConfigError : public std::runtime_error {
 public:
  ConfigError(ConfigErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ConfigErrc code() const { return code_; }

 private:
  ConfigErrc code_;
};

/// Closed set of typed keys. set() validates and notifies listeners
/// before it returns.
class ConfigStore {
 public:
  using Listener = std::function<void(const ConfigValue&)>;
  using Validator = std::function<bool(const ConfigValue&)>;

  /// Store pre-populated with the emulator's standard keys.
  static ConfigStore with_defaults();

  void define(std::string key, ConfigValue default_value, Validator valid = {});
  bool has(std::string_view key) const;

  void set(std::string_view key, ConfigValue value);
  /// Parses `text` according to the key's registered type.
  void set_from_string(std::string_view key, std::string_view text);
  const ConfigValue& get(std::string_view key) const;

  int64_t get_int(std::string_view key) const;
  bool get_bool(std::string_view key) const;
  const std::string& get_string(std::string_view key) const;
  double get_double(std::string_view key) const;

  int subscribe(std::string_view key, Listener listener);
  void unsubscribe(int id);

  /// `key = value` lines; '#' starts a comment.
  void load_file(const std::string& path);
  void load_stream(std::istream& in);

  std::vector<std::string> keys() const;

 private:
  struct Entry {
    ConfigValue value;
    Validator valid;
    std::vector<std::pair<int, Listener>> listeners;
  };
  Entry& find(std::string_view key);
  const Entry& find(std::string_view key) const;

  std::map<std::string, Entry, std::less<>> entries_;
  int next_listener_ = 1;
};

/// Dotted alias used by the debugger: "log:ir" -> "log.ir".
std::string normalize_config_key(std::string_view key);

enum class LogModule { ir, engine, mmu, vfs, loader, probes, metrics, count };

enum class LogLevel { off = 0, info = 1, debug = 2, trace = 3 };

const char* log_module_name(LogModule m);

class Logger {
 public:
  explicit Logger(std::ostream* out = nullptr);

  /// Keeps levels in sync with the store's log.* keys.
  void bind(ConfigStore& config);

  void set_output(std::ostream* out) { out_ = out; }
  std::ostream* output() const { return out_; }
  void set_level(LogModule m, int level) { levels_[static_cast<size_t>(m)] = level; }
  int level(LogModule m) const { return levels_[static_cast<size_t>(m)]; }
  bool enabled(LogModule m, LogLevel l) const {
    return out_ != nullptr && level(m) >= static_cast<int>(l);
  }

  /// Writes `LEVEL - <module> - <message>`.
  void log(LogModule m, LogLevel l, std::string_view message);
  /// Raw text continuation lines (trace listings).
  void raw(LogModule m, LogLevel l, std::string_view text);

 private:
  std::ostream* out_;
  int levels_[static_cast<size_t>(LogModule::count)] = {};
};

}  // namespace pinky
