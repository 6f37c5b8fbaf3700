#include "pinky/config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>

namespace pinky {

namespace {

const char* type_name(const ConfigValue& v) {
  switch (v.index()) {
    case 0: return "int";
    case 1: return "bool";
    case 2: return "string";
    default: return "double";
  }
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

bool level_in_range(const ConfigValue& v) {
  const auto n = std::get<int64_t>(v);
  return n >= 0 && n <= 3;
}

bool positive_int(const ConfigValue& v) { return std::get<int64_t>(v) > 0; }
bool non_negative_int(const ConfigValue& v) { return std::get<int64_t>(v) >= 0; }
bool non_negative_double(const ConfigValue& v) { return std::get<double>(v) >= 0.0; }

}  // namespace

ConfigStore ConfigStore::with_defaults() {
  ConfigStore c;
  for (int m = 0; m < static_cast<int>(LogModule::count); ++m) {
    c.define(fmt::format("log.{}", log_module_name(static_cast<LogModule>(m))), int64_t{0},
             level_in_range);
  }
  c.define("engine.tier_threshold", int64_t{16}, non_negative_int);
  c.define("engine.cache", std::string("unbounded"), [](const ConfigValue& v) {
    const auto& s = std::get<std::string>(v);
    return s == "unbounded" || s == "lru";
  });
  c.define("engine.cache_capacity", int64_t{4096}, positive_int);
  c.define("engine.backend", std::string("predecoded"), [](const ConfigValue& v) {
    const auto& s = std::get<std::string>(v);
    return s == "predecoded" || s == "none";
  });
  c.define("engine.max_block_instrs", int64_t{32}, positive_int);
  c.define("stop.threshold_metrics", 0.0, non_negative_double);
  c.define("stop.metrics_per_second", 0.0, non_negative_double);
  c.define("stop.weights", std::string());
  c.define("stop.max_blocks", int64_t{0}, non_negative_int);
  c.define("mmu.enforce_protection", false);
  c.define("vfs.overlay", true);
  return c;
}

void ConfigStore::define(std::string key, ConfigValue default_value, Validator valid) {
  if (entries_.count(key)) throw ConfigError(ConfigErrc::duplicate_key, "duplicate key " + key);
  entries_.emplace(std::move(key), Entry{std::move(default_value), std::move(valid), {}});
}

bool ConfigStore::has(std::string_view key) const { return entries_.find(key) != entries_.end(); }

ConfigStore::Entry& ConfigStore::find(std::string_view key) {
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw ConfigError(ConfigErrc::unknown_key, fmt::format("unknown key '{}'", key));
  }
  return it->second;
}

const ConfigStore::Entry& ConfigStore::find(std::string_view key) const {
  return const_cast<ConfigStore*>(this)->find(key);
}

void ConfigStore::set(std::string_view key, ConfigValue value) {
  Entry& e = find(key);
  // ints are accepted where doubles are expected
  if (e.value.index() == 3 && value.index() == 0) {
    value = static_cast<double>(std::get<int64_t>(value));
  }
  if (value.index() != e.value.index()) {
    throw ConfigError(ConfigErrc::type_mismatch,
                      fmt::format("'{}' expects {}, got {}", key, type_name(e.value),
                                  type_name(value)));
  }
  if (e.valid && !e.valid(value)) {
    throw ConfigError(ConfigErrc::invalid_value, fmt::format("invalid value for '{}'", key));
  }
  e.value = std::move(value);
  // copy: a listener may subscribe or unsubscribe
  const auto listeners = e.listeners;
  for (const auto& [id, fn] : listeners) fn(e.value);
}

void ConfigStore::set_from_string(std::string_view key, std::string_view text) {
  const Entry& e = find(key);
  text = trim(text);
  const auto mismatch = [&] {
    return ConfigError(ConfigErrc::type_mismatch,
                       fmt::format("'{}' expects {}, got '{}'", key, type_name(e.value), text));
  };
  switch (e.value.index()) {
    case 0: {
      int64_t v = 0;
      int base = 10;
      std::string_view digits = text;
      bool neg = false;
      if (!digits.empty() && digits[0] == '-') {
        neg = true;
        digits.remove_prefix(1);
      }
      if (digits.size() > 2 && digits[0] == '0' && (digits[1] == 'x' || digits[1] == 'X')) {
        base = 16;
        digits.remove_prefix(2);
      }
      auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, base);
      if (ec != std::errc() || p != digits.data() + digits.size() || digits.empty()) throw mismatch();
      set(key, neg ? -v : v);
      return;
    }
    case 1:
      if (text == "1" || text == "true" || text == "on") return set(key, true);
      if (text == "0" || text == "false" || text == "off") return set(key, false);
      throw mismatch();
    case 2:
      return set(key, std::string(text));
    default: {
      try {
        size_t used = 0;
        const double v = std::stod(std::string(text), &used);
        if (used != text.size()) throw mismatch();
        return set(key, v);
      } catch (const std::logic_error&) {
        throw mismatch();
      }
    }
  }
}

const ConfigValue& ConfigStore::get(std::string_view key) const { return find(key).value; }

int64_t ConfigStore::get_int(std::string_view key) const { return std::get<int64_t>(get(key)); }
bool ConfigStore::get_bool(std::string_view key) const { return std::get<bool>(get(key)); }
const std::string& ConfigStore::get_string(std::string_view key) const {
  return std::get<std::string>(get(key));
}
double ConfigStore::get_double(std::string_view key) const { return std::get<double>(get(key)); }

int ConfigStore::subscribe(std::string_view key, Listener listener) {
  const int id = next_listener_++;
  find(key).listeners.emplace_back(id, std::move(listener));
  return id;
}

void ConfigStore::unsubscribe(int id) {
  for (auto& [key, e] : entries_) {
    std::erase_if(e.listeners, [id](const auto& l) { return l.first == id; });
  }
}

void ConfigStore::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(ConfigErrc::io_error, "cannot open " + path);
  load_stream(in);
}

void ConfigStore::load_stream(std::istream& in) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = line;
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(ConfigErrc::invalid_value, fmt::format("line {}: expected key = value", lineno));
    }
    set_from_string(normalize_config_key(trim(view.substr(0, eq))), view.substr(eq + 1));
  }
}

std::vector<std::string> ConfigStore::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, e] : entries_) out.push_back(k);
  return out;
}

std::string normalize_config_key(std::string_view key) {
  std::string out(key);
  std::replace(out.begin(), out.end(), ':', '.');
  return out;
}

const char* log_module_name(LogModule m) {
  static constexpr const char* kNames[] = {"ir", "engine", "mmu", "vfs", "loader", "probes", "metrics"};
  return kNames[static_cast<size_t>(m)];
}

Logger::Logger(std::ostream* out) : out_(out) {}

void Logger::bind(ConfigStore& config) {
  for (int m = 0; m < static_cast<int>(LogModule::count); ++m) {
    const auto mod = static_cast<LogModule>(m);
    const auto key = fmt::format("log.{}", log_module_name(mod));
    set_level(mod, static_cast<int>(config.get_int(key)));
    config.subscribe(key, [this, mod](const ConfigValue& v) {
      set_level(mod, static_cast<int>(std::get<int64_t>(v)));
    });
  }
}

void Logger::log(LogModule m, LogLevel l, std::string_view message) {
  if (!enabled(m, l)) return;
  static constexpr const char* kLevels[] = {"OFF", "INFO", "DEBUG", "TRACE"};
  *out_ << kLevels[static_cast<int>(l)] << " - " << log_module_name(m) << " - " << message << '\n';
}

void Logger::raw(LogModule m, LogLevel l, std::string_view text) {
  if (!enabled(m, l)) return;
  *out_ << text;
}

}  // namespace pinky
