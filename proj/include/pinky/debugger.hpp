#pragma once

// Scriptable command-line debugger over one engine instance.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pinky/config.hpp"
#include "pinky/engine.hpp"
#include "pinky/loader.hpp"
#include "pinky/mmu.hpp"
#include "pinky/vfs.hpp"
#include "pinky/vm.hpp"

namespace pinky {

struct Command {
  enum class Kind {
    run, brk, del, next, step, cont, probe, set, regs, mem, dump, watch, quit, help, empty,
  };
  Kind kind = Kind::empty;
  std::vector<std::string> args;
  uint32_t va = 0;
  uint32_t len = 0;
  int number = 0;
};

/// Throws std::invalid_argument with a user-facing message.
Command parse_command(const std::string& line);

class Session {
 public:
  explicit Session(std::ostream& out, ConfigStore config = ConfigStore::with_defaults());
  ~Session();

  void init_vfs(const std::filesystem::path& container);

  /// Executes one line. Returns false on quit. Parse errors throw
  /// std::invalid_argument after nothing has been executed.
  bool execute(const std::string& line);

  /// Reads commands until EOF or quit. `echo` repeats each command after
  /// the prompt (non-interactive input). In strict mode the first parse
  /// error ends the session with exit code 2.
  int repl(std::istream& in, bool echo, bool strict);

  /// MMU dump plus registers.txt.
  void snapshot(const std::filesystem::path& dir) const;

  Engine& engine() { return *engine_; }
  MachineState& state() { return state_; }
  Mmu& mmu() { return mmu_; }
  Vfs& vfs() { return vfs_; }
  Loader& loader() { return *loader_; }
  const std::optional<StopReason>& last_stop() const { return last_stop_; }
  const std::map<int, uint32_t>& breakpoints() const { return breakpoints_; }

  void run_sample(const std::string& path);
  void add_breakpoint(uint32_t va);
  bool delete_breakpoint(int number);
  void add_watchpoint(uint32_t va);
  void resume(bool one_block);

 private:
  static constexpr int kConsumerId = 0x0DB6;

  int free_number() const;
  void sync_consumers();
  void report(const StopReason& r);
  void print_regs();
  void print_mem(uint32_t va, uint32_t len);
  void print_help();

  std::ostream& out_;
  Mmu mmu_;
  Vfs vfs_;
  std::unique_ptr<Engine> engine_;
  std::unique_ptr<Loader> loader_;
  MachineState state_;
  std::map<int, uint32_t> breakpoints_;
  std::map<int, uint32_t> watchpoints_;
  std::optional<StopReason> last_stop_;
  bool running_ = false;
  bool skip_enter_ = false;
  bool temp_stop_armed_ = false;
  std::optional<int> hit_;
  std::optional<std::pair<int, uint32_t>> watch_hit_;
};

}  // namespace pinky
