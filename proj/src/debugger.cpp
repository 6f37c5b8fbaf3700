#include "pinky/debugger.hpp"

#include <fmt/format.h>

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace pinky {

namespace {

uint32_t parse_hex(const std::string& s) {
  std::string t = s;
  if (t.size() > 2 && t[0] == '0' && (t[1] == 'x' || t[1] == 'X')) t = t.substr(2);
  if (t.empty() || t.size() > 8 || t.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos) {
    throw std::invalid_argument(fmt::format("bad address '{}'", s));
  }
  return static_cast<uint32_t>(std::stoul(t, nullptr, 16));
}

uint32_t parse_count(const std::string& s) {
  try {
    size_t used = 0;
    const unsigned long v = std::stoul(s, &used, 0);
    if (used != s.size() || v > 0x10000) throw std::invalid_argument(s);
    return static_cast<uint32_t>(v);
  } catch (const std::logic_error&) {
    throw std::invalid_argument(fmt::format("bad length '{}'", s));
  }
}

int parse_number(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || s.size() > 9) {
    throw std::invalid_argument(fmt::format("bad breakpoint number '{}'", s));
  }
  return std::stoi(s);
}

}  // namespace

Command parse_command(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> tok;
  for (std::string t; in >> t;) tok.push_back(t);
  Command c;
  if (tok.empty() || tok[0][0] == '#') return c;
  const std::string& w = tok[0];
  auto need = [&](size_t n) {
    if (tok.size() != n + 1) throw std::invalid_argument(fmt::format("usage error: '{}' takes {} argument(s)", w, n));
  };
  using K = Command::Kind;
  if (w == "run" || w == "r") {
    need(1);
    c.kind = K::run;
    c.args = {tok[1]};
  } else if (w == "break" || w == "b") {
    need(1);
    c.kind = K::brk;
    c.va = parse_hex(tok[1]);
  } else if (w == "delete" || w == "d") {
    need(1);
    c.kind = K::del;
    c.number = parse_number(tok[1]);
  } else if (w == "next" || w == "n") {
    need(0);
    c.kind = K::next;
  } else if (w == "step" || w == "s") {
    need(0);
    c.kind = K::step;
  } else if (w == "continue" || w == "c") {
    need(0);
    c.kind = K::cont;
  } else if (w == "probe") {
    if (tok.size() != 2 && tok.size() != 3) throw std::invalid_argument("usage: probe <name> [on|off]");
    if (tok.size() == 3 && tok[2] != "on" && tok[2] != "off") throw std::invalid_argument("usage: probe <name> [on|off]");
    c.kind = K::probe;
    c.args.assign(tok.begin() + 1, tok.end());
  } else if (w == "set") {
    if (tok.size() < 3) throw std::invalid_argument("usage: set <key> <value>");
    c.kind = K::set;
    std::string value = tok[2];
    for (size_t i = 3; i < tok.size(); ++i) value += " " + tok[i];
    c.args = {tok[1], value};
  } else if (w == "regs") {
    need(0);
    c.kind = K::regs;
  } else if (w == "mem" || w == "x") {
    need(2);
    c.kind = K::mem;
    c.va = parse_hex(tok[1]);
    c.len = parse_count(tok[2]);
  } else if (w == "dump") {
    need(1);
    c.kind = K::dump;
    c.args = {tok[1]};
  } else if (w == "watch") {
    need(1);
    c.kind = K::watch;
    c.va = parse_hex(tok[1]);
  } else if (w == "quit" || w == "q" || w == "exit") {
    c.kind = K::quit;
  } else if (w == "help" || w == "?") {
    c.kind = K::help;
  } else if (tok.size() == 1 && w.find_first_of("./\\") != std::string::npos) {
    c.kind = K::run;
    c.args = {w};
  } else {
    throw std::invalid_argument(fmt::format("unknown command '{}'", w));
  }
  return c;
}

Session::Session(std::ostream& out, ConfigStore config)
    : out_(out), engine_(std::make_unique<Engine>(mmu_, std::move(config), &out)) {
  loader_ = std::make_unique<Loader>(vfs_, mmu_);
  loader_->attach(*engine_);
  loader_->set_stdout(&out_);
}

Session::~Session() {
  breakpoints_.clear();
  watchpoints_.clear();
  temp_stop_armed_ = false;
  sync_consumers();
}

void Session::init_vfs(const std::filesystem::path& container) { vfs_.init_file(container); }

int Session::free_number() const {
  int n = 0;
  for (const auto& [num, va] : breakpoints_) {
    if (num != n) break;
    ++n;
  }
  return n;
}

void Session::sync_consumers() {
  ProbeRegistry& probes = engine_->probes();
  const auto ids = engine_->probe_ids();
  const bool want_enter = !breakpoints_.empty() || temp_stop_armed_;
  const bool have_enter = probes.consumer_count(ids.block_enter) != 0;
  if (want_enter && !have_enter) {
    probes.register_consumer(ids.block_enter, kConsumerId, [this](ProbeContext& ctx) {
      for (const auto& [num, va] : breakpoints_) {
        if (va == ctx.pc) {
          hit_ = num;
          ctx.verdict = Verdict::stop;
          return;
        }
      }
      if (temp_stop_armed_) {
        hit_ = free_number();
        ctx.verdict = Verdict::stop;
      }
    });
    probes.enable(ids.block_enter);
  } else if (!want_enter && have_enter) {
    probes.unregister_consumer(ids.block_enter, kConsumerId);
    probes.disable(ids.block_enter);
  }

  const bool want_watch = !watchpoints_.empty();
  const bool have_watch = probes.consumer_count(ids.mmu_write) != 0;
  if (want_watch && !have_watch) {
    probes.register_consumer(ids.mmu_write, kConsumerId, [this](ProbeContext& ctx) {
      for (const auto& [num, va] : watchpoints_) {
        if (va >= ctx.address && uint64_t{va} < uint64_t{ctx.address} + ctx.size) {
          if (!watch_hit_) watch_hit_ = std::make_pair(num, ctx.address);
          ctx.verdict = Verdict::stop;
          return;
        }
      }
    });
    probes.enable(ids.mmu_write);
  } else if (!want_watch && have_watch) {
    probes.unregister_consumer(ids.mmu_write, kConsumerId);
    probes.disable(ids.mmu_write);
  }
}

void Session::add_breakpoint(uint32_t va) {
  breakpoints_[free_number()] = va;
  engine_->add_split_point(va);
  sync_consumers();
}

bool Session::delete_breakpoint(int number) {
  auto it = breakpoints_.find(number);
  if (it == breakpoints_.end()) return false;
  const uint32_t va = it->second;
  breakpoints_.erase(it);
  bool shared = false;
  for (const auto& [n, v] : breakpoints_) shared |= v == va;
  if (!shared) engine_->remove_split_point(va);
  sync_consumers();
  return true;
}

void Session::add_watchpoint(uint32_t va) {
  int n = 0;
  while (watchpoints_.count(n)) ++n;
  watchpoints_[n] = va;
  sync_consumers();
  out_ << fmt::format("Watchpoint {} at 0x{:08X}\n", n, va);
}

void Session::run_sample(const std::string& path) {
  engine_->cache().clear();
  mmu_.clear();
  vfs_.init(vfs_.container().image);
  engine_->reset_counters();
  engine_->fpu() = FpuState{};
  loader_ = std::make_unique<Loader>(vfs_, mmu_);
  loader_->attach(*engine_);
  loader_->set_stdout(&out_);
  running_ = false;
  last_stop_.reset();

  out_ << "EMULATING " << path << "\n";
  LoadedImage image;
  if (vfs_.exists(path)) {
    image = loader_->load_pe(path);
  } else {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(fmt::format("cannot open {}", path));
    const std::vector<uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    image = loader_->load_pe_bytes(bytes, path);
  }
  loader_->setup_process(state_, image);
  running_ = true;
  skip_enter_ = false;
  resume(false);
}

void Session::resume(bool one_block) {
  if (!running_) {
    out_ << "The program is not running.\n";
    return;
  }
  temp_stop_armed_ = one_block;
  sync_consumers();
  hit_.reset();
  watch_hit_.reset();
  RunOptions opts;
  opts.skip_first_enter = skip_enter_;
  StopReason r;
  try {
    r = engine_->run(state_, state_.pc, opts);
  } catch (...) {
    temp_stop_armed_ = false;
    sync_consumers();
    throw;
  }
  temp_stop_armed_ = false;
  sync_consumers();
  report(r);
}

void Session::report(const StopReason& r) {
  last_stop_ = r;
  skip_enter_ = false;
  switch (r.kind) {
    case StopKind::breakpoint:
      out_ << fmt::format("Breakpoint {} at 0x{:08X}\n", hit_.value_or(free_number()), r.va);
      skip_enter_ = true;
      return;
    case StopKind::watchpoint:
      if (watch_hit_) {
        out_ << fmt::format("Watchpoint {}: write to 0x{:08X}, stopped at 0x{:08X}\n", watch_hit_->first,
                            watch_hit_->second, r.va);
      } else {
        out_ << "Stopped: " << r.describe() << "\n";
      }
      return;
    case StopKind::metric_threshold:
    case StopKind::block_limit:
      out_ << "Stopped: " << r.describe() << "\n";
      return;
    case StopKind::guest_exit:
    case StopKind::fault:
    case StopKind::unsupported_instruction:
    case StopKind::unknown_syscall:
      out_ << "Stopped: " << r.describe() << "\n";
      running_ = false;
      return;
  }
}

void Session::print_regs() {
  const auto& g = state_.regs;
  using namespace xir::reg;
  out_ << fmt::format("EAX={:08X} EBX={:08X} ECX={:08X} EDX={:08X}\n", g[eax], g[ebx], g[ecx], g[edx]);
  out_ << fmt::format("ESI={:08X} EDI={:08X} EBP={:08X} ESP={:08X}\n", g[esi], g[edi], g[ebp], g[esp]);
  out_ << fmt::format("EIP={:08X} EFLAGS={:08X}\n", state_.pc, g[eflags]);
}

void Session::print_mem(uint32_t va, uint32_t len) {
  for (uint32_t row = 0; row < len; row += 16) {
    const uint32_t at = va + row;
    std::string line = fmt::format("{:08X} ", at);
    for (uint32_t i = 0; i < 16 && row + i < len; ++i) {
      const uint32_t a = at + i;
      uint8_t b = 0;
      if (mmu_.try_read(a, std::span<uint8_t>(&b, 1))) {
        line += " ??";
      } else {
        line += fmt::format(" {:02X}", b);
      }
    }
    out_ << line << "\n";
  }
}

void Session::print_help() {
  out_ << "commands:\n"
          "  run <path> | <path>   load and start a sample\n"
          "  break <hex va>        set a breakpoint\n"
          "  delete <n>            remove breakpoint n\n"
          "  next                  run one codeblock\n"
          "  step                  single-step one guest instruction\n"
          "  continue              resume\n"
          "  probe <name> [on|off] enable or disable a probe\n"
          "  set <key> <value>     change a setting (log:ir or log.ir)\n"
          "  regs                  show registers\n"
          "  mem <hex va> <len>    hex dump guest memory\n"
          "  dump <dir>            write an MMU snapshot\n"
          "  watch <hex va>        stop on writes to an address\n"
          "  quit                  leave\n";
}

void Session::snapshot(const std::filesystem::path& dir) const {
  mmu_.dump(dir);
  std::ofstream f(dir / "registers.txt", std::ios::binary | std::ios::trunc);
  if (!f) throw MmuError(MmuErrc::io_error, 0, "cannot write " + (dir / "registers.txt").string());
  for (unsigned i = 0; i < state_.regs.size(); ++i) f << fmt::format("r{}=0x{:08X}\n", i, state_.regs[i]);
  f << fmt::format("flags=0x{:08X}\n", state_.flags());
  f << fmt::format("eflags=0x{:08X}\n", state_.eflags());
  f << fmt::format("pc=0x{:08X}\n", state_.pc);
  if (!f) throw MmuError(MmuErrc::io_error, 0, "registers.txt write failed");
}

bool Session::execute(const std::string& line) {
  const Command c = parse_command(line);
  using K = Command::Kind;
  try {
    switch (c.kind) {
      case K::empty: break;
      case K::run: run_sample(c.args[0]); break;
      case K::brk: add_breakpoint(c.va); break;
      case K::del:
        if (delete_breakpoint(c.number)) {
          out_ << fmt::format("Deleted breakpoint {}\n", c.number);
        } else {
          out_ << fmt::format("No breakpoint {}\n", c.number);
        }
        break;
      case K::next: resume(true); break;
      case K::step: {
        ProbeRegistry& p = engine_->probes();
        if (!p.is_enabled(engine_->probe_ids().step_mode)) p.enable(engine_->probe_ids().step_mode);
        resume(true);
        break;
      }
      case K::cont: resume(false); break;
      case K::probe: {
        ProbeRegistry& p = engine_->probes();
        ProbeId id;
        try {
          id = p.resolve(c.args[0]);
        } catch (const ProbeError&) {
          out_ << fmt::format("Unknown probe '{}'\n", c.args[0]);
          break;
        }
        if (c.args.size() == 2 && c.args[1] == "off") {
          p.disable(id);
        } else {
          p.enable(id);
        }
        break;
      }
      case K::set: engine_->config().set_from_string(normalize_config_key(c.args[0]), c.args[1]); break;
      case K::regs: print_regs(); break;
      case K::mem: print_mem(c.va, c.len); break;
      case K::dump:
        snapshot(c.args[0]);
        out_ << fmt::format("Dumped {} region(s) to {}\n", mmu_.regions().size(), c.args[0]);
        break;
      case K::watch: add_watchpoint(c.va); break;
      case K::quit: return false;
      case K::help: print_help(); break;
    }
  } catch (const std::exception& e) {
    out_ << "Error: " << e.what() << "\n";
  }
  return true;
}

int Session::repl(std::istream& in, bool echo, bool strict) {
  std::string line;
  for (;;) {
    out_ << "> " << std::flush;
    if (!std::getline(in, line)) {
      out_ << "\n";
      return 0;
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (echo) out_ << line << "\n";
    try {
      if (!execute(line)) return 0;
    } catch (const std::invalid_argument& e) {
      out_ << "Error: " << e.what() << "\n";
      if (strict) return 2;
      print_help();
    }
  }
}

}  // namespace pinky
