// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on
// any failure or budget overrun.

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "pinky/debugger.hpp"
#include "pinky/engine.hpp"
#include "pinky/loader.hpp"
#include "pinky/metrics.hpp"
#include "pinky/mmu.hpp"
#include "pinky/translator.hpp"
#include "pinky/vfs.hpp"
#include "support/mmu_model.hpp"
#include "support/scenarios.hpp"

using namespace pinky;
using namespace support;
namespace fs = std::filesystem;

namespace {

class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  template <typename A, typename B>
  void equal(const A& got, const B& want, const std::string& what) {
    expect(got == want, what);
  }
  void note(std::string text) { notes_.push_back(std::move(text)); }

  bool ok() const { return failed_ == 0; }
  int checks() const { return checks_; }
  int failed() const { return failed_; }
  const std::vector<std::string>& failures() const { return failures_; }
  const std::vector<std::string>& notes() const { return notes_; }

 private:
  int checks_ = 0;
  int failed_ = 0;
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

std::vector<uint8_t> host_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string text(const std::vector<uint8_t>& v) { return {v.begin(), v.end()}; }
std::vector<uint8_t> bytes(std::string_view s) { return {s.begin(), s.end()}; }

struct Flat {
  Mmu mmu;
  std::unique_ptr<Engine> engine;
  MachineState st;

  Flat(const std::vector<uint8_t>& code, uint32_t va, const EngineSetup& setup = {}) {
    load_flat(mmu, code, va);
    mmu.pmap(kPageSize, kScratchVa, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "scratch");
    engine = std::make_unique<Engine>(mmu, make_config(setup));
    engine->register_syscall(kExitSyscall, [](Engine& e, MachineState&, Mmu&) { e.request_exit(0); });
    st.regs[xir::reg::esp] = kScratchVa + 0x800;
  }
};

template <typename Code>
std::optional<Code> error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const LoaderError& e) {
    if constexpr (std::is_same_v<Code, LoaderErrc>) return e.code();
  } catch (const VfsError& e) {
    if constexpr (std::is_same_v<Code, VfsErrc>) return e.code();
  } catch (const metrics::MetricsError& e) {
    if constexpr (std::is_same_v<Code, metrics::MetricsErrc>) return e.code();
  } catch (...) {
  }
  return std::nullopt;
}

// 1
void golden_translations(Check& c) {
  const std::string prologue = logged_translation(prologue_bytes(), kPrologueVa);
  c.equal(prologue.substr(0, prologue.find('\n')), std::string("INFO - ir - Source -> IR:"), "listing header");
  c.equal(trace_body(prologue), std::string(kPrologueListing), "push ebx / push edi / call listing");
  c.equal(trace_body(logged_translation(store_bytes(), kStoreVa, 1)), std::string(kStoreListing),
          "mov dword [ebp-0x10] listing");
}

// 2
void overlap(Check& c) {
  const Program p = overlap_program();
  const std::vector<uint8_t> tail(p.code.begin() + (kOverlapCall - kCodeVa), p.code.end());
  Flat f(tail, kOverlapCall);
  const auto clc = x86::decode_guest(f.mmu, kOverlapTarget);
  const auto jnb = x86::decode_guest(f.mmu, kOverlapTarget + 1);
  c.equal(std::string(x86::mnemonic_name(clc.mnemonic)), std::string("clc"), "mnemonic at 0x407F53");
  c.expect(jnb.mnemonic == x86::Mnemonic::jcc && std::string(x86::jcc_name(jnb.cc)) == "jnb",
           "mnemonic at 0x407F54");
  c.equal(jnb.target, kOverlapExit, "jnb target");
  const auto a = x86::decode_guest(f.mmu, kOverlapAnd);
  c.expect(a.mnemonic == x86::Mnemonic::and_ && kOverlapAnd + a.length > kOverlapTarget,
           "0x407F53 lies inside the and at 0x407F4F");

  // execution: the call lands mid-instruction and still exits through jnb
  std::vector<uint32_t> entries;
  f.engine->probes().register_consumer(f.engine->probe_ids().block_enter, 1,
                                       [&](ProbeContext& ctx) { entries.push_back(ctx.pc); });
  f.engine->probes().enable(f.engine->probe_ids().block_enter);
  f.st.regs[xir::reg::eflags] = 0x203;
  const auto stop = f.engine->run(f.st, kOverlapCall);
  c.equal(stop.kind, StopKind::guest_exit, "overlap run exits: " + stop.describe());
  c.equal(entries, std::vector<uint32_t>{kOverlapCall, kOverlapTarget, kOverlapExit}, "block entries");
}

// 3
void differential(Check& c) {
  Rng rng(0xACCE97);
  const int kPrograms = 10000;
  int traps = 0;
  for (int i = 0; i < kPrograms; ++i) {
    const Program p = random_program(rng);
    const Expected want = run_oracle(p);
    if (want.trap_at) ++traps;
    const auto diff = compare(p, want, run_emulator(p));
    c.expect(diff.empty(), fmt::format("program {}:\n{}", i, diff));
  }
  c.note(fmt::format("{} programs, {} ending in #DE", kPrograms, traps));
}

// 4
void tier_cache_equivalence(Check& c) {
  EngineSetup interp, t1, t16, lru2;
  interp.backend = "none";
  t1.tier_threshold = 1;
  t16.tier_threshold = 16;
  lru2.cache = "lru";
  lru2.cache_capacity = 2;

  std::vector<std::pair<std::string, Program>> corpus = loop_fixtures();
  Rng rng(0x7E1);
  for (int i = 0; i < 2000; ++i) corpus.emplace_back(fmt::format("random {}", i), random_program(rng));

  uint64_t revisits = 0, lru_extra = 0;
  for (const auto& [name, p] : corpus) {
    const CorpusRun ref = run_recorded(p, interp);
    c.equal(ref.obs.translations, distinct(ref.entries), name + ": interpreter translations");
    c.equal(ref.compiles, uint64_t{0}, name + ": interpreter compiles");
    revisits += ref.entries.size() - distinct(ref.entries);
    for (const auto* s : {&t1, &t16, &lru2}) {
      const std::string tag = fmt::format("{} [{} t={} cap={}]", name, s->cache, s->tier_threshold, s->cache_capacity);
      const CorpusRun got = run_recorded(p, *s);
      c.equal(got.obs.cpu.r, ref.obs.cpu.r, tag + ": registers");
      c.equal(got.obs.cpu.eflags, ref.obs.cpu.eflags, tag + ": flags");
      c.equal(got.obs.stop.kind, ref.obs.stop.kind, tag + ": stop");
      c.equal(got.image, ref.image, tag + ": MMU dump");
      c.equal(got.entries, ref.entries, tag + ": block sequence");
      if (s == &lru2) {
        const uint64_t want = predicted_lru_translations(ref.entries, 2);
        c.equal(got.obs.translations, want, tag + ": translations");
        lru_extra += want - distinct(ref.entries);
      } else {
        c.equal(got.obs.translations, distinct(ref.entries), tag + ": translations");
        c.equal(got.compiles, predicted_compiles(ref.entries, s->tier_threshold), tag + ": compiles");
      }
    }
  }
  c.expect(revisits > 0, "corpus revisits cached blocks");
  c.expect(lru_extra > 0, "capacity 2 forces retranslation somewhere");
  c.note(fmt::format("{} programs, {} cached revisits, {} LRU retranslations", corpus.size(), revisits, lru_extra));
}

// 5
void self_modifying(Check& c) {
  const Program p = self_patching_fixture();
  for (const char* backend : {"none", "predecoded"}) {
    for (int64_t threshold : {0, 1, 16}) {
      EngineSetup s;
      s.backend = backend;
      s.tier_threshold = threshold;
      const auto tag = fmt::format("{} t={}", backend, threshold);
      uint64_t translations = 0;
      uint8_t patched = 0;
      RunHooks hooks;
      hooks.inspect = [&](Engine& e, Mmu& mmu) {
        translations = e.translator().invocations();
        patched = mmu.read_memory(kCodeVa + 0x0A, 1)[0];
      };
      const Observed o = run_emulator(p, s, hooks);
      c.equal(o.stop.kind, StopKind::guest_exit, tag + ": exit");
      // two passes through the add: 1 before the patch, 7 after
      c.equal(o.cpu.r[oracle::EAX], 7u, tag + ": eax");
      c.equal(o.cpu.r[oracle::ECX], 8u, tag + ": ecx");
      c.equal(o.cpu.r[oracle::EBX], 0u, tag + ": ebx");
      c.equal(patched, uint8_t{7}, tag + ": patched immediate");
      c.equal(translations, uint64_t{5}, tag + ": translator invocations");
    }
  }
}

// 6
void mmu_properties(Check& c) {
  const auto diff = mmu_random_operations(0xACC6, 100000);
  c.expect(diff.empty(), "random operations: " + diff);

  Mmu mmu;
  mmu.pmap(3 * kPageSize, 0x40000, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "three");
  mmu.pmap(kPageSize, 0x43000, map_flags::rwx | map_flags::fixed, 0, 0xFFFFFFFF, "one");
  std::mt19937 rng(6);
  for (uint32_t off : {0xFFDu, 0x1FFFu, 0x2FFEu, 0x1000u - 1}) {
    std::vector<uint8_t> data(5000 % (off + 7) + 2);
    data.resize(std::min<size_t>(data.size(), 0x44000 - (0x40000 + off)));
    for (auto& b : data) b = static_cast<uint8_t>(rng());
    mmu.write_memory(0x40000 + off, data);
    c.equal(mmu.read_memory(0x40000 + off, static_cast<uint32_t>(data.size())), data,
            fmt::format("crossing roundtrip at +{:#x}", off));
  }
  mmu.write_u32(0x40FFE, 0xA1B2C3D4);
  c.equal(mmu.read_u32(0x40FFE), 0xA1B2C3D4u, "u32 across a page boundary");

  mmu.pmap(4 * kPageSize, 0x10000000, map_flags::read, 0x10000000, 0x20000000, "heap");
  mmu.write_memory(0x10001234, bytes("dump me"));
  const fs::path dir = fs::temp_directory_path() / fmt::format("pinky_acceptance_dump_{}", getpid());
  fs::remove_all(dir);
  mmu.dump(dir);
  Mmu back;
  back.restore(dir);
  c.equal(memory_image(back), memory_image(mmu), "dump -> restore -> compare");
  c.expect(back.check_invariants().empty(), "restored MMU invariants");
  fs::remove_all(dir);
}

// 7
void vfs(Check& c) {
  const fs::path fx = fixtures_dir();
  const auto image = host_file(fx / "tree.pvfs");
  c.equal(pvfs::pack(fx / "vfs_tree"), image, "pack(tree) matches the reference image");
  const fs::path dir = fs::temp_directory_path() / fmt::format("pinky_acceptance_vfs_{}", getpid());
  fs::remove_all(dir);
  pvfs::unpack(pvfs::parse(image), dir);
  c.equal(pvfs::pack(dir), image, "unpack -> pack bit-identical");
  fs::remove_all(dir);

  Vfs v;
  v.init(image);
  const int fd = v.open("data/hello.txt", "r");
  c.equal(fd, 3, "first descriptor");
  std::vector<uint8_t> buf(5);
  c.equal(v.read(fd, buf), size_t{5}, "read count");
  c.equal(text(buf), std::string("hello"), "read data");
  c.equal(v.seek(fd, -6, 2), uint64_t{6}, "seek from end");
  c.equal(v.read(fd, buf), size_t{5}, "read after seek");
  c.equal(text(buf), std::string("world"), "data after seek");
  v.close(fd);
  c.equal(error_code<VfsErrc>([&] { v.close(fd); }), std::optional(VfsErrc::bad_fd), "double close");

  const int w = v.open("data/new.txt", "w+");
  v.write(w, bytes("abc"));
  v.seek(w, 1);
  v.write(w, bytes("Z"));
  v.close(w);
  c.equal(text(v.read_file("data/new.txt")), std::string("aZc"), "write then overwrite");
  c.equal(v.stat("data/new.txt").size, uint64_t{3}, "stat size");
  v.rename("data/new.txt", "data/renamed.txt");
  c.expect(!v.exists("data/new.txt") && v.exists("data/renamed.txt"), "rename");
  v.unlink("data/renamed.txt");
  c.equal(error_code<VfsErrc>([&] { v.stat("data/renamed.txt"); }), std::optional(VfsErrc::not_found),
          "stat after unlink");
  c.equal(error_code<VfsErrc>([&] { v.open("missing", "r"); }), std::optional(VfsErrc::not_found), "open missing");
  c.equal(v.container().image, image, "container untouched by overlay writes");

  // a guest run that writes files leaves the container file as it was
  const fs::path copy = fs::temp_directory_path() / fmt::format("pinky_acceptance_{}.pvfs", getpid());
  fs::copy_file(fx / "tree.pvfs", copy, fs::copy_options::overwrite_existing);
  std::ostringstream out;
  {
    Session s(out);
    s.init_vfs(copy);
    s.run_sample((fx / "writer.exe").string());
    c.expect(s.last_stop() && s.last_stop()->kind == StopKind::guest_exit, "writer.exe exits");
    c.equal(text(s.vfs().read_file("out.txt")), std::string("hello"), "guest-written file visible");
  }
  c.equal(host_file(copy), image, "container on disk unchanged");
  fs::remove(copy);
}

// 8
void loader(Check& c) {
  const fs::path fx = fixtures_dir();
  std::ifstream mf(fx / "manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  const auto& m = manifest["minimal.exe"];
  c.expect(m["sections"].size() == 2 && m["iat"].size() == 2, "minimal.exe has 2 sections and 2 imports");

  Vfs vfs;
  vfs.init_file(fx / "tree.pvfs");
  {
    Mmu mmu;
    Loader ld(vfs, mmu);
    Engine e(mmu);
    ld.attach(e);
    const auto image = ld.load_pe_bytes(host_file(fx / "minimal.exe"), "minimal.exe");
    c.equal(image.base, m["base"].get<uint32_t>(), "image base");
    for (const auto& [sym, va] : m["iat"].items()) {
      const uint32_t slot = mmu.read_u32(va.get<uint32_t>());
      const auto it = std::find_if(image.imports.begin(), image.imports.end(),
                                   [&](auto& r) { return r.iat_va == va.get<uint32_t>(); });
      c.expect(it != image.imports.end() && it->resolved_va == slot && slot != 0, sym + " patched");
    }
    MachineState st;
    ld.setup_process(st, image);
    const auto stop = e.run(st, st.pc);
    c.expect(stop.kind == StopKind::guest_exit && stop.code == m["exit_code"].get<uint32_t>(),
             "minimal.exe exit code: " + stop.describe());
  }
  {
    Mmu mmu;
    Loader ld(vfs, mmu);
    Engine e(mmu);
    ld.attach(e);
    MachineState st;
    ld.setup_process(st, ld.load_pe_bytes(host_file(fx / "ret.exe"), "ret.exe"));
    const auto stop = e.run(st, st.pc);
    c.expect(stop.kind == StopKind::guest_exit && stop.code == 0, "ret.exe: " + stop.describe());
  }
  auto load_error = [&](const char* name) {
    Mmu mmu;
    Loader ld(vfs, mmu);
    return error_code<LoaderErrc>([&] { ld.load_pe_bytes(host_file(fx / name), name); });
  };
  c.equal(load_error("zm.exe"), std::optional(LoaderErrc::bad_dos_magic), "BadDosMagic");
  c.equal(load_error("nosuch.exe"), std::optional(LoaderErrc::unresolved_import), "UnresolvedImport");
  c.equal(load_error("cyc.exe"), std::optional(LoaderErrc::import_cycle), "ImportCycle");
  c.equal(load_error("fixed.exe"), std::optional(LoaderErrc::fixed_base_collision), "FixedBaseCollision");
}

// 9
void probes(Check& c) {
  const auto s = measure_probe_overhead(5, 2000000);
  c.note(fmt::format("hot loop median {:.2f} ms with disabled probes, {:.2f} ms without, overhead {:+.2f}%",
                     s.with_probes_ns / 1e6, s.without_probes_ns / 1e6, 100 * s.overhead()));
  c.expect(s.overhead() <= 0.02, fmt::format("disabled-probe overhead {:.2f}% > 2%", 100 * s.overhead()));

  const auto cwd = fs::current_path();
  fs::current_path(fixtures_dir());
  std::ostringstream out;
  {
    Session session(out);
    session.init_vfs(fixtures_dir() / "tree.pvfs");
    std::istringstream script(kPingScript);
    c.equal(session.repl(script, true, true), 0, "script exit code");
  }
  fs::current_path(cwd);
  std::string trimmed;
  {
    std::istringstream in(out.str());
    for (std::string line; std::getline(in, line);) {
      line.erase(line.find_last_not_of(' ') + 1);
      trimmed += line + "\n";
    }
  }
  const std::string want = std::string(
      "> break 0x7DE9FA40\n"
      "> ping.exe\n"
      "EMULATING ping.exe\n"
      "Breakpoint 0 at 0x7DE9FA40\n"
      "> probe x86_step_mode\n"
      "> set log:ir 1\n"
      "> next\n"
      "INFO - ir - Source -> IR:\n") + kStoreListing +
      "Breakpoint 1 at 0x7DE9FA90\n"
      ">\n";
  c.equal(trimmed, want, "breakpoint/step transcript:\n" + out.str());
}

// 10
void metrics_model(Check& c) {
  using namespace metrics;
  Matrix I(Counters::kCount, Counters::kCount);
  std::vector<double> T(Counters::kCount);
  for (size_t k = 0; k < Counters::kCount; ++k) {
    I(k, k) = 1;
    T[k] = 0.25 * static_cast<double>(k + 1);
  }
  c.equal(calibrate(I, T).weights, T, "identity calibration exact");

  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> cd(1, 1000), wd(1e-9, 1e-6);
  double worst = 0, worst_residual = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix C(50, Counters::kCount);
    for (auto& x : C.data) x = std::round(cd(rng));
    std::vector<double> w(Counters::kCount), t(C.rows, 0.0);
    for (auto& x : w) x = wd(rng);
    for (size_t i = 0; i < C.rows; ++i) {
      for (size_t j = 0; j < C.cols; ++j) t[i] += C(i, j) * w[j];
    }
    const auto cal = calibrate(C, t);
    for (size_t j = 0; j < w.size(); ++j) worst = std::max(worst, std::abs(cal.weights[j] - w[j]) / w[j]);
    worst_residual = std::max(worst_residual, cal.relative_residual);
  }
  c.expect(worst <= 1e-6, fmt::format("synthetic recovery relative error {:.3g}", worst));
  c.expect(worst_residual <= 1e-10, fmt::format("consistent-system residual {:.3g}", worst_residual));
  c.note(fmt::format("worst recovery error {:.2g}, worst residual {:.2g}", worst, worst_residual));

  MetricModel model;
  model.threshold = 150;
  model.platform_speed = 50;
  c.equal(model.expected_time(), 3.0, "expected_time(150, 50/s)");

  const Program sample = loop_fixtures().back().second;
  auto capped = [&](const EngineSetup& s) {
    RunHooks hooks;
    hooks.prepare = [](Engine& e) { e.config().set("stop.threshold_metrics", 250.0); };
    const Observed o = run_emulator(sample, s, hooks);
    c.equal(o.stop.kind, StopKind::metric_threshold, "capped run stops on the metric");
    return std::pair(o.counters.blocks_executed, o.counters.instrs_interpreted);
  };
  EngineSetup interp;
  interp.backend = "none";
  const auto first = capped({});
  c.equal(capped({}), first, "two runs stop at the same counters");
  c.equal(capped(interp), first, "interpreter-only run stops at the same counters");
  c.note(fmt::format("capped sample stops at blocks_executed={} instrs_interpreted={}", first.first, first.second));
}

// 11
void fabs_escape(Check& c) {
  const std::vector<uint8_t> code = {0xD9, 0xE1, 0x0F, 0x3F, 0x00, 0x70};  // fabs; exit
  auto run = [&](double in) {
    Flat f(code, kCodeVa);
    f.engine->fpu().st(0) = in;
    const auto stop = f.engine->run(f.st, kCodeVa);
    c.equal(stop.kind, StopKind::guest_exit, "fabs run exits");
    c.equal(f.engine->counters().syscalls, uint64_t{2}, "fabs is one escape plus the exit");
    return f.engine->fpu().st(0);
  };
  c.equal(run(-2.5), 2.5, "|-2.5|");
  c.equal(run(2.5), 2.5, "|2.5|");
  const double nan = -std::nan("0x5");
  const double got = run(nan);
  uint64_t a, b;
  std::memcpy(&a, &nan, 8);
  std::memcpy(&b, &got, 8);
  c.expect(std::isnan(got) && a == b, "NaN passes through with its bits");
}

struct Criterion {
  int number;
  const char* title;
  double budget_s;
  void (*body)(Check&);
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "golden translations", 1, golden_translations},
      {2, "overlapping instructions", 1, overlap},
      {3, "differential oracle", 60, differential},
      {4, "tier/cache equivalence", 120, tier_cache_equivalence},
      {5, "self-modifying code", 1, self_modifying},
      {6, "MMU properties", 30, mmu_properties},
      {7, "VFS", 10, vfs},
      {8, "loader", 5, loader},
      {9, "probes", 60, probes},
      {10, "metrics", 30, metrics_model},
      {11, "FPU escape", 1, fabs_escape},
  };
  int failed = 0;
  for (const auto& k : criteria) {
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      k.body(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(s <= k.budget_s, fmt::format("took {:.2f} s, budget {} s", s, k.budget_s));
    for (const auto& n : c.notes()) std::cout << "  " << n << "\n";
    for (const auto& f : c.failures()) std::cout << "  failed: " << f << "\n";
    std::cout << fmt::format("{} criterion {:>2}: {} ({} checks, {:.2f} s)\n", c.ok() ? "PASS" : "FAIL", k.number,
                             k.title, c.checks(), s)
              << std::flush;
    if (!c.ok()) ++failed;
  }
  std::cout << fmt::format("{} of {} criteria passed\n", std::size(criteria) - failed, std::size(criteria));
  return failed == 0 ? 0 : 1;
}
