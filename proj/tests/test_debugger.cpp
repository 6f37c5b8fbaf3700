#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pinky/debugger.hpp"
#include "support/scenarios.hpp"

using namespace pinky;
namespace fs = std::filesystem;

namespace {

const std::string kPingTranscript = std::string(
    "> break 0x7DE9FA40\n"
    "> ping.exe\n"
    "EMULATING ping.exe\n"
    "Breakpoint 0 at 0x7DE9FA40\n"
    "> probe x86_step_mode\n"
    "> set log:ir 1\n"
    "> next\n"
    "INFO - ir - Source -> IR:\n") + support::kStoreListing +
    "Breakpoint 1 at 0x7DE9FA90\n"
    ">\n";

std::string trim_lines(const std::string& text) {
  std::istringstream in(text);
  std::string out;
  for (std::string line; std::getline(in, line);) {
    line.erase(line.find_last_not_of(' ') + 1);
    out += line + "\n";
  }
  return out;
}

// runs `body` with the fixture directory as cwd so samples resolve by name
template <typename F>
auto in_fixtures(F&& body) {
  const auto cwd = fs::current_path();
  fs::current_path(support::fixtures_dir());
  struct Restore {
    fs::path p;
    ~Restore() { fs::current_path(p); }
  } restore{cwd};
  return body();
}

struct Scripted {
  std::string output;
  int rc;
};

Scripted run_script(const std::string& script, bool strict = true) {
  return in_fixtures([&] {
    std::ostringstream out;
    Session s(out);
    s.init_vfs(support::fixtures_dir() / "tree.pvfs");
    std::istringstream in(script);
    const int rc = s.repl(in, true, strict);
    return Scripted{out.str(), rc};
  });
}

struct Shell {
  std::string output;
  int rc;
};

Shell shell(const std::string& cmd) {
  std::string out;
  FILE* p = popen((cmd + " 2>&1").c_str(), "r");
  if (!p) return {"popen failed", -1};
  std::array<char, 4096> buf;
  for (size_t n; (n = fread(buf.data(), 1, buf.size(), p)) > 0;) out.append(buf.data(), n);
  const int status = pclose(p);
  return {out, WIFEXITED(status) ? WEXITSTATUS(status) : -1};
}

fs::path scratch_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("pinky_dbg_test_" + name + "_" + std::to_string(getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Parse, Commands) {
  using K = Command::Kind;
  EXPECT_EQ(parse_command("").kind, K::empty);
  EXPECT_EQ(parse_command("# note").kind, K::empty);
  EXPECT_EQ(parse_command("b 0x401000").va, 0x401000u);
  EXPECT_EQ(parse_command("break 7DE9FA40").va, 0x7DE9FA40u);
  EXPECT_EQ(parse_command("d 3").number, 3);
  EXPECT_EQ(parse_command("c").kind, K::cont);
  EXPECT_EQ(parse_command("x 0x1000 32").len, 32u);
  EXPECT_EQ(parse_command("ping.exe").kind, K::run);
  EXPECT_EQ(parse_command("set log:ir 1").args, (std::vector<std::string>{"log:ir", "1"}));
  EXPECT_THROW(parse_command("cont"), std::invalid_argument);
  EXPECT_THROW(parse_command("break"), std::invalid_argument);
  EXPECT_THROW(parse_command("break zz"), std::invalid_argument);
  EXPECT_THROW(parse_command("probe x on please"), std::invalid_argument);
}

TEST(Session, PingTranscriptIsExact) {
  const auto r = run_script(support::kPingScript);
  EXPECT_EQ(r.rc, 0);
  EXPECT_EQ(trim_lines(r.output), kPingTranscript);
}

TEST(Session, StrictModeStopsOnTheFirstParseError) {
  const auto r = run_script("cont\nregs\n");
  EXPECT_EQ(r.rc, 2);
  EXPECT_EQ(r.output, "> cont\nError: unknown command 'cont'\n");

  const auto lenient = run_script("cont\nquit\n", false);
  EXPECT_EQ(lenient.rc, 0);
  EXPECT_NE(lenient.output.find("commands:"), std::string::npos);
}

TEST(Session, RunToExitAndInspect) {
  const auto r = run_script("minimal.exe\nregs\nnext\n");
  EXPECT_EQ(r.rc, 0);
  EXPECT_NE(r.output.find("Stopped: GuestExit(42)\n"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("EIP=7DD80000"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("The program is not running.\n"), std::string::npos);
}

TEST(Session, BreakpointsAreNumberedAndDeleted) {
  const auto r = run_script("b 0x7DE9FA40\nb 0x7DE9FA90\nd 0\nd 0\nping.exe\n");
  EXPECT_NE(r.output.find("Deleted breakpoint 0\n"), std::string::npos);
  EXPECT_NE(r.output.find("No breakpoint 0\n"), std::string::npos);
  EXPECT_NE(r.output.find("Breakpoint 1 at 0x7DE9FA90\n"), std::string::npos) << r.output;
  EXPECT_EQ(r.output.find("0x7DE9FA40\nBreakpoint"), std::string::npos);
}

TEST(Session, MemoryDump) {
  in_fixtures([] {
    std::ostringstream out;
    Session s(out);
    s.init_vfs(support::fixtures_dir() / "tree.pvfs");
    s.execute("break 0x7DE9FA90");
    s.execute("ping.exe");
    out.str("");
    s.execute("mem 0x7DE9FA90 7");
    EXPECT_EQ(out.str(), "7DE9FA90  C7 45 F0 FF FF FF FF\n");
    out.str("");
    s.execute("x 0x0 2");
    EXPECT_EQ(out.str(), "00000000  ?? ??\n");
    return 0;
  });
}

TEST(Session, SnapshotsAreDeterministic) {
  const auto a = scratch_dir("a"), b = scratch_dir("b");
  for (const auto& dir : {a, b}) {
    run_script("b 0x7DE9FA90\nping.exe\ndump " + dir.string() + "\n");
  }
  std::vector<std::string> names_a, names_b;
  for (auto& e : fs::directory_iterator(a)) names_a.push_back(e.path().filename().string());
  for (auto& e : fs::directory_iterator(b)) names_b.push_back(e.path().filename().string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  ASSERT_EQ(names_a, names_b);
  EXPECT_NE(std::find(names_a.begin(), names_a.end(), "registers.txt"), names_a.end());
  for (const auto& n : names_a) EXPECT_EQ(slurp(a / n), slurp(b / n)) << n;
  EXPECT_NE(slurp(a / "registers.txt").find("pc=0x7DE9FA90"), std::string::npos);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Session, ConfigErrorsAreReportedNotFatal) {
  const auto r = run_script("set log:ir high\nset nothing 1\nprobe nothing\n");
  EXPECT_EQ(r.rc, 0);
  EXPECT_NE(r.output.find("Error: 'log.ir' expects"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("Error: unknown key 'nothing'"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("Unknown probe 'nothing'"), std::string::npos) << r.output;
}

TEST(Cli, DebuggerScript) {
  const auto dir = scratch_dir("cli");
  {
    std::ofstream(dir / "ping.script") << support::kPingScript;
  }
  const auto r = shell("cd " + support::fixtures_dir().string() + " && " PINKY_DBG_BIN " --vfs tree.pvfs --script " +
                       (dir / "ping.script").string());
  EXPECT_EQ(r.rc, 0) << r.output;
  EXPECT_EQ(trim_lines(r.output), kPingTranscript);

  const auto bad = shell("echo cont | " PINKY_DBG_BIN);
  EXPECT_EQ(bad.rc, 2);
  EXPECT_NE(bad.output.find("Error: unknown command 'cont'"), std::string::npos) << bad.output;

  const auto bad_set = shell(PINKY_DBG_BIN " --set log.ir=high </dev/null");
  EXPECT_EQ(bad_set.rc, 2) << bad_set.output;
  fs::remove_all(dir);
}

TEST(Cli, PvfsPackUnpackList) {
  const auto dir = scratch_dir("pvfs");
  const auto fx = support::fixtures_dir();
  ASSERT_EQ(shell(PVFS_BIN " pack " + (fx / "vfs_tree").string() + " " + (dir / "a.pvfs").string()).rc, 0);
  EXPECT_EQ(slurp(dir / "a.pvfs"), slurp(fx / "tree.pvfs"));
  ASSERT_EQ(shell(PVFS_BIN " unpack " + (dir / "a.pvfs").string() + " " + (dir / "out").string()).rc, 0);
  ASSERT_EQ(shell(PVFS_BIN " pack " + (dir / "out").string() + " " + (dir / "b.pvfs").string()).rc, 0);
  EXPECT_EQ(slurp(dir / "b.pvfs"), slurp(fx / "tree.pvfs"));
  const auto ls = shell(PVFS_BIN " ls " + (dir / "a.pvfs").string());
  EXPECT_EQ(ls.rc, 0);
  EXPECT_NE(ls.output.find(" data/hello.txt\n"), std::string::npos) << ls.output;
  std::ofstream(dir / "junk.pvfs") << "junk";
  EXPECT_EQ(shell(PVFS_BIN " ls " + (dir / "junk.pvfs").string()).rc, 1);
  fs::remove_all(dir);
}

TEST(Cli, MetricsCalibrate) {
  const auto dir = scratch_dir("metrics");
  std::ofstream(dir / "c.csv") << "blocks_executed,syscalls,time_seconds\n1,0,2\n0,1,3\n1,1,5\n";
  const auto r = shell(METRICS_BIN " calibrate " + (dir / "c.csv").string() + " -o " + (dir / "w.csv").string());
  EXPECT_EQ(r.rc, 0) << r.output;
  std::ifstream w(dir / "w.csv");
  std::string header;
  std::getline(w, header);
  EXPECT_EQ(header, "counter,weight");
  std::map<std::string, double> got;
  for (std::string line; std::getline(w, line);) {
    const auto comma = line.find(',');
    got[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
  }
  EXPECT_NEAR(got["blocks_executed"], 2.0, 1e-12);
  EXPECT_NEAR(got["syscalls"], 3.0, 1e-12);
  std::ofstream(dir / "bad.csv") << "a,b\n";
  EXPECT_EQ(shell(METRICS_BIN " calibrate " + (dir / "bad.csv").string()).rc, 1);
  fs::remove_all(dir);
}
