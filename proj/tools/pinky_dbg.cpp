// pinky-dbg: interactive or scripted debugger session.

#include <unistd.h>

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pinky/debugger.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pinky-dbg"};
  std::string vfs_image, script, config_file, sample;
  std::vector<std::string> sets;
  app.add_option("--vfs", vfs_image, "PVFS container image");
  app.add_option("--set", sets, "key=value setting (repeatable)");
  app.add_option("--config", config_file, "startup config file (key = value lines)");
  app.add_option("--script", script, "read commands from a file");
  app.add_option("sample", sample, "sample to run on start");
  CLI11_PARSE(app, argc, argv);

  pinky::ConfigStore config = pinky::ConfigStore::with_defaults();
  try {
    if (!config_file.empty()) config.load_file(config_file);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      config.set_from_string(pinky::normalize_config_key(kv.substr(0, eq)), kv.substr(eq + 1));
    }
  } catch (const std::exception& e) {
    std::cerr << "pinky-dbg: " << e.what() << "\n";
    return 2;
  }

  pinky::Session session(std::cout, std::move(config));
  if (!vfs_image.empty()) {
    try {
      session.init_vfs(vfs_image);
    } catch (const std::exception& e) {
      std::cerr << "pinky-dbg: " << e.what() << "\n";
      return 2;
    }
  }
  if (!sample.empty()) session.execute("run " + sample);

  if (!script.empty()) {
    std::ifstream in(script);
    if (!in) {
      std::cerr << "pinky-dbg: cannot read " << script << "\n";
      return 2;
    }
    return session.repl(in, true, true);
  }
  const bool tty = isatty(STDIN_FILENO) != 0;
  return session.repl(std::cin, !tty, !tty);
}
