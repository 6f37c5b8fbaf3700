// pvfs: pack, unpack and list PVFS container images.

#include <fmt/format.h>

#include <iostream>

#include "CLI11.hpp"
#include "pinky/vfs.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pvfs"};
  app.require_subcommand(1);
  std::string dir, image;
  bool windows = false;

  auto* pack = app.add_subcommand("pack", "pack a directory into an image");
  pack->add_option("dir", dir)->required();
  pack->add_option("image", image)->required();
  pack->add_flag("--windows", windows, "case-insensitive paths (Windows profile)");

  auto* unpack = app.add_subcommand("unpack", "extract an image into a directory");
  unpack->add_option("image", image)->required();
  unpack->add_option("dir", dir)->required();

  auto* ls = app.add_subcommand("ls", "list entries");
  ls->add_option("image", image)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pack) {
      auto bytes = pinky::pvfs::pack(dir);
      if (windows) {
        auto c = pinky::pvfs::parse(std::move(bytes));
        std::vector<pinky::pvfs::FileSpec> files;
        bool has_root = false;
        for (const auto& e : c.entries) {
          const auto d = c.data(e);
          pinky::pvfs::FileSpec f{e.path, {d.begin(), d.end()}, e.attributes, e.mode};
          if (e.path.empty()) {
            f.attributes |= pinky::pvfs::kAttrWindowsProfile;
            has_root = true;
          }
          files.push_back(std::move(f));
        }
        if (!has_root) files.push_back({"", {}, pinky::pvfs::kAttrWindowsProfile, 0755});
        bytes = pinky::pvfs::build(std::move(files));
      }
      pinky::pvfs::write_image(image, bytes);
    } else if (*unpack) {
      pinky::pvfs::unpack(pinky::pvfs::parse(pinky::pvfs::read_image(image)), dir);
    } else if (*ls) {
      const auto c = pinky::pvfs::parse(pinky::pvfs::read_image(image));
      for (const auto& e : c.entries) {
        std::cout << fmt::format("{:08x} {:04o} {:>10} {}\n", e.attributes, e.mode, e.size,
                                 e.path.empty() ? "/" : e.path);
      }
    }
  } catch (const pinky::VfsError& e) {
    std::cerr << "pvfs: " << pinky::vfs_errc_name(e.code()) << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
