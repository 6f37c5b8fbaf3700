// pinky-metrics: least-squares weight calibration from a counters CSV.

#include <fmt/format.h>

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "pinky/metrics.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pinky-metrics"};
  app.require_subcommand(1);
  std::string csv, out_file;
  std::vector<size_t> columns;
  auto* cal = app.add_subcommand("calibrate", "fit weights w minimizing ||Cw - T||");
  cal->add_option("csv", csv, "counter columns then time_seconds")->required();
  cal->add_option("-o,--output", out_file, "write counter,weight CSV");
  cal->add_option("--columns", columns, "restrict the fit to these counter columns");
  CLI11_PARSE(app, argc, argv);

  using namespace pinky::metrics;
  try {
    std::ifstream in(csv);
    if (!in) throw std::runtime_error("cannot read " + csv);
    const CalibrationData data = read_csv(in);
    const Calibration c = columns.empty() ? calibrate(data.C, data.T) : calibrate_columns(data.C, data.T, columns);
    if (out_file.empty()) {
      write_weights_csv(std::cout, data.names, c.weights);
    } else {
      std::ofstream out(out_file);
      write_weights_csv(out, data.names, c.weights);
    }
    std::cerr << fmt::format("residual {:.6g} (relative {:.6g}), condition {:.6g}\n", c.residual_norm,
                             c.relative_residual, c.condition);
    for (size_t j : c.negative) {
      std::cerr << fmt::format("warning: negative weight for {}\n",
                               j < data.names.size() ? data.names[j] : std::to_string(j));
    }
  } catch (const std::exception& e) {
    std::cerr << "pinky-metrics: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
