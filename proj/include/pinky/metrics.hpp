#pragma once

// Deterministic stopping: work counters weighted into a scalar metric.
// Weights are calibrated offline by least squares against measured
// run times.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pinky/counters.hpp"

namespace pinky::metrics {

enum class MetricsErrc { rank_deficient, dimension_mismatch, empty_corpus, parse_error };

class MetricsError : public std::runtime_error {
 public:
  MetricsError(MetricsErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  MetricsErrc code() const { return code_; }

 private:
  MetricsErrc code_;
};

/// Dense row-major matrix.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(size_t r, size_t c) { return data[r * cols + c]; }
  double operator()(size_t r, size_t c) const { return data[r * cols + c]; }
};

inline constexpr double kMaxCondition = 1e12;

struct Calibration {
  std::vector<double> weights;
  double residual_norm = 0;      // ||Cw - T||
  double relative_residual = 0;  // ||Cw - T|| / ||T||
  double condition = 0;          // 1-norm condition number of R
  std::vector<size_t> negative;  // indices of negative weights
};

/// w = argmin ||Cw - T|| by Householder QR.
Calibration calibrate(const Matrix& C, std::span<const double> T);
/// Calibrates on a subset of columns; eliminated counters get weight 0.
Calibration calibrate_columns(const Matrix& C, std::span<const double> T,
                              std::span<const size_t> columns);

double metric(std::span<const double> c, std::span<const double> w);
std::vector<double> contributions(std::span<const double> c, std::span<const double> w);
std::vector<double> as_vector(const Counters& c);

struct MetricModel {
  std::vector<double> weights = std::vector<double>(Counters::kCount, 1.0);
  double platform_speed = 0;  // metrics per second
  double threshold = 0;       // 0 disables the stop

  double metric(const Counters& c) const;
  bool should_stop(const Counters& c) const { return threshold > 0 && metric(c) >= threshold; }
  double expected_time() const;
};

/// Parses "w1,w2,...". Empty text yields unit weights.
std::vector<double> parse_weights(const std::string& text);

struct RunSample {
  double metric;
  double seconds;
};

/// Σ metric / Σ seconds over a corpus of timed runs.
double measure_platform_speed(std::span<const RunSample> corpus);

struct CalibrationData {
  std::vector<std::string> names;
  Matrix C;
  std::vector<double> T;
};

/// Header: counter names then `time_seconds`; one row per sample.
CalibrationData read_csv(std::istream& in);
void write_csv(std::ostream& out, const CalibrationData& data);
void write_weights_csv(std::ostream& out, const std::vector<std::string>& names,
                       std::span<const double> weights);

}  // namespace pinky::metrics
