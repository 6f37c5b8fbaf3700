#include "pinky/metrics.hpp"

#include <fmt/format.h>

#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace pinky::metrics {

namespace {

double norm2(std::span<const double> v) {
  double scale = 0, ssq = 1;
  for (double x : v) {
    if (x == 0) continue;
    const double a = std::fabs(x);
    if (scale < a) {
      ssq = 1 + ssq * (scale / a) * (scale / a);
      scale = a;
    } else {
      ssq += (a / scale) * (a / scale);
    }
  }
  return scale * std::sqrt(ssq);
}

// ||R||_1 * ||R^-1||_1 for upper-triangular R (n×n, leading block of A).
double condition_1(const Matrix& A, size_t n) {
  double norm_r = 0;
  for (size_t j = 0; j < n; ++j) {
    double s = 0;
    for (size_t i = 0; i <= j; ++i) s += std::fabs(A(i, j));
    norm_r = std::max(norm_r, s);
  }
  double norm_inv = 0;
  std::vector<double> x(n);
  for (size_t k = 0; k < n; ++k) {
    // column k of R^-1: solve R x = e_k
    for (size_t ii = n; ii-- > 0;) {
      double s = ii == k ? 1.0 : 0.0;
      for (size_t j = ii + 1; j < n; ++j) s -= A(ii, j) * x[j];
      if (A(ii, ii) == 0) return INFINITY;
      x[ii] = s / A(ii, ii);
    }
    double col = 0;
    for (double v : x) col += std::fabs(v);
    norm_inv = std::max(norm_inv, col);
  }
  return norm_r * norm_inv;
}

}  // namespace

Calibration calibrate(const Matrix& C, std::span<const double> T) {
  const size_t m = C.rows, n = C.cols;
  if (T.size() != m) {
    throw MetricsError(MetricsErrc::dimension_mismatch,
                       fmt::format("{} rows in C but {} times", m, T.size()));
  }
  if (n == 0 || m < n) {
    throw MetricsError(MetricsErrc::dimension_mismatch,
                       fmt::format("need at least as many samples as counters ({} < {})", m, n));
  }
  Matrix A = C;
  std::vector<double> b(T.begin(), T.end());
  std::vector<double> v(m);

  for (size_t k = 0; k < n; ++k) {
    double alpha = 0;
    {
      double scale = 0, ssq = 1;
      for (size_t i = k; i < m; ++i) {
        const double a = std::fabs(A(i, k));
        if (a == 0) continue;
        if (scale < a) {
          ssq = 1 + ssq * (scale / a) * (scale / a);
          scale = a;
        } else {
          ssq += (a / scale) * (a / scale);
        }
      }
      alpha = scale * std::sqrt(ssq);
    }
    if (alpha == 0) continue;  // zero column; caught by the condition check
    if (A(k, k) > 0) alpha = -alpha;
    // v = x - alpha e1, reflect with H = I - 2 v v^T / v^T v
    for (size_t i = k; i < m; ++i) v[i] = A(i, k);
    v[k] -= alpha;
    double vtv = 0;
    for (size_t i = k; i < m; ++i) vtv += v[i] * v[i];
    if (vtv == 0) continue;
    for (size_t j = k; j < n; ++j) {
      double dot = 0;
      for (size_t i = k; i < m; ++i) dot += v[i] * A(i, j);
      const double f = 2 * dot / vtv;
      for (size_t i = k; i < m; ++i) A(i, j) -= f * v[i];
    }
    double dot = 0;
    for (size_t i = k; i < m; ++i) dot += v[i] * b[i];
    const double f = 2 * dot / vtv;
    for (size_t i = k; i < m; ++i) b[i] -= f * v[i];
  }

  Calibration out;
  out.condition = condition_1(A, n);
  if (!(out.condition <= kMaxCondition)) {
    throw MetricsError(MetricsErrc::rank_deficient,
                       fmt::format("counter matrix is rank deficient (condition {:.3g})", out.condition));
  }
  out.weights.assign(n, 0.0);
  for (size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (size_t j = ii + 1; j < n; ++j) s -= A(ii, j) * out.weights[j];
    out.weights[ii] = s / A(ii, ii);
  }

  std::vector<double> r(m);
  for (size_t i = 0; i < m; ++i) {
    double s = 0;
    for (size_t j = 0; j < n; ++j) s += C(i, j) * out.weights[j];
    r[i] = s - T[i];
  }
  out.residual_norm = norm2(r);
  const double tn = norm2(T);
  out.relative_residual = tn > 0 ? out.residual_norm / tn : out.residual_norm;
  for (size_t j = 0; j < n; ++j) {
    if (out.weights[j] < 0) out.negative.push_back(j);
  }
  return out;
}

Calibration calibrate_columns(const Matrix& C, std::span<const double> T,
                              std::span<const size_t> columns) {
  Matrix sub(C.rows, columns.size());
  for (size_t j = 0; j < columns.size(); ++j) {
    if (columns[j] >= C.cols) {
      throw MetricsError(MetricsErrc::dimension_mismatch,
                         fmt::format("column {} out of range", columns[j]));
    }
    for (size_t i = 0; i < C.rows; ++i) sub(i, j) = C(i, columns[j]);
  }
  Calibration part = calibrate(sub, T);
  Calibration out = part;
  out.weights.assign(C.cols, 0.0);
  out.negative.clear();
  for (size_t j = 0; j < columns.size(); ++j) {
    out.weights[columns[j]] = part.weights[j];
    if (part.weights[j] < 0) out.negative.push_back(columns[j]);
  }
  return out;
}

double metric(std::span<const double> c, std::span<const double> w) {
  if (c.size() != w.size()) {
    throw MetricsError(MetricsErrc::dimension_mismatch,
                       fmt::format("{} counters but {} weights", c.size(), w.size()));
  }
  double s = 0;
  for (size_t i = 0; i < c.size(); ++i) s += c[i] * w[i];
  return s;
}

std::vector<double> contributions(std::span<const double> c, std::span<const double> w) {
  if (c.size() != w.size()) {
    throw MetricsError(MetricsErrc::dimension_mismatch,
                       fmt::format("{} counters but {} weights", c.size(), w.size()));
  }
  std::vector<double> out(c.size());
  for (size_t i = 0; i < c.size(); ++i) out[i] = c[i] * w[i];
  return out;
}

std::vector<double> as_vector(const Counters& c) {
  const auto v = c.values();
  return {v.begin(), v.end()};
}

double MetricModel::metric(const Counters& c) const {
  const auto v = c.values();
  if (weights.size() != v.size()) {
    throw MetricsError(MetricsErrc::dimension_mismatch,
                       fmt::format("{} counters but {} weights", v.size(), weights.size()));
  }
  double s = 0;
  for (size_t i = 0; i < v.size(); ++i) s += static_cast<double>(v[i]) * weights[i];
  return s;
}

double MetricModel::expected_time() const {
  return platform_speed > 0 ? threshold / platform_speed : INFINITY;
}

std::vector<double> parse_weights(const std::string& text) {
  if (text.find_first_not_of(" \t") == std::string::npos) {
    return std::vector<double>(Counters::kCount, 1.0);
  }
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw MetricsError(MetricsErrc::parse_error, "bad weight '" + item + "'");
    }
  }
  if (out.size() != Counters::kCount) {
    throw MetricsError(MetricsErrc::dimension_mismatch,
                       fmt::format("expected {} weights, got {}", Counters::kCount, out.size()));
  }
  return out;
}

double measure_platform_speed(std::span<const RunSample> corpus) {
  if (corpus.empty()) throw MetricsError(MetricsErrc::empty_corpus, "empty corpus");
  double m = 0, s = 0;
  for (const auto& r : corpus) {
    m += r.metric;
    s += r.seconds;
  }
  if (!(s > 0)) throw MetricsError(MetricsErrc::empty_corpus, "corpus has no measured time");
  return m / s;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto a = cell.find_first_not_of(" \t\r");
    const auto b = cell.find_last_not_of(" \t\r");
    out.push_back(a == std::string::npos ? std::string() : cell.substr(a, b - a + 1));
  }
  return out;
}

}  // namespace

CalibrationData read_csv(std::istream& in) {
  CalibrationData d;
  std::string line;
  if (!std::getline(in, line)) throw MetricsError(MetricsErrc::parse_error, "missing header");
  auto header = split_csv(line);
  if (header.size() < 2 || header.back() != "time_seconds") {
    throw MetricsError(MetricsErrc::parse_error, "header must end with time_seconds");
  }
  header.pop_back();
  d.names = header;
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size() + 1) {
      throw MetricsError(MetricsErrc::parse_error, fmt::format("line {}: expected {} cells", lineno,
                                                               header.size() + 1));
    }
    std::vector<double> row;
    for (const auto& c : cells) {
      try {
        row.push_back(std::stod(c));
      } catch (const std::logic_error&) {
        throw MetricsError(MetricsErrc::parse_error, fmt::format("line {}: bad number '{}'", lineno, c));
      }
    }
    rows.push_back(std::move(row));
  }
  d.C = Matrix(rows.size(), header.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = 0; j < header.size(); ++j) d.C(i, j) = rows[i][j];
    d.T.push_back(rows[i].back());
  }
  return d;
}

void write_csv(std::ostream& out, const CalibrationData& d) {
  for (const auto& n : d.names) out << n << ',';
  out << "time_seconds\n";
  for (size_t i = 0; i < d.C.rows; ++i) {
    for (size_t j = 0; j < d.C.cols; ++j) out << fmt::format("{},", d.C(i, j));
    out << fmt::format("{}\n", d.T[i]);
  }
}

void write_weights_csv(std::ostream& out, const std::vector<std::string>& names,
                       std::span<const double> weights) {
  out << "counter,weight\n";
  for (size_t i = 0; i < weights.size(); ++i) {
    out << fmt::format("{},{}\n", i < names.size() ? names[i] : fmt::format("c{}", i), weights[i]);
  }
}

}  // namespace pinky::metrics
