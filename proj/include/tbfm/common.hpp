#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tbfm {

inline constexpr const char* kVersion = "0.3.0";

/// Dense row-major matrix; rows are samples.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Raised when inputs violate a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed or unreadable files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

/// Neumaier-compensated accumulator.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v))
      comp_ += (sum_ - t) + v;
    else
      comp_ += (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// Formats with 17 significant digits so doubles round-trip exactly.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_doubles(std::span<const double> values, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += format_double(values[i]);
  }
  return out;
}

/// Sample mean and standard deviation (n-1 normalised) of a sequence.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd out;
  out.n = xs.size();
  if (xs.empty()) return out;
  CompensatedSum s;
  for (double x : xs) s.add(x);
  out.mean = s.value() / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    CompensatedSum ss;
    for (double x : xs) ss.add((x - out.mean) * (x - out.mean));
    out.std = std::sqrt(ss.value() / static_cast<double>(xs.size() - 1));
  }
  return out;
}

}  // namespace tbfm
