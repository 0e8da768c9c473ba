#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsct/tensor.hpp"

namespace fsct {

/// Comma-separated matrix, one row per line, full double precision.
inline void export_csv(const Tensor& matrix, const std::string& path) {
  if (matrix.rank() != 2) fail_shape("export_csv", "expected a matrix");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  const std::size_t rows = matrix.shape()[0], cols = matrix.shape()[1];
  char buf[64];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", matrix.at({r, c}));
      out << (c ? "," : "") << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline Tensor read_csv_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream row(line);
    double v;
    std::size_t count = 0;
    while (row >> v) {
      values.push_back(v);
      ++count;
    }
    if (rows == 0)
      cols = count;
    else if (count != cols)
      throw std::runtime_error("ragged CSV row in '" + path + "'");
    ++rows;
  }
  return Tensor::from({rows, cols}, std::move(values));
}

/// Plain-text PGM (P2). Values map affinely from [min, max] onto 0..255;
/// a constant matrix renders mid-gray (128).
inline void export_pgm(const Tensor& matrix, const std::string& path) {
  if (matrix.rank() != 2) fail_shape("export_pgm", "expected a matrix");
  for (double v : matrix.data())
    if (!std::isfinite(v)) throw std::invalid_argument("export_pgm: non-finite value");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  const std::size_t rows = matrix.shape()[0], cols = matrix.shape()[1];
  double lo = matrix.data()[0], hi = matrix.data()[0];
  for (double v : matrix.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  out << "P2\n" << cols << " " << rows << "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      int pixel = 128;
      if (hi > lo)
        pixel = static_cast<int>(std::lround((matrix.at({r, c}) - lo) / (hi - lo) * 255.0));
      out << (c ? " " : "") << pixel;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace fsct
