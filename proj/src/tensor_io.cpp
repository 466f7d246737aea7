// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "sphere/tensor_io.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>

namespace sphere::io {

Json tensor_to_json(const Matrix& m) {
  Json j;
  j["shape"] = {m.rows(), m.cols()};
  std::vector<double> data;
  data.reserve(static_cast<size_t>(m.size()));
  for (int i = 0; i < m.rows(); ++i)
    for (int k = 0; k < m.cols(); ++k) data.push_back(m(i, k));
  j["data"] = std::move(data);
  return j;
}

Json tensor_to_json(const Vector& v) {
  Json j;
  j["shape"] = {v.size()};
  j["data"] = std::vector<double>(v.data(), v.data() + v.size());
  return j;
}

Matrix tensor_from_json(const Json& j) {
  require(j.contains("shape") && j.contains("data"), Err::format_error,
          "tensor: missing shape/data");
  auto shape = j["shape"].get<std::vector<long>>();
  const auto& data = j["data"];
  if (shape.size() == 1) {
    Matrix m(shape[0], 1);
    require(static_cast<long>(data.size()) == shape[0], Err::format_error, "tensor: size mismatch");
    for (long i = 0; i < shape[0]; ++i) m(i, 0) = data[i].get<double>();
    return m;
  }
  require(shape.size() == 2, Err::format_error, "tensor: rank must be 1 or 2");
  long rows = shape[0], cols = shape[1];
  require(static_cast<long>(data.size()) == rows * cols, Err::format_error,
          "tensor: size mismatch");
  Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long k = 0; k < cols; ++k) m(i, k) = data[i * cols + k].get<double>();
  return m;
}

Vector vector_from_json(const Json& j) {
  Matrix m = tensor_from_json(j);
  require(m.cols() == 1 || m.rows() == 1, Err::format_error, "tensor: expected a vector");
  if (m.cols() == 1) return m.col(0);
  return m.row(0).transpose();
}

Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Err::io_error, "cannot open " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail(Err::format_error, path + ": " + e.what());
  }
  return j;
}

void save_json_file(const std::string& path, const Json& j, int indent) {
  std::ofstream out(path);
  require(out.good(), Err::io_error, "cannot write " + path);
  out << j.dump(indent) << "\n";
}

CsvWriter::CsvWriter(const std::string& path, const std::string& schema_version,
                     const std::vector<std::string>& columns)
    : path_(path), ncols_(columns.size()) {
  buffer_ = "# schema: " + schema_version + "\n";
  for (size_t i = 0; i < columns.size(); ++i) {
    buffer_ += columns[i];
    buffer_ += (i + 1 < columns.size()) ? ',' : '\n';
  }
  flush();
}

CsvWriter::~CsvWriter() {
  try {
    flush();
  } catch (...) {
  }
}

void CsvWriter::row(const std::vector<double>& values) {
  require(values.size() == ncols_, Err::invalid_argument, "CsvWriter: column count mismatch");
  std::ostringstream line;
  line.precision(12);
  for (size_t i = 0; i < values.size(); ++i) {
    line << values[i];
    line << ((i + 1 < values.size()) ? ',' : '\n');
  }
  buffer_ += line.str();
  if (buffer_.size() > 1 << 16) flush();
}

void CsvWriter::flush() {
  if (buffer_.empty()) return;
  // First flush truncates any stale file; later flushes append.
  std::ofstream out(path_, started_ ? std::ios::app : std::ios::trunc);
  started_ = true;
  require(out.good(), Err::io_error, "cannot write " + path_);
  out << buffer_;
  buffer_.clear();
}

std::string config_hash(const Json& j) {
  std::string s = j.dump();  // nlohmann dumps objects with sorted keys
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace sphere::io
