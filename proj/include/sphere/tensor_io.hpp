// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Repo-wide serialization: JSON tensors {shape, row-major data}, checkpoint
// files, CSV metric logs. Human-diffable at desk scale.

#ifndef SPHERE_TENSOR_IO_HPP
#define SPHERE_TENSOR_IO_HPP

#include <string>
#include <vector>

#include <json.hpp>

#include "sphere/common.hpp"

namespace sphere::io {

using Json = nlohmann::json;

/// {"shape": [rows, cols], "data": [... row-major ...]}
Json tensor_to_json(const Matrix& m);
Json tensor_to_json(const Vector& v);  // shape [n]
Matrix tensor_from_json(const Json& j);
Vector vector_from_json(const Json& j);

Json load_json_file(const std::string& path);
void save_json_file(const std::string& path, const Json& j, int indent = 1);

/// Versioned CSV writer: emits a "# schema" comment line, then a header row.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& schema_version,
            const std::vector<std::string>& columns);
  ~CsvWriter();

  void row(const std::vector<double>& values);
  void flush();

 private:
  std::string path_;
  std::string buffer_;
  size_t ncols_;
  bool started_ = false;
};

/// FNV-1a hash of a canonically serialized JSON value; stable across runs.
std::string config_hash(const Json& j);

}  // namespace sphere::io

#endif  // SPHERE_TENSOR_IO_HPP
