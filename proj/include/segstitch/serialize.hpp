#pragma once

#include <iosfwd>
#include <string>

#include "segstitch/tensor.hpp"

namespace segstitch {

// Tensor file format: one JSON header line {"shape":[...],"dtype":"f32"}
// terminated by '\n', followed by the raw little-endian float payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

// Raw payload helpers shared by the volume and checkpoint formats.
void write_f32_payload(std::ostream& os, const float* data, int64_t count);
void read_f32_payload(std::istream& is, float* data, int64_t count,
                      const char* what);

}  // namespace segstitch
