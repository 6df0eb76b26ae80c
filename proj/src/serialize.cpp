#include "segstitch/serialize.hpp"

#include <bit>
#include <fstream>

#include <json.hpp>

namespace segstitch {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

void write_f32_payload(std::ostream& os, const float* data, int64_t count) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(count * 4));
}

void read_f32_payload(std::istream& is, float* data, int64_t count,
                      const char* what) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * 4));
  if (is.gcount() != static_cast<std::streamsize>(count * 4))
    throw IoError(std::string(what) + ": truncated payload (expected " +
                  std::to_string(count * 4) + " bytes)");
}

void write_tensor(std::ostream& os, const Tensor& t) {
  nlohmann::json header;
  header["shape"] = t.shape();
  header["dtype"] = "f32";
  os << header.dump() << "\n";
  write_f32_payload(os, t.data(), t.numel());
}

Tensor read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("tensor: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("tensor: bad header: ") + e.what());
  }
  if (!header.contains("dtype") || header["dtype"] != "f32")
    throw IoError("tensor: unknown dtype " +
                  (header.contains("dtype") ? header["dtype"].dump() : "<none>"));
  Shape shape = header.at("shape").get<Shape>();
  for (int64_t d : shape)
    if (d <= 0) throw IoError("tensor: non-positive extent in header");
  Tensor t = Tensor::zeros(shape);
  read_f32_payload(is, t.data(), t.numel(), "tensor");
  return t;
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("tensor: cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw IoError("tensor: write failed for " + path);
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("tensor: cannot open " + path);
  return read_tensor(is);
}

}  // namespace segstitch
