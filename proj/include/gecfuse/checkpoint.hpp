#pragma once

// Checkpoint container: "GFCK" magic, a little-endian u32 header length,
// a JSON header {format_version, meta, tensors:[{name, shape, dtype,
// offset}]}, then raw little-endian scalar payloads. Tensors are stored
// sorted by name and offsets are assigned densely, so save -> load -> save
// reproduces the file bit for bit.

#include "gecfuse/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace gecfuse {

inline constexpr int kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

template <class T>
void save_checkpoint(const std::string& path, const std::map<std::string, Tensor<T>>& tensors,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["meta"] = meta;
  auto& list = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["dtype"] = dtype_name<T>();
    e["offset"] = offset;
    list.push_back(std::move(e));
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(T);
  }
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), "checkpoint: cannot open for writing: " + path);
  out.write("GFCK", 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  char lenbuf[4] = {static_cast<char>(hlen & 0xff), static_cast<char>((hlen >> 8) & 0xff),
                    static_cast<char>((hlen >> 16) & 0xff), static_cast<char>((hlen >> 24) & 0xff)};
  out.write(lenbuf, 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(T)));
  check(out.good(), "checkpoint: write failed: " + path);
}

template <class T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path,
                                                 nlohmann::json* meta_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "checkpoint: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  check(in.good() && std::memcmp(magic, "GFCK", 4) == 0, "checkpoint: bad magic: " + path);
  unsigned char lenbuf[4];
  in.read(reinterpret_cast<char*>(lenbuf), 4);
  check(in.good(), "checkpoint: truncated header length");
  const std::uint32_t hlen = static_cast<std::uint32_t>(lenbuf[0]) |
                             (static_cast<std::uint32_t>(lenbuf[1]) << 8) |
                             (static_cast<std::uint32_t>(lenbuf[2]) << 16) |
                             (static_cast<std::uint32_t>(lenbuf[3]) << 24);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  check(in.good(), "checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hs);
  check(header.at("format_version").get<int>() == kCheckpointVersion,
        "checkpoint: unsupported format version");
  if (meta_out) *meta_out = header.value("meta", nlohmann::json::object());

  const std::streampos payload_start = in.tellg();
  std::map<std::string, Tensor<T>> tensors;
  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    const std::string dtype = e.at("dtype").get<std::string>();
    check(dtype == "f32" || dtype == "f64", "checkpoint: unknown dtype " + dtype);
    const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
    auto t = Tensor<T>::zeros(shape);
    const std::size_t count = t.size();
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    if (dtype == dtype_name<T>()) {
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(count * sizeof(T)));
    } else if (dtype == "f32") {
      std::vector<float> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(count * sizeof(float)));
      for (std::size_t i = 0; i < count; ++i) t.data()[i] = static_cast<T>(buf[i]);
    } else {
      std::vector<double> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(count * sizeof(double)));
      for (std::size_t i = 0; i < count; ++i) t.data()[i] = static_cast<T>(buf[i]);
    }
    check(in.good(), "checkpoint: truncated payload for tensor " + name);
    tensors.emplace(name, std::move(t));
  }
  return tensors;
}

// FNV-1a over the whole file; used to pin frozen-model identity in headers.
std::string file_hash_hex(const std::string& path);

}  // namespace gecfuse
