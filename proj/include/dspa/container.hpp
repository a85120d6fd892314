#pragma once

// The "DSPA" tensor container shared by SAE parameter files and activation
// traces:
//
//   "DSPA" | u32 version (1) | u64 metadata length | metadata JSON | tensor data
//
// The metadata is a JSON object. Its "tensors" member maps each tensor name to
// {"dtype": "f32", "shape": [...], "offset": bytes-from-data-start}; every
// other member is a free-form attribute (activation rule, layer tag, ...).
// All integers are little-endian, all floats IEEE-754 binary32.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dspa/binary_io.hpp"
#include "dspa/error.hpp"

namespace dspa {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

struct Container {
  nlohmann::json attributes = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorCode::kMalformedMetadata, "missing tensor \"" + name + "\"");
    return it->second;
  }
  bool has_tensor(const std::string& name) const { return tensors.count(name) != 0; }
};

inline constexpr char kContainerMagic[4] = {'D', 'S', 'P', 'A'};
inline constexpr std::uint32_t kContainerVersion = 1;

inline std::vector<char> encode_container(const Container& c) {
  require(c.attributes.is_object(), ErrorCode::kInvalidArgument, "container attributes must be a JSON object");
  require(!c.attributes.contains("tensors"), ErrorCode::kInvalidArgument, "\"tensors\" is a reserved attribute");
  nlohmann::json meta = c.attributes;
  nlohmann::json entries = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    require(t.data.size() == t.element_count(), ErrorCode::kDimensionMismatch,
            "tensor \"" + name + "\" data does not match its shape");
    entries[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", offset}};
    offset += t.data.size() * sizeof(float);
  }
  meta["tensors"] = std::move(entries);
  const std::string json = meta.dump();

  io::ByteWriter w;
  w.bytes(std::string_view(kContainerMagic, 4));
  w.uint<std::uint32_t>(kContainerVersion);
  w.uint<std::uint64_t>(json.size());
  w.bytes(json);
  for (const auto& [name, t] : c.tensors) w.f32s(t.data);
  return w.buffer();
}

inline Container decode_container(std::span<const char> bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4) != std::string_view(kContainerMagic, 4)) fail(ErrorCode::kBadMagic, "expected \"DSPA\"");
  auto version = r.uint<std::uint32_t>();
  if (version != kContainerVersion) fail(ErrorCode::kBadVersion, "container version " + std::to_string(version));
  auto meta_len = r.uint<std::uint64_t>();
  auto meta_text = r.bytes(meta_len);

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, e.what());
  }
  if (!meta.is_object() || !meta.contains("tensors") || !meta["tensors"].is_object())
    fail(ErrorCode::kMalformedMetadata, "metadata lacks a \"tensors\" object");

  Container c;
  const std::size_t data_start = r.position();
  const std::size_t data_len = r.remaining();
  try {
    for (const auto& [name, entry] : meta["tensors"].items()) {
      if (entry.at("dtype").get<std::string>() != "f32")
        fail(ErrorCode::kMalformedMetadata, "tensor \"" + name + "\" has unsupported dtype");
      Tensor t;
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      auto offset = entry.at("offset").get<std::uint64_t>();
      std::size_t count = 1;
      for (auto s : t.shape) {
        if (s != 0 && count > data_len / sizeof(float) / s)
          fail(ErrorCode::kTruncated, "tensor \"" + name + "\" extends past end of data");
        count *= s;
      }
      if (offset > data_len || count * sizeof(float) > data_len - offset)
        fail(ErrorCode::kTruncated, "tensor \"" + name + "\" extends past end of data");
      t.data.resize(count);
      r.seek(data_start + offset);
      r.f32s(t.data);
      c.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedMetadata, e.what());
  }
  meta.erase("tensors");
  c.attributes = std::move(meta);
  return c;
}

inline void write_container(const Container& c, const std::filesystem::path& path) {
  io::write_file(path, encode_container(c));
}

inline Container read_container(const std::filesystem::path& path) {
  auto bytes = io::read_file(path);
  return decode_container(bytes);
}

}  // namespace dspa
