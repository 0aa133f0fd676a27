#pragma once

// Named-tensor archive.
//
//   [u64 little-endian header length][JSON header][raw little-endian payload]
//
// The header maps tensor name -> {"dtype": "F32"|"F64", "shape": [...],
// "data_offsets": [begin, end]} with offsets relative to the payload start,
// plus an optional "__metadata__" object of string -> string (safetensors
// layout).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "meshpop/error.hpp"

namespace meshpop::nn {

struct ArchiveTensor {
  std::vector<int> shape;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
};

class Archive {
 public:
  void put(const std::string& name, std::vector<int> shape, std::vector<float> data) {
    ArchiveTensor t{std::move(shape), std::move(data)};
    if (t.numel() != t.data.size()) throw ShapeError("archive tensor '" + name + "' size does not match its shape");
    if (!tensors_.count(name)) order_.push_back(name);
    tensors_[name] = std::move(t);
  }

  bool has(const std::string& name) const { return tensors_.count(name) > 0; }

  const ArchiveTensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw WeightLoadError("tensor '" + name + "' missing from archive");
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }
  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  void save(const std::filesystem::path& path) const {
    static_assert(std::endian::native == std::endian::little, "archive writer assumes a little-endian host");
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& name : order_) {
      const auto& t = tensors_.at(name);
      const std::uint64_t bytes = t.data.size() * sizeof(float);
      header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
      offset += bytes;
    }
    if (!metadata_.empty()) header["__metadata__"] = metadata_;
    std::string h = header.dump();
    while ((h.size() + 8) % 8 != 0) h.push_back(' ');
    const std::uint64_t hlen = h.size();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write " + tmp);
      out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
      out.write(h.data(), static_cast<std::streamsize>(h.size()));
      for (const auto& name : order_) {
        const auto& t = tensors_.at(name);
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
      }
      if (!out) throw IoError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open archive " + path.string());
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen > (1ULL << 30)) throw WeightLoadError(path.string() + ": bad archive header");
    std::string h(hlen, '\0');
    in.read(h.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw WeightLoadError(path.string() + ": truncated archive header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(h);
    } catch (const nlohmann::json::exception& e) {
      throw WeightLoadError(path.string() + ": " + e.what());
    }
    std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    // Payload order.
    std::vector<std::pair<std::uint64_t, std::string>> by_offset;
    Archive a;
    for (auto& [name, entry] : header.items()) {
      if (name == "__metadata__") {
        for (auto& [k, v] : entry.items()) a.metadata_[k] = v.get<std::string>();
        continue;
      }
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      by_offset.emplace_back(offsets.at(0), name);
    }
    std::sort(by_offset.begin(), by_offset.end());
    for (const auto& [begin, name] : by_offset) {
      const auto& entry = header[name];
      const std::string dtype = entry.at("dtype").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<int>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[1] > payload.size() || offsets[0] > offsets[1])
        throw WeightLoadError(path.string() + ": tensor '" + name + "' has invalid offsets");
      std::size_t numel = 1;
      for (int d : shape) numel *= static_cast<std::size_t>(d);
      const char* src = payload.data() + offsets[0];
      std::vector<float> data(numel);
      if (dtype == "F32") {
        if (offsets[1] - offsets[0] != numel * 4) throw WeightLoadError("tensor '" + name + "' byte size mismatch");
        std::memcpy(data.data(), src, numel * 4);
      } else if (dtype == "F64") {
        if (offsets[1] - offsets[0] != numel * 8) throw WeightLoadError("tensor '" + name + "' byte size mismatch");
        for (std::size_t i = 0; i < numel; ++i) {
          double v;
          std::memcpy(&v, src + i * 8, 8);
          data[i] = static_cast<float>(v);
        }
      } else {
        throw WeightLoadError("tensor '" + name + "' has unsupported dtype " + dtype);
      }
      a.put(name, shape, std::move(data));
    }
    return a;
  }

 private:
  std::map<std::string, ArchiveTensor> tensors_;
  std::vector<std::string> order_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace meshpop::nn
