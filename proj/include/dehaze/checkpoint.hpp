#pragma once

// Single-file tensor archive:
//
//   bytes 0-7   magic "DHZARCH1"
//   bytes 8-15  little-endian uint64 length L of the JSON index
//   next L      JSON index {"format":1, "meta":{...},
//                           "tensors":[{"name","dtype","shape","offset","bytes"}]}
//   remainder   raw little-endian tensor data; offsets are relative to its start
//
// dtype is "f32" or "f64". Names are dotted module paths, e.g.
// g_a.block3.conv1.w_hh or d_b.layer2.w_ll_sn_u.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "dehaze/module.hpp"
#include "json.hpp"

namespace dehaze {

inline constexpr char kArchiveMagic[8] = {'D', 'H', 'Z', 'A', 'R', 'C', 'H', '1'};

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

struct Archive {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::map<std::string, StoredTensor> tensors;

  bool contains(const std::string& name) const { return tensors.count(name) > 0; }
};

template <typename T>
void write_archive(const std::filesystem::path& path, const std::vector<TensorRef<T>>& refs,
                   const nlohmann::ordered_json& meta = nlohmann::ordered_json::object()) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  nlohmann::ordered_json index{{"format", 1}, {"meta", meta}, {"tensors", nlohmann::ordered_json::array()}};
  std::uint64_t offset = 0;
  for (const auto& r : refs) {
    const std::uint64_t bytes = r.tensor->size() * sizeof(T);
    index["tensors"].push_back({{"name", r.name},
                                {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
                                {"shape", r.tensor->shape()},
                                {"offset", offset},
                                {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = index.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kArchiveMagic, 8);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& r : refs)
      out.write(reinterpret_cast<const char*>(r.tensor->data()), static_cast<std::streamsize>(r.tensor->size() * sizeof(T)));
    if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || std::memcmp(magic, kArchiveMagic, 8) != 0)
    throw ValidationError(path.string() + " is not a tensor archive");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError(path.string() + ": truncated index");
  const auto index = nlohmann::ordered_json::parse(text);
  const std::streamoff base = in.tellg();
  Archive ar;
  ar.meta = index.value("meta", nlohmann::ordered_json::object());
  for (const auto& e : index.at("tensors")) {
    StoredTensor t;
    t.shape = e.at("shape").get<Shape>();
    const std::string dtype = e.at("dtype").get<std::string>();
    const std::size_t n = shape_size(t.shape);
    const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (!width) throw ValidationError(path.string() + ": unsupported dtype " + dtype);
    if (e.at("bytes").get<std::uint64_t>() != n * width)
      throw ValidationError(path.string() + ": size mismatch for " + e.at("name").get<std::string>());
    in.seekg(base + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    t.values.resize(n);
    if (width == 4) {
      std::vector<float> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
      for (std::size_t i = 0; i < n; ++i) t.values[i] = buf[i];
    } else {
      in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * 8));
    }
    if (!in) throw ValidationError(path.string() + ": truncated data for " + e.at("name").get<std::string>());
    ar.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ar;
}

/// Copies archived values into `refs`. Every ref must be present with an identical shape.
template <typename T>
void load_into(const Archive& ar, const std::vector<TensorRef<T>>& refs, const std::string& what = "checkpoint") {
  std::vector<std::string> missing;
  for (const auto& r : refs) {
    auto it = ar.tensors.find(r.name);
    if (it == ar.tensors.end()) {
      missing.push_back(r.name);
      continue;
    }
    if (it->second.shape != r.tensor->shape())
      throw ValidationError(what + " is incompatible with the model: '" + r.name + "' has shape " +
                            shape_str(it->second.shape) + ", model expects " + shape_str(r.tensor->shape()));
  }
  if (!missing.empty())
    throw ValidationError(what + " is incompatible with the model: " + std::to_string(missing.size()) +
                          " tensors missing, first '" + missing.front() + "'");
  for (const auto& r : refs) {
    const auto& src = ar.tensors.at(r.name).values;
    for (std::size_t i = 0; i < src.size(); ++i) (*r.tensor)[i] = static_cast<T>(src[i]);
  }
}

}  // namespace dehaze
