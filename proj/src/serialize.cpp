#include "changedet/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

constexpr std::uint32_t kMagic = 0x43445446;  // "CDTF"
constexpr std::uint32_t kVersion = 1;

using json = nlohmann::json;

void write_bytes(std::ofstream& out, const void* data, std::size_t size) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

void read_bytes(std::ifstream& in, void* data, std::size_t size, const std::filesystem::path& path) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  if (in.gcount() != static_cast<std::streamsize>(size)) {
    throw IoError("truncated tensor archive: " + path.string());
  }
}

}  // namespace

const ag::Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [key, tensor] : tensors) {
    if (key == name) return &tensor;
  }
  return nullptr;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  json header;
  header["meta"] = archive.meta_json.empty() ? json::object() : json::parse(archive.meta_json);
  header["tensors"] = json::array();
  for (const auto& [name, tensor] : archive.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", tensor.shape()}});
  }
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::uint64_t header_len = header_text.size();
  write_bytes(out, &kMagic, sizeof(kMagic));
  write_bytes(out, &kVersion, sizeof(kVersion));
  write_bytes(out, &header_len, sizeof(header_len));
  write_bytes(out, header_text.data(), header_text.size());
  for (const auto& [name, tensor] : archive.tensors) {
    write_bytes(out, tensor.data(), tensor.numel() * sizeof(float));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor archive: " + path.string());

  std::uint32_t magic = 0, version = 0;
  std::uint64_t header_len = 0;
  read_bytes(in, &magic, sizeof(magic), path);
  if (magic != kMagic) throw IoError("not a tensor archive: " + path.string());
  read_bytes(in, &version, sizeof(version), path);
  if (version != kVersion) {
    throw IoError("unsupported tensor archive version " + std::to_string(version) + ": " + path.string());
  }
  read_bytes(in, &header_len, sizeof(header_len), path);

  std::string header_text(header_len, '\0');
  read_bytes(in, header_text.data(), header_len, path);
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw IoError("corrupt archive header in " + path.string() + ": " + e.what());
  }

  TensorArchive archive;
  archive.meta_json = header.value("meta", json::object()).dump();
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    ag::Tensor tensor(std::move(shape));
    read_bytes(in, tensor.data(), tensor.numel() * sizeof(float), path);
    archive.tensors.emplace_back(name, std::move(tensor));
  }
  return archive;
}

}  // namespace changedet
