#pragma once

// Single-file checkpoint archive: magic, JSON metadata, raw little-endian
// doubles for every named tensor, and an FNV-1a trailer over the payload.

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aikd/tensor.hpp"

namespace aikd {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void put(const std::string& name, const Tensor& t) {
    for (auto& [n, existing] : tensors)
      if (n == name) {
        existing = t;
        return;
      }
    tensors.emplace_back(name, t);
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {
inline constexpr char kCheckpointMagic[8] = {'A', 'I', 'K', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint truncated");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) header["tensors"].push_back({{"name", name}, {"shape", t.shape}});
  const std::string text = header.dump();

  std::uint64_t digest = 1469598103934665603ULL;
  digest = fnv1a(text.data(), text.size(), digest);
  for (const auto& [name, t] : ckpt.tensors) digest = hash_tensor(t, digest);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp + " for writing");
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::write_pod(os, detail::kCheckpointVersion);
    detail::write_pod(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.tensors)
      os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    detail::write_pod(os, digest);
    if (!os) throw CheckpointError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof(detail::kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint file");
  if (detail::read_pod<std::uint32_t>(is) != detail::kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version in " + path.string());
  const auto header_len = detail::read_pod<std::uint64_t>(is);
  if (header_len > (std::uint64_t{1} << 32)) throw CheckpointError("corrupt checkpoint header length");
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw CheckpointError("checkpoint truncated in header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  std::uint64_t digest = fnv1a(text.data(), text.size());
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<std::vector<std::size_t>>());
    is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint truncated in tensor data");
    digest = hash_tensor(t, digest);
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  if (detail::read_pod<std::uint64_t>(is) != digest) throw CheckpointError("checkpoint checksum mismatch");
  return ckpt;
}

}  // namespace aikd
