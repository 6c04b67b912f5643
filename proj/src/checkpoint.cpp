#include "epcl/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <iterator>

#include "epcl/error.hpp"

namespace epcl {
namespace {

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw Error(Errc::BadCheckpoint, "truncated checkpoint " + path.string());
  }
  return value;
}

std::string get_bytes(std::istream& in, std::uint64_t size, const std::filesystem::path& path) {
  std::string s(size, '\0');
  if (size > 0 && !in.read(s.data(), static_cast<std::streamsize>(size))) {
    throw Error(Errc::BadCheckpoint, "truncated checkpoint " + path.string());
  }
  return s;
}

}  // namespace

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::UnreadableFile, "cannot write " + tmp.string());
    out << kCheckpointMagic << '\n';
    const std::string header = ckpt.header.dump();
    put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.blobs.size()));
    for (const auto& [name, bytes] : ckpt.blobs) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint64_t>(out, bytes.size());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    out.flush();
    if (!out) throw Error(Errc::UnreadableFile, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::UnreadableFile, "cannot open checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw Error(Errc::BadCheckpoint, path.string() + " is not an EPCL1 checkpoint");
  CheckpointFile ckpt;
  const auto header_size = get<std::uint64_t>(in, path);
  try {
    ckpt.header = nlohmann::json::parse(get_bytes(in, header_size, path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadCheckpoint, std::string("corrupt checkpoint header: ") + e.what());
  }
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_size = get<std::uint32_t>(in, path);
    std::string name = get_bytes(in, name_size, path);
    const auto size = get<std::uint64_t>(in, path);
    ckpt.blobs.emplace(std::move(name), get_bytes(in, size, path));
  }
  return ckpt;
}

}  // namespace epcl
