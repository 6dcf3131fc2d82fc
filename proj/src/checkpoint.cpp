#include "csft/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace csft {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'F', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, const std::vector<float>& v) {
  // x86 is little-endian; emit per-value through the u32 path to stay
  // byte-defined on any host.
  for (float f : v) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_u32(os, bits);
  }
}

void write_body(std::ostream& os,
                const std::vector<std::pair<std::string, Tensor>>& tensors) {
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  write_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
    std::vector<float> f(t.data().size());
    for (size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(t.data()[i]);
    write_f32(os, f);
  }
}

std::vector<CheckpointEntry> read_body(std::istream& is, const std::string& path) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint32_t version = read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  const uint32_t count = read_u32(is);
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    CheckpointEntry entry;
    const uint32_t name_len = read_u32(is);
    entry.name.resize(name_len);
    is.read(entry.name.data(), name_len);
    const uint32_t ndim = read_u32(is);
    entry.shape.resize(ndim);
    int64_t numel = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
      entry.shape[i] = static_cast<int>(read_u32(is));
      numel *= entry.shape[i];
    }
    entry.data.resize(static_cast<size_t>(numel));
    for (int64_t i = 0; i < numel; ++i) {
      const uint32_t bits = read_u32(is);
      std::memcpy(&entry.data[static_cast<size_t>(i)], &bits, 4);
    }
    if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_body(os, tensors);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  return read_body(is, path);
}

void save_checkpoint_with_header(const std::string& path, const std::string& header,
                                 const std::vector<std::pair<std::string, Tensor>>& tensors) {
  if (header.find('\n') != std::string::npos)
    throw std::invalid_argument("checkpoint header must be a single line");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os << header << '\n';
  write_body(os, tensors);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<CheckpointEntry> load_checkpoint_with_header(const std::string& path,
                                                         std::string& header_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  std::getline(is, header_out);
  if (!is) throw std::runtime_error("checkpoint: missing header line in " + path);
  return read_body(is, path);
}

void apply_checkpoint(const std::vector<CheckpointEntry>& entries,
                      const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  if (by_name.size() != entries.size())
    throw std::runtime_error("checkpoint: duplicate entry names");
  if (entries.size() != tensors.size())
    throw std::runtime_error("checkpoint: entry count does not match target model");
  for (const auto& [name, t] : tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing entry '" + name + "'");
    const CheckpointEntry& e = *it->second;
    if (e.shape != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    Tensor dst = t;
    for (size_t i = 0; i < e.data.size(); ++i)
      dst.data()[i] = static_cast<double>(e.data[i]);
  }
}

}  // namespace csft
