#include "maad/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maad {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'A', 'D'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& os, double v) {
  static_assert(sizeof(double) == 8);
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw std::runtime_error("checkpoint: " + path + ": " + msg);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(path, "truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) fail(path, "truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string read_key(std::istream& is, const std::string& path) {
  const uint32_t len = read_u32(is, path);
  if (len > (1u << 20)) fail(path, "implausible key length");
  std::string key(len, '\0');
  if (!is.read(key.data(), len)) fail(path, "truncated file");
  return key;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(path, "cannot open for writing");
  os.write(kMagic, 4);
  write_u32(os, kCheckpointVersion);
  write_u64(os, c.strings.size());
  for (const auto& [key, text] : c.strings) {
    write_u32(os, static_cast<uint32_t>(key.size()));
    os.write(key.data(), static_cast<std::streamsize>(key.size()));
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
  }
  write_u64(os, c.arrays.size());
  for (const auto& [key, data] : c.arrays) {
    write_u32(os, static_cast<uint32_t>(key.size()));
    os.write(key.data(), static_cast<std::streamsize>(key.size()));
    write_u64(os, data.size());
    for (double v : data) write_f64(os, v);
  }
  os.flush();
  if (!os) fail(path, "write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(path, "cannot open");
  char magic[4];
  if (!is.read(magic, 4)) fail(path, "truncated file");
  if (std::memcmp(magic, kMagic, 4) != 0) fail(path, "bad magic");
  const uint32_t version = read_u32(is, path);
  if (version != kCheckpointVersion) {
    fail(path, "unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  const uint64_t n_strings = read_u64(is, path);
  for (uint64_t i = 0; i < n_strings; ++i) {
    std::string key = read_key(is, path);
    const uint64_t len = read_u64(is, path);
    if (len > (1ull << 30)) fail(path, "implausible string length");
    std::string text(static_cast<size_t>(len), '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
      fail(path, "truncated file");
    }
    c.strings.emplace(std::move(key), std::move(text));
  }
  const uint64_t n_arrays = read_u64(is, path);
  for (uint64_t i = 0; i < n_arrays; ++i) {
    std::string key = read_key(is, path);
    const uint64_t numel = read_u64(is, path);
    if (numel > (1ull << 30)) fail(path, "implausible array length");
    std::vector<double> data(static_cast<size_t>(numel));
    for (auto& v : data) {
      const uint64_t bits = read_u64(is, path);
      std::memcpy(&v, &bits, 8);
    }
    c.arrays.emplace(std::move(key), std::move(data));
  }
  char extra;
  if (is.read(&extra, 1)) fail(path, "trailing bytes after payload");
  return c;
}

}  // namespace maad
