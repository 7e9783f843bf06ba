#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace maad {

inline constexpr uint32_t kCheckpointVersion = 1;

// Versioned binary container: "MAAD" magic, u32 version, a string section
// (config JSON, RNG state) and a named f64 array section (parameters,
// buffers, optimizer moments, normalization stats). Everything is written
// little-endian in key order, so identical contents give identical bytes.
struct Checkpoint {
  std::map<std::string, std::string> strings;
  std::map<std::string, std::vector<double>> arrays;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace maad
