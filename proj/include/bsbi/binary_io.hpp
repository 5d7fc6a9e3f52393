#pragma once

// Little-endian "BSBI" file envelope shared by dataset caches and model
// checkpoints: magic bytes "BSBI", then a u32 format version, then payload.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bsbi {

inline constexpr char kMagic[4] = {'B', 'S', 'B', 'I'};
inline constexpr std::uint32_t kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);

  void envelope();
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(const std::vector<double>& values);
  /// u32 length followed by raw bytes.
  void string(const std::string& s);
  void close();

 private:
  void raw(const void* bytes, std::size_t n);
  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);

  /// Checks magic and version; throws FormatError naming the mismatch.
  void envelope();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::vector<double> f64s(std::size_t n);
  std::string string();
  bool at_end();

 private:
  void raw(void* bytes, std::size_t n);
  std::filesystem::path path_;
  std::ifstream in_;
};

/// Writes to a sibling temporary file and renames it over `path`.
void replace_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace bsbi
