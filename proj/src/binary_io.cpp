#include "bsbi/binary_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace bsbi {

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

}  // namespace

BinaryWriter::BinaryWriter(const std::filesystem::path& path)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
}

void BinaryWriter::raw(const void* bytes, std::size_t n) {
  out_.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!out_) throw std::runtime_error("write failed on '" + path_.string() + "'");
}

void BinaryWriter::envelope() {
  raw(kMagic, sizeof(kMagic));
  u32(kFormatVersion);
}

void BinaryWriter::u32(std::uint32_t v) {
  v = to_little(v);
  raw(&v, sizeof(v));
}

void BinaryWriter::u64(std::uint64_t v) {
  v = to_little(v);
  raw(&v, sizeof(v));
}

void BinaryWriter::f64(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  u64(bits);
}

void BinaryWriter::f64s(const std::vector<double>& values) {
  for (double v : values) f64(v);
}

void BinaryWriter::string(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw std::runtime_error("closing '" + path_.string() + "' failed");
}

BinaryReader::BinaryReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("cannot open '" + path.string() + "'");
}

void BinaryReader::raw(void* bytes, std::size_t n) {
  in_.read(static_cast<char*>(bytes), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError("'" + path_.string() + "' is truncated");
  }
}

void BinaryReader::envelope() {
  char magic[4];
  raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw FormatError("'" + path_.string() + "': bad magic bytes (not a BSBI file)");
  }
  const std::uint32_t version = u32();
  if (version != kFormatVersion) {
    throw FormatError("'" + path_.string() + "': unsupported format version " + std::to_string(version) +
                      " (expected " + std::to_string(kFormatVersion) + ")");
  }
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  raw(&v, sizeof(v));
  return to_little(v);
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  raw(&v, sizeof(v));
  return to_little(v);
}

double BinaryReader::f64() {
  const std::uint64_t bits = u64();
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

std::vector<double> BinaryReader::f64s(std::size_t n) {
  std::vector<double> out(n);
  for (double& v : out) v = f64();
  return out;
}

std::string BinaryReader::string() {
  const std::uint32_t n = u32();
  if (n > (1u << 24)) throw FormatError("'" + path_.string() + "': implausible string length");
  std::string s(n, '\0');
  raw(s.data(), n);
  return s;
}

bool BinaryReader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

void replace_file(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out << contents;
    if (!out) throw std::runtime_error("write failed on '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace bsbi
