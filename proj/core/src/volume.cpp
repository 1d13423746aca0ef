#include "mixconv/volume.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mixconv {

static_assert(std::endian::native == std::endian::little,
              "volume IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', '5'};
constexpr uint8_t kVersion = 1;

template <class T>
constexpr uint8_t dtype_code() {
  return sizeof(T) == 4 ? 1 : 2;
}

void write_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::ifstream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

template <class T>
void write_vol_impl(const std::string& path, const VolumeT<T>& v) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(kMagic, 4);
    f.put(static_cast<char>(kVersion));
    f.put(static_cast<char>(dtype_code<T>()));
    write_u32(f, static_cast<uint32_t>(v.d));
    write_u32(f, static_cast<uint32_t>(v.h));
    write_u32(f, static_cast<uint32_t>(v.w));
    f.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(T)));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

template <class T>
VolumeT<T> read_vol_impl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": not a VOL5 file");
  const int version = f.get();
  if (version != kVersion)
    throw FormatError(path + ": unsupported version " + std::to_string(version));
  const int dtype = f.get();
  if (dtype != dtype_code<T>())
    throw FormatError(path + ": dtype code " + std::to_string(dtype) +
                      ", expected " + std::to_string(dtype_code<T>()));
  const uint32_t d = read_u32(f), h = read_u32(f), w = read_u32(f);
  if (!f) throw FormatError(path + ": truncated header");
  constexpr uint32_t kMaxExtent = 1u << 16;
  if (d > kMaxExtent || h > kMaxExtent || w > kMaxExtent)
    throw FormatError(path + ": implausible extents");

  VolumeT<T> v(static_cast<int>(d), static_cast<int>(h), static_cast<int>(w));
  f.read(reinterpret_cast<char*>(v.data.data()),
         static_cast<std::streamsize>(v.data.size() * sizeof(T)));
  if (static_cast<std::size_t>(f.gcount()) != v.data.size() * sizeof(T))
    throw FormatError(path + ": payload shorter than declared extents");
  f.peek();
  if (!f.eof()) throw FormatError(path + ": trailing bytes after payload");
  return v;
}

}  // namespace

void write_vol(const std::string& path, const VolumeT<float>& v) {
  write_vol_impl(path, v);
}
void write_vol(const std::string& path, const VolumeT<double>& v) {
  write_vol_impl(path, v);
}

VolumeT<float> read_vol(const std::string& path) {
  return read_vol_impl<float>(path);
}
VolumeT<double> read_vol_f64(const std::string& path) {
  return read_vol_impl<double>(path);
}

int vol_dtype(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": not a VOL5 file");
  f.get();
  const int dtype = f.get();
  if (!f) throw FormatError(path + ": truncated header");
  return dtype;
}

}  // namespace mixconv
