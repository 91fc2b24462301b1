#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "denseloc/common.hpp"
#include "denseloc/tensor.hpp"

namespace denseloc {

// Minimal PNG codec: 8-bit RGB or grayscale, non-interlaced. The writer
// emits filter type 0 with a fixed zlib level so identical pixels produce
// identical bytes; the reader handles all five standard filters.

namespace pngdetail {

inline void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  v.push_back(static_cast<std::uint8_t>(x >> 24));
  v.push_back(static_cast<std::uint8_t>(x >> 16));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
  v.push_back(static_cast<std::uint8_t>(x));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void append_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::uint8_t* data,
                         std::size_t len) {
  put_u32(out, static_cast<std::uint32_t>(len));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  if (len > 0) out.insert(out.end(), data, data + len);
  const auto crc =
      crc32(0, reinterpret_cast<const Bytef*>(out.data() + start), static_cast<uInt>(4 + len));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

inline std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

}  // namespace pngdetail

// Encodes interleaved 8-bit samples (row-major, `channels` = 1 or 3).
inline std::vector<std::uint8_t> encode_png(const std::uint8_t* pixels, int width, int height, int channels) {
  if (width <= 0 || height <= 0) throw IoError("png: non-positive dimensions");
  if (channels != 1 && channels != 3) throw IoError("png: only 1 or 3 channels supported");
  const std::size_t row_bytes = static_cast<std::size_t>(width) * channels;
  std::vector<std::uint8_t> raw;
  raw.reserve((row_bytes + 1) * height);
  for (int i = 0; i < height; ++i) {
    raw.push_back(0);  // filter type 0
    raw.insert(raw.end(), pixels + i * row_bytes, pixels + (i + 1) * row_bytes);
  }
  uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_cap);
  if (compress2(comp.data(), &comp_cap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: deflate failed");
  comp.resize(comp_cap);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  pngdetail::put_u32(ihdr, static_cast<std::uint32_t>(width));
  pngdetail::put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                                // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);            // color type
  ihdr.push_back(0);                                // compression
  ihdr.push_back(0);                                // filter method
  ihdr.push_back(0);                                // no interlace
  pngdetail::append_chunk(out, "IHDR", ihdr.data(), ihdr.size());
  pngdetail::append_chunk(out, "IDAT", comp.data(), comp.size());
  pngdetail::append_chunk(out, "IEND", nullptr, 0);
  return out;
}

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved
};

inline PngImage decode_png(const std::uint8_t* bytes, std::size_t len) {
  static const std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (len < 8 || std::memcmp(bytes, kSig, 8) != 0) throw IoError("png: bad signature");
  std::size_t pos = 8;
  PngImage img;
  int bit_depth = 0, color_type = 0;
  std::vector<std::uint8_t> idat;
  bool saw_end = false;
  while (pos + 8 <= len) {
    const std::uint32_t chunk_len = pngdetail::get_u32(bytes + pos);
    if (pos + 12 + chunk_len > len) throw IoError("png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes + pos + 4);
    const std::uint8_t* data = bytes + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (chunk_len != 13) throw IoError("png: bad IHDR");
      img.width = static_cast<int>(pngdetail::get_u32(data));
      img.height = static_cast<int>(pngdetail::get_u32(data + 4));
      bit_depth = data[8];
      color_type = data[9];
      if (data[12] != 0) throw IoError("png: interlaced images not supported");
      if (bit_depth != 8 || (color_type != 0 && color_type != 2))
        throw IoError("png: only 8-bit grayscale or rgb supported");
      img.channels = color_type == 2 ? 3 : 1;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + chunk_len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
      break;
    }
    pos += 12 + chunk_len;
  }
  if (img.width <= 0 || img.height <= 0 || !saw_end || idat.empty()) throw IoError("png: malformed stream");

  const std::size_t row_bytes = static_cast<std::size_t>(img.width) * img.channels;
  const std::size_t raw_len = (row_bytes + 1) * img.height;
  std::vector<std::uint8_t> raw(raw_len);
  uLongf dst_len = static_cast<uLongf>(raw_len);
  if (uncompress(raw.data(), &dst_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      dst_len != raw_len)
    throw IoError("png: inflate failed");

  img.pixels.assign(row_bytes * img.height, 0);
  const int bpp = img.channels;
  for (int i = 0; i < img.height; ++i) {
    const std::uint8_t filter = raw[i * (row_bytes + 1)];
    const std::uint8_t* src = raw.data() + i * (row_bytes + 1) + 1;
    std::uint8_t* cur = img.pixels.data() + i * row_bytes;
    const std::uint8_t* prev = i > 0 ? img.pixels.data() + (i - 1) * row_bytes : nullptr;
    for (std::size_t x = 0; x < row_bytes; ++x) {
      const int a = x >= static_cast<std::size_t>(bpp) ? cur[x - bpp] : 0;
      const int b = prev != nullptr ? prev[x] : 0;
      const int c = (prev != nullptr && x >= static_cast<std::size_t>(bpp)) ? prev[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += pngdetail::paeth(a, b, c); break;
        default: throw IoError("png: unknown filter type");
      }
      cur[x] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const std::uint8_t* pixels, int width, int height,
                      int channels) {
  const auto bytes = encode_png(pixels, width, height, channels);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path.string());
}

inline PngImage read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IoError("empty file " + path.string());
  try {
    return decode_png(bytes.data(), bytes.size());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// Values are clamped to [0, 1] then quantized with round-to-nearest.
inline void save_image(const std::filesystem::path& path, const Tensor3& img) {
  std::vector<std::uint8_t> px(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double v = std::clamp(img.data[i], 0.0, 1.0);
    px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_png(path, px.data(), img.w, img.h, img.c);
}

// Loads a PNG as a float tensor in [0, 1]; grayscale is replicated to 3
// channels so every image presents the same interface.
inline ImageTensor load_image(const std::filesystem::path& path, const std::string& id) {
  const PngImage png = read_png(path);
  ImageTensor out;
  out.id = id;
  out.data = Tensor3(png.height, png.width, 3);
  constexpr double kInv = 1.0 / 255.0;
  for (int i = 0; i < png.height; ++i)
    for (int j = 0; j < png.width; ++j)
      for (int k = 0; k < 3; ++k) {
        const int src_k = png.channels == 3 ? k : 0;
        out.data.at(i, j, k) = png.pixels[(static_cast<std::size_t>(i) * png.width + j) * png.channels + src_k] * kInv;
      }
  return out;
}

}  // namespace denseloc
