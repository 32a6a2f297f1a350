#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ssmd/errors.hpp"
#include "ssmd/tensor.hpp"

namespace ssmd {

/// Interleaved 8-bit image, row-major. channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
  int w = 0, h = 0, channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
};

namespace detail_png {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char type[4],
                        const std::vector<std::uint8_t>& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_u32(out, static_cast<std::uint32_t>(
                   crc32(0L, body.data(), static_cast<uInt>(body.size()))));
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail_png

inline std::vector<std::uint8_t> encode_png(const ImageU8& img) {
  using namespace detail_png;
  if (img.channels != 1 && img.channels != 3)
    throw data_error("encode_png: only 1- or 3-channel images supported");
  if (img.w <= 0 || img.h <= 0 ||
      img.pixels.size() != static_cast<std::size_t>(img.w) * img.h * img.channels)
    throw data_error("encode_png: inconsistent image buffer");

  std::vector<std::uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.w));
  put_u32(ihdr, static_cast<std::uint32_t>(img.h));
  ihdr.push_back(8);                                        // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);                // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(out, "IHDR", ihdr);

  const std::size_t row = static_cast<std::size_t>(img.w) * img.channels;
  std::vector<std::uint8_t> raw;
  raw.reserve((row + 1) * img.h);
  for (int y = 0; y < img.h; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(y * row),
               img.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * row));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw data_error("encode_png: zlib compression failed");
  compressed.resize(bound);
  write_chunk(out, "IDAT", compressed);
  write_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const std::string& path, const ImageU8& img) {
  const std::vector<std::uint8_t> bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("write_png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

inline ImageU8 decode_png(const std::vector<std::uint8_t>& bytes) {
  using namespace detail_png;
  static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw data_error("decode_png: not a PNG file");

  ImageU8 img;
  int bit_depth = 0, color_type = -1;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = get_u32(&bytes[pos]);
    if (pos + 12 + len > bytes.size()) throw data_error("decode_png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const std::uint8_t* data = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw data_error("decode_png: bad IHDR");
      img.w = static_cast<int>(get_u32(data));
      img.h = static_cast<int>(get_u32(data + 4));
      bit_depth = data[8];
      color_type = data[9];
      if (data[12] != 0) throw data_error("decode_png: interlaced PNGs unsupported");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (bit_depth != 8 || (color_type != 0 && color_type != 2))
    throw data_error("decode_png: only 8-bit gray or RGB supported");
  img.channels = color_type == 0 ? 1 : 3;
  if (img.w <= 0 || img.h <= 0) throw data_error("decode_png: bad dimensions");

  const std::size_t row = static_cast<std::size_t>(img.w) * img.channels;
  std::vector<std::uint8_t> raw((row + 1) * img.h);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw data_error("decode_png: zlib inflate failed");

  img.pixels.assign(row * img.h, 0);
  const int bpp = img.channels;
  for (int y = 0; y < img.h; ++y) {
    const std::uint8_t filter = raw[y * (row + 1)];
    const std::uint8_t* src = &raw[y * (row + 1) + 1];
    std::uint8_t* dst = &img.pixels[y * row];
    const std::uint8_t* prev = y > 0 ? &img.pixels[(y - 1) * row] : nullptr;
    for (std::size_t i = 0; i < row; ++i) {
      const int a = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
      const int b = prev ? prev[i] : 0;
      const int c = (prev && i >= static_cast<std::size_t>(bpp)) ? prev[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw data_error("decode_png: unknown filter type");
      }
      dst[i] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  return img;
}

inline ImageU8 read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("read_png: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

/// Gray image -> single-channel tensor in [0,1].
inline Tensor to_tensor(const ImageU8& img) {
  if (img.channels != 1) throw data_error("to_tensor: expected a single-channel image");
  Tensor t(1, img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) t.at(0, y, x) = img.at(y, x) / 255.0;
  return t;
}

/// Clamps to [0,1] and quantizes to 8-bit gray.
inline ImageU8 to_image_u8(const Tensor& t) {
  if (t.c != 1) throw data_error("to_image_u8: expected a single-channel tensor");
  ImageU8 img;
  img.w = t.w;
  img.h = t.h;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(t.w) * t.h);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x) {
      const double v = std::min(1.0, std::max(0.0, t.at(0, y, x)));
      img.at(y, x) = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

}  // namespace ssmd
