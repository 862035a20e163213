#include <zlib.h>

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hat/io.hpp"

namespace hat {

namespace {

// ---- file helpers ----

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw UsageError("write failed on " + path);
}

// ---- byte order ----

std::uint32_t read_u32_be(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void put_u32_be(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

std::uint32_t read_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

// ---- byte <-> real ----

unsigned char to_byte(double v) {
  const long r = std::lround(v * 255.0);
  return static_cast<unsigned char>(r < 0 ? 0 : (r > 255 ? 255 : r));
}

// Divide rather than multiply by a reciprocal so the value matches b/255
// exactly in both precisions.
real from_byte(unsigned char b) { return static_cast<real>(b / 255.0); }

// ====== PNG ======

constexpr unsigned char kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void append_chunk(std::string& out, const char type[4], const std::string& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t crc_start = out.size();
  out.append(type, 4);
  out += data;
  const uLong crc =
      crc32(crc32(0L, Z_NULL, 0),
            reinterpret_cast<const Bytef*>(out.data() + crc_start),
            static_cast<uInt>(4 + data.size()));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

std::string zlib_deflate(const std::string& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string out(bound, '\0');
  const int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                           reinterpret_cast<const Bytef*>(raw.data()),
                           static_cast<uLong>(raw.size()), 6);
  if (rc != Z_OK) throw InternalError("zlib compression failed");
  out.resize(bound);
  return out;
}

std::string save_png_bytes(const std::vector<unsigned char>& pixels,
                           std::int64_t h, std::int64_t w,
                           std::int64_t channels) {
  std::string ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(w));
  put_u32_be(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);                               // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);           // truecolor / grayscale
  ihdr.push_back(0);                               // compression
  ihdr.push_back(0);                               // filter method
  ihdr.push_back(0);                               // no interlace

  // Every scanline uses filter type 0 (none).
  std::string raw;
  raw.reserve(static_cast<std::size_t>(h * (1 + w * channels)));
  for (std::int64_t y = 0; y < h; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(&pixels[y * w * channels]),
               static_cast<std::size_t>(w * channels));
  }

  std::string out(reinterpret_cast<const char*>(kPngSig), 8);
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", zlib_deflate(raw));
  append_chunk(out, "IEND", "");
  return out;
}

unsigned char paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<unsigned char>(a);
  if (pb <= pc) return static_cast<unsigned char>(b);
  return static_cast<unsigned char>(c);
}

// Reverses the per-scanline filtering in place; `bpp` is bytes per pixel.
void unfilter_scanlines(std::vector<unsigned char>& data, std::int64_t h,
                        std::int64_t stride, std::int64_t bpp,
                        const std::string& path) {
  std::vector<unsigned char> prev(stride, 0);
  for (std::int64_t y = 0; y < h; ++y) {
    unsigned char* row = &data[y * (stride + 1)];
    const unsigned char filter = row[0];
    unsigned char* cur = row + 1;
    switch (filter) {
      case 0:
        break;
      case 1:  // sub
        for (std::int64_t i = bpp; i < stride; ++i) cur[i] += cur[i - bpp];
        break;
      case 2:  // up
        for (std::int64_t i = 0; i < stride; ++i) cur[i] += prev[i];
        break;
      case 3:  // average
        for (std::int64_t i = 0; i < stride; ++i) {
          const int a = i >= bpp ? cur[i - bpp] : 0;
          cur[i] = static_cast<unsigned char>(cur[i] + ((a + prev[i]) >> 1));
        }
        break;
      case 4:  // paeth
        for (std::int64_t i = 0; i < stride; ++i) {
          const int a = i >= bpp ? cur[i - bpp] : 0;
          const int c = i >= bpp ? prev[i - bpp] : 0;
          cur[i] += paeth(a, prev[i], c);
        }
        break;
      default:
        throw FormatError(path + ": unknown PNG filter type " +
                          std::to_string(filter));
    }
    std::memcpy(prev.data(), cur, static_cast<std::size_t>(stride));
  }
}

Tensor load_png(const std::string& path, const std::string& raw) {
  const unsigned char* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  std::size_t pos = 8;
  std::uint32_t w = 0, h = 0;
  int channels = 0;
  bool seen_ihdr = false, seen_iend = false;
  std::string idat;
  while (!seen_iend) {
    if (pos + 8 > raw.size()) throw FormatError(path + ": truncated PNG");
    const std::uint32_t len = read_u32_be(bytes + pos);
    if (pos + 12 + len > raw.size()) {
      throw FormatError(path + ": truncated PNG chunk");
    }
    const char* type = raw.data() + pos + 4;
    const unsigned char* data = bytes + pos + 8;
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), bytes + pos + 4, 4 + len);
    if (static_cast<std::uint32_t>(crc) != read_u32_be(bytes + pos + 8 + len)) {
      throw FormatError(path + ": PNG chunk CRC mismatch");
    }
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw FormatError(path + ": bad IHDR length");
      w = read_u32_be(data);
      h = read_u32_be(data + 4);
      const int bit_depth = data[8], color = data[9], interlace = data[12];
      if (w == 0 || h == 0) throw FormatError(path + ": zero-sized PNG");
      if (bit_depth != 8) {
        throw UsageError(path + ": only 8-bit PNGs are supported (got " +
                         std::to_string(bit_depth) + "-bit)");
      }
      if (color != 0 && color != 2) {
        throw UsageError(path +
                         ": only grayscale or RGB PNGs are supported "
                         "(color type " +
                         std::to_string(color) + ")");
      }
      if (interlace != 0) {
        throw UsageError(path + ": interlaced PNGs are not supported");
      }
      channels = color == 2 ? 3 : 1;
      seen_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      if (!seen_ihdr) throw FormatError(path + ": IDAT before IHDR");
      idat.append(reinterpret_cast<const char*>(data), len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      seen_iend = true;
    }
    // Ancillary chunks (tEXt, gAMA, ...) are skipped.
    pos += 12 + len;
  }
  if (!seen_ihdr || idat.empty()) throw FormatError(path + ": no image data");

  const std::int64_t stride = static_cast<std::int64_t>(w) * channels;
  const std::int64_t expect = static_cast<std::int64_t>(h) * (stride + 1);
  std::vector<unsigned char> scan(expect);
  uLongf out_len = static_cast<uLongf>(expect);
  const int rc = uncompress(scan.data(), &out_len,
                            reinterpret_cast<const Bytef*>(idat.data()),
                            static_cast<uLong>(idat.size()));
  if (rc != Z_OK || out_len != static_cast<uLongf>(expect)) {
    throw FormatError(path + ": PNG pixel data does not decompress cleanly");
  }
  unfilter_scanlines(scan, h, stride, channels, path);

  Tensor img({3, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)});
  real* dst = img.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t y = 0; y < h; ++y) {
    const unsigned char* row = &scan[y * (stride + 1) + 1];
    for (std::int64_t x = 0; x < w; ++x) {
      if (channels == 3) {
        dst[0 * plane + y * w + x] = from_byte(row[x * 3 + 0]);
        dst[1 * plane + y * w + x] = from_byte(row[x * 3 + 1]);
        dst[2 * plane + y * w + x] = from_byte(row[x * 3 + 2]);
      } else {
        const real v = from_byte(row[x]);
        dst[0 * plane + y * w + x] = v;
        dst[1 * plane + y * w + x] = v;
        dst[2 * plane + y * w + x] = v;
      }
    }
  }
  return img;
}

// ====== PPM (P6) ======

// Reads one whitespace/comment-separated token from a PPM header.
std::string ppm_token(const std::string& raw, std::size_t& pos,
                      const std::string& path) {
  while (pos < raw.size()) {
    if (std::isspace(static_cast<unsigned char>(raw[pos]))) {
      ++pos;
    } else if (raw[pos] == '#') {
      while (pos < raw.size() && raw[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  std::size_t start = pos;
  while (pos < raw.size() &&
         !std::isspace(static_cast<unsigned char>(raw[pos]))) {
    ++pos;
  }
  if (start == pos) throw FormatError(path + ": truncated PPM header");
  return raw.substr(start, pos - start);
}

std::int64_t ppm_number(const std::string& raw, std::size_t& pos,
                        const std::string& path) {
  const std::string tok = ppm_token(raw, pos, path);
  try {
    return std::stoll(tok);
  } catch (const std::exception&) {
    throw FormatError(path + ": bad number '" + tok + "' in PPM header");
  }
}

Tensor load_ppm(const std::string& path, const std::string& raw) {
  std::size_t pos = 2;  // past "P6"
  const std::int64_t w = ppm_number(raw, pos, path);
  const std::int64_t h = ppm_number(raw, pos, path);
  const std::int64_t maxval = ppm_number(raw, pos, path);
  if (w < 1 || h < 1) throw FormatError(path + ": bad PPM dimensions");
  if (maxval != 255) {
    throw UsageError(path + ": only maxval 255 PPMs are supported (got " +
                     std::to_string(maxval) + ")");
  }
  pos += 1;  // single whitespace after maxval
  if (pos + static_cast<std::size_t>(3 * w * h) > raw.size()) {
    throw FormatError(path + ": truncated PPM pixel data");
  }
  const unsigned char* px =
      reinterpret_cast<const unsigned char*>(raw.data()) + pos;
  Tensor img({3, h, w});
  real* dst = img.data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        dst[c * h * w + y * w + x] = from_byte(px[(y * w + x) * 3 + c]);
      }
    }
  }
  return img;
}

bool has_suffix(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  for (std::size_t i = 0; i < suffix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[s.size() - suffix.size() + i])) !=
        suffix[i]) {
      return false;
    }
  }
  return true;
}

}  // namespace

Tensor load_image(const std::string& path) {
  const std::string raw = read_file(path);
  if (raw.size() >= 8 && std::memcmp(raw.data(), kPngSig, 8) == 0) {
    return load_png(path, raw);
  }
  if (raw.size() >= 2 && raw[0] == 'P' && raw[1] == '6') {
    return load_ppm(path, raw);
  }
  throw FormatError(path + ": not a PNG or binary PPM file");
}

void save_image(const Tensor& img, const std::string& path) {
  if (img.ndim() != 3 || img.dim(0) != 3) {
    throw ShapeError("save_image: expected [3, H, W], got " +
                     shape_str(img.shape()));
  }
  const std::int64_t h = img.dim(1), w = img.dim(2);
  const real* src = img.data();
  std::vector<unsigned char> pixels(3 * h * w);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) {
        pixels[(y * w + x) * 3 + c] =
            to_byte(static_cast<double>(src[c * h * w + y * w + x]));
      }
    }
  }
  if (has_suffix(path, ".png")) {
    write_file(path, save_png_bytes(pixels, h, w, 3));
  } else if (has_suffix(path, ".ppm")) {
    std::string out =
        "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    write_file(path, out);
  } else {
    throw UsageError("save_image: unsupported extension on " + path +
                     " (use .png or .ppm)");
  }
}

void save_gray_png(const Tensor& plane, const std::string& path) {
  if (plane.ndim() != 2) {
    throw ShapeError("save_gray_png: expected [H, W], got " +
                     shape_str(plane.shape()));
  }
  const std::int64_t h = plane.dim(0), w = plane.dim(1);
  const real* src = plane.data();
  std::vector<unsigned char> pixels(h * w);
  for (std::int64_t i = 0; i < h * w; ++i) {
    pixels[i] = to_byte(static_cast<double>(src[i]));
  }
  write_file(path, save_png_bytes(pixels, h, w, 1));
}

// ====== Raw attribution planes ======

void write_lam_plane(const std::string& path, const Tensor& plane) {
  if (plane.ndim() != 2) {
    throw ShapeError("write_lam_plane: expected [H, W], got " +
                     shape_str(plane.shape()));
  }
  const std::int64_t h = plane.dim(0), w = plane.dim(1);
  std::string out = "LAMP";
  put_u32_le(out, static_cast<std::uint32_t>(h));
  put_u32_le(out, static_cast<std::uint32_t>(w));
  put_u32_le(out, 0);  // reserved
  const real* src = plane.data();
  for (std::int64_t i = 0; i < h * w; ++i) {
    const float v = static_cast<float>(src[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32_le(out, bits);
  }
  write_file(path, out);
}

Tensor read_lam_plane(const std::string& path) {
  const std::string raw = read_file(path);
  if (raw.size() < 16 || raw.compare(0, 4, "LAMP") != 0) {
    throw FormatError(path + ": not a LAMP plane file");
  }
  const unsigned char* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  const std::int64_t h = read_u32_le(bytes + 4);
  const std::int64_t w = read_u32_le(bytes + 8);
  if (raw.size() != 16 + static_cast<std::size_t>(h * w) * 4) {
    throw FormatError(path + ": LAMP payload size mismatch");
  }
  Tensor plane({h, w});
  for (std::int64_t i = 0; i < h * w; ++i) {
    const std::uint32_t bits = read_u32_le(bytes + 16 + 4 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    plane.data()[i] = static_cast<real>(v);
  }
  return plane;
}

}  // namespace hat
