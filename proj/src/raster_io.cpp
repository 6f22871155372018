#include "nudiff/raster_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

namespace nudiff {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return f;
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  throw std::runtime_error(std::string("png: ") + msg);
}

void png_warn_fn(png_structp, png_const_charp) {}

void begin_read(PngReader& r, FILE* f, const std::string& path) {
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw std::runtime_error("malformed PNG file '" + path + "'");
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warn_fn);
  if (!r.png) throw std::runtime_error("png: allocation failure");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw std::runtime_error("png: allocation failure");
  png_init_io(r.png, f);
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
}

}  // namespace

ImageRaster read_image(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  PngReader r;
  begin_read(r, f.get(), path);

  png_uint_32 w = png_get_image_width(r.png, r.info);
  png_uint_32 h = png_get_image_height(r.png, r.info);
  int depth = png_get_bit_depth(r.png, r.info);
  int color = png_get_color_type(r.png, r.info);
  if (depth != 8 || color != PNG_COLOR_TYPE_RGB)
    throw std::runtime_error("'" + path + "': expected 8-bit RGB PNG");

  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  ImageRaster img(static_cast<int>(h), static_cast<int>(w), 3);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(r.png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, static_cast<int>(y), static_cast<int>(x)) = row[x * 3 + c] / 127.5 - 1.0;
  }
  png_read_end(r.png, nullptr);
  return img;
}

void write_image(const ImageRaster& img, const std::string& path) {
  if (img.channels != 3) throw std::runtime_error("write_image: raster must have 3 channels");
  FilePtr f = open_file(path, "wb");
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warn_fn);
  if (!w.png) throw std::runtime_error("png: allocation failure");
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw std::runtime_error("png: allocation failure");
  png_init_io(w.png, f.get());
  png_set_IHDR(w.png, w.info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed filter and level keep output byte-deterministic.
  png_set_filter(w.png, 0, PNG_FILTER_NONE);
  png_set_compression_level(w.png, 6);
  png_write_info(w.png, w.info);

  std::vector<png_byte> row(static_cast<size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::lround((img.at(c, y, x) + 1.0) * 127.5);
        row[static_cast<size_t>(x) * 3 + c] =
            static_cast<png_byte>(v < 0 ? 0 : (v > 255 ? 255 : v));
      }
    png_write_row(w.png, row.data());
  }
  png_write_end(w.png, w.info);
}

InstanceMap read_instance(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  PngReader r;
  begin_read(r, f.get(), path);

  png_uint_32 w = png_get_image_width(r.png, r.info);
  png_uint_32 h = png_get_image_height(r.png, r.info);
  int depth = png_get_bit_depth(r.png, r.info);
  int color = png_get_color_type(r.png, r.info);
  if (depth != 16 || color != PNG_COLOR_TYPE_GRAY)
    throw std::runtime_error("'" + path + "': expected 16-bit grayscale PNG");

  std::vector<png_byte> row(static_cast<size_t>(w) * 2);
  InstanceMap inst(static_cast<int>(h), static_cast<int>(w));
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(r.png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x) {
      // PNG stores 16-bit samples big-endian.
      uint32_t v = (static_cast<uint32_t>(row[x * 2]) << 8) | row[x * 2 + 1];
      inst.at(static_cast<int>(y), static_cast<int>(x)) = v;
    }
  }
  png_read_end(r.png, nullptr);
  return inst;
}

void write_instance(const InstanceMap& inst, const std::string& path) {
  for (uint32_t v : inst.labels)
    if (v > 65535) throw std::runtime_error("write_instance: id " + std::to_string(v) + " exceeds 65535");
  FilePtr f = open_file(path, "wb");
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warn_fn);
  if (!w.png) throw std::runtime_error("png: allocation failure");
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw std::runtime_error("png: allocation failure");
  png_init_io(w.png, f.get());
  png_set_IHDR(w.png, w.info, inst.width, inst.height, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_filter(w.png, 0, PNG_FILTER_NONE);
  png_set_compression_level(w.png, 6);
  png_write_info(w.png, w.info);

  std::vector<png_byte> row(static_cast<size_t>(inst.width) * 2);
  for (int y = 0; y < inst.height; ++y) {
    for (int x = 0; x < inst.width; ++x) {
      uint32_t v = inst.at(y, x);
      row[static_cast<size_t>(x) * 2] = static_cast<png_byte>(v >> 8);
      row[static_cast<size_t>(x) * 2 + 1] = static_cast<png_byte>(v & 0xff);
    }
    png_write_row(w.png, row.data());
  }
  png_write_end(w.png, w.info);
}

namespace {

void put_u32(std::vector<unsigned char>& buf, uint32_t v) {
  buf.push_back(static_cast<unsigned char>(v));
  buf.push_back(static_cast<unsigned char>(v >> 8));
  buf.push_back(static_cast<unsigned char>(v >> 16));
  buf.push_back(static_cast<unsigned char>(v >> 24));
}

void put_f32(std::vector<unsigned char>& buf, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}

uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

float get_f32(const unsigned char* p) {
  uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

NucleiStructure read_structure(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  std::fseek(f.get(), 0, SEEK_END);
  long size = std::ftell(f.get());
  std::fseek(f.get(), 0, SEEK_SET);
  if (size < 16) throw std::runtime_error("'" + path + "': truncated NSTR file");
  std::vector<unsigned char> buf(static_cast<size_t>(size));
  if (std::fread(buf.data(), 1, buf.size(), f.get()) != buf.size())
    throw std::runtime_error("'" + path + "': read failure");
  if (std::memcmp(buf.data(), "NSTR", 4) != 0)
    throw std::runtime_error("'" + path + "': bad NSTR magic");
  uint32_t h = get_u32(buf.data() + 4);
  uint32_t w = get_u32(buf.data() + 8);
  uint32_t c = get_u32(buf.data() + 12);
  if (c != 3) throw std::runtime_error("'" + path + "': C != 3");
  size_t plane = static_cast<size_t>(h) * w;
  size_t expected = 16 + 3 * plane * 4;
  if (buf.size() != expected)
    throw std::runtime_error("'" + path + "': truncated NSTR payload");
  NucleiStructure ns(static_cast<int>(h), static_cast<int>(w));
  const unsigned char* p = buf.data() + 16;
  for (size_t i = 0; i < plane; ++i, p += 4) ns.semantic[i] = get_f32(p);
  for (size_t i = 0; i < plane; ++i, p += 4) ns.hdist[i] = get_f32(p);
  for (size_t i = 0; i < plane; ++i, p += 4) ns.vdist[i] = get_f32(p);
  return ns;
}

void write_structure(const NucleiStructure& ns, const std::string& path) {
  std::vector<unsigned char> buf;
  size_t plane = static_cast<size_t>(ns.height) * ns.width;
  buf.reserve(16 + 3 * plane * 4);
  buf.insert(buf.end(), {'N', 'S', 'T', 'R'});
  put_u32(buf, static_cast<uint32_t>(ns.height));
  put_u32(buf, static_cast<uint32_t>(ns.width));
  put_u32(buf, 3);
  for (size_t i = 0; i < plane; ++i) put_f32(buf, static_cast<float>(ns.semantic[i]));
  for (size_t i = 0; i < plane; ++i) put_f32(buf, static_cast<float>(ns.hdist[i]));
  for (size_t i = 0; i < plane; ++i) put_f32(buf, static_cast<float>(ns.vdist[i]));
  FilePtr f = open_file(path, "wb");
  if (std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
    throw std::runtime_error("cannot write '" + path + "'");
}

}  // namespace nudiff
