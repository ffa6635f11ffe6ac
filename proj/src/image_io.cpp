#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>

#include "mamt4/imaging.hpp"

namespace mamt4 {

namespace {

struct Bytes {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;
};

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

Bytes read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot read " + path.string());
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) { return Error(ErrorKind::IoError, path.string() + ": " + why); };
  auto next_token = [&]() {
    for (;;) {
      while (pos < content.size() && std::isspace(static_cast<unsigned char>(content[pos]))) ++pos;
      if (pos < content.size() && content[pos] == '#') {
        while (pos < content.size() && content[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < content.size() && !std::isspace(static_cast<unsigned char>(content[pos]))) ++pos;
    if (start == pos) throw fail("truncated PGM header");
    return content.substr(start, pos - start);
  };
  if (next_token() != "P5") throw fail("not a binary PGM (P5)");
  Bytes out;
  std::size_t maxval = 0;
  try {
    out.width = std::stoul(next_token());
    out.height = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::logic_error&) {
    throw fail("malformed PGM header");
  }
  if (maxval == 0 || maxval > 255) throw fail("only 8-bit PGM is supported");
  ++pos;  // single whitespace byte after maxval
  const std::size_t n = out.width * out.height;
  if (out.width == 0 || out.height == 0 || pos + n > content.size()) throw fail("truncated PGM data");
  out.data.assign(content.begin() + static_cast<std::ptrdiff_t>(pos),
                  content.begin() + static_cast<std::ptrdiff_t>(pos + n));
  if (maxval != 255) {
    for (auto& v : out.data) v = static_cast<std::uint8_t>(std::lround(255.0 * v / static_cast<double>(maxval)));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Bytes& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!out) throw Error(ErrorKind::IoError, "failed writing " + path.string());
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Bytes read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error(ErrorKind::IoError, "cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::IoError, "libpng init failed");
  }
  Bytes out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::IoError, "malformed PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.data.resize(out.width * out.height);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.data.data() + y * out.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::filesystem::path& path, const Bytes& img) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::IoError, "libpng init failed");
  }
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::IoError, "failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y] = const_cast<png_bytep>(img.data.data() + y * img.width);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Bytes read_bytes(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext == ".pgm") return read_pgm(path);
  if (ext == ".png") return read_png(path);
  throw Error(ErrorKind::IoError, "unsupported image extension: " + path.string());
}

void write_bytes(const std::filesystem::path& path, const Bytes& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string ext = lower_extension(path);
  if (ext == ".pgm") return write_pgm(path, img);
  if (ext == ".png") return write_png(path, img);
  throw Error(ErrorKind::IoError, "unsupported image extension: " + path.string());
}

}  // namespace

GrayImage read_image(const std::filesystem::path& path) {
  const Bytes b = read_bytes(path);
  GrayImage img(b.width, b.height);
  for (std::size_t i = 0; i < b.data.size(); ++i) img.pixels[i] = b.data[i] / 255.0;
  return img;
}

void write_image(const std::filesystem::path& path, const GrayImage& img) {
  Bytes b{img.width, img.height, std::vector<std::uint8_t>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    b.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  }
  write_bytes(path, b);
}

BreastMask read_mask(const std::filesystem::path& path) {
  const Bytes b = read_bytes(path);
  BreastMask m(b.width, b.height);
  for (std::size_t i = 0; i < b.data.size(); ++i) m.bits[i] = b.data[i] >= 128 ? 1 : 0;
  return m;
}

void write_mask(const std::filesystem::path& path, const BreastMask& mask) {
  Bytes b{mask.width, mask.height, std::vector<std::uint8_t>(mask.bits.size())};
  for (std::size_t i = 0; i < mask.bits.size(); ++i) b.data[i] = mask.bits[i] ? 255 : 0;
  write_bytes(path, b);
}

}  // namespace mamt4
