#include "nbx/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "nbx/error.hpp"

namespace nbx {

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
}

}  // namespace

void write_nbt(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const Shape& s = image.shape();
  out << "NBT1 " << s.height << ' ' << s.width << ' ' << s.channels << '\n';
  for (double v : image.data()) {
    const auto bits = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!out) throw Error("write failed: " + path.string());
}

Image read_nbt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw ParseError(path.string() + ": missing NBT1 header");
  std::istringstream hs(header);
  std::string magic;
  Shape shape;
  if (!(hs >> magic >> shape.height >> shape.width >> shape.channels) || magic != "NBT1") {
    throw ParseError(path.string() + ": bad header '" + header + "', expected 'NBT1 h w c'");
  }
  if (shape.height <= 0 || shape.width <= 0 || shape.channels <= 0) {
    throw ParseError(path.string() + ": non-positive dimension in header");
  }
  std::vector<double> data(shape.size());
  for (double& v : data) {
    std::uint32_t bits;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
      throw ParseError(path.string() + ": truncated payload, expected " +
                       std::to_string(shape.size()) + " float32 values");
    }
    v = static_cast<double>(std::bit_cast<float>(to_le(bits)));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ParseError(path.string() + ": trailing bytes after payload");
  }
  return Image(shape, std::move(data));
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const Shape& s = image.shape();
  if (s.channels != 1 && s.channels != 3) {
    throw ShapeError("PNG export supports 1 or 3 channels, got " + std::to_string(s.channels));
  }
  std::vector<png_byte> pixels(image.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<png_byte>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(s.width);
  png.height = static_cast<png_uint_32>(s.height);
  png.format = s.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    const std::string message = png.message;
    png_image_free(&png);
    throw Error("PNG write failed for " + path.string() + ": " + message);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ParseError(path.string() + ": " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  const Shape shape{static_cast<int>(png.height), static_cast<int>(png.width), channels};
  std::vector<png_byte> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    const std::string message = png.message;
    png_image_free(&png);
    throw ParseError(path.string() + ": " + message);
  }
  std::vector<double> data(shape.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = pixels[i] / 255.0;
  return Image(shape, std::move(data));
}

Image read_image(const std::filesystem::path& path) {
  if (path.extension() == ".png") return read_png(path);
  return read_nbt(path);
}

}  // namespace nbx
