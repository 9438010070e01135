#include "endodepth/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "endodepth/errors.hpp"

namespace endodepth {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw LoadError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw LoadError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out(static_cast<int>(img.height), static_cast<int>(img.width), 3);
  for (std::size_t i = 0; i < buffer.size(); ++i) out[i] = buffer[i] / 255.0f;
  return out;
}

void write_png_rgb8(const fs::path& path, int rows, int cols, const std::vector<std::uint8_t>& rgb) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw WriteError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw WriteError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw WriteError("PNG encode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, cols, rows, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks: output bytes depend on pixels only.
  png_write_info(png, info);
  for (int r = 0; r < rows; ++r) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(r) * cols * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_png(const fs::path& path, const Image& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw InputError("write_png: expected 1 or 3 channels");
  }
  std::vector<std::uint8_t> rgb(image.pixels() * 3);
  for (std::size_t p = 0; p < image.pixels(); ++p) {
    for (int c = 0; c < 3; ++c) {
      const float v = image[p * image.channels() + (image.channels() == 3 ? c : 0)];
      rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  }
  write_png_rgb8(path, image.rows(), image.cols(), rgb);
}

namespace {

static_assert(std::endian::native == std::endian::little, "array files assume little-endian hosts");

struct Header {
  char magic[4] = {'E', 'D', 'A', 'R'};
  std::uint16_t dtype = 0;
  std::uint16_t channels = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
};
static_assert(sizeof(Header) == 16);

template <typename T>
void write_typed(const fs::path& path, const Grid<T>& grid, ArrayDtype dtype) {
  Header h;
  h.dtype = static_cast<std::uint16_t>(dtype);
  h.channels = static_cast<std::uint16_t>(grid.channels());
  h.rows = static_cast<std::uint32_t>(grid.rows());
  h.cols = static_cast<std::uint32_t>(grid.cols());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WriteError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(&h), sizeof(h));
  out.write(reinterpret_cast<const char*>(grid.storage().data()),
            static_cast<std::streamsize>(grid.size() * sizeof(T)));
  if (!out) throw WriteError("write failed for " + path.string());
}

struct RawArray {
  Header header;
  std::vector<char> bytes;
};

RawArray read_raw(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  RawArray raw;
  in.read(reinterpret_cast<char*>(&raw.header), sizeof(Header));
  if (!in || std::memcmp(raw.header.magic, "EDAR", 4) != 0) {
    throw LoadError(path.string() + ": not an array file");
  }
  std::size_t elem = 0;
  switch (static_cast<ArrayDtype>(raw.header.dtype)) {
    case ArrayDtype::kFloat32: elem = 4; break;
    case ArrayDtype::kFloat64: elem = 8; break;
    case ArrayDtype::kUint8: elem = 1; break;
    default: throw LoadError(path.string() + ": unknown dtype code");
  }
  const std::size_t count =
      static_cast<std::size_t>(raw.header.rows) * raw.header.cols * raw.header.channels;
  raw.bytes.resize(count * elem);
  in.read(raw.bytes.data(), static_cast<std::streamsize>(raw.bytes.size()));
  if (!in) throw LoadError(path.string() + ": truncated array data");
  return raw;
}

}  // namespace

void write_array(const fs::path& path, const RealGrid& grid) {
  write_typed(path, grid, ArrayDtype::kFloat64);
}
void write_array(const fs::path& path, const Grid<float>& grid) {
  write_typed(path, grid, ArrayDtype::kFloat32);
}
void write_array(const fs::path& path, const MaskGrid& grid) {
  write_typed(path, grid, ArrayDtype::kUint8);
}

RealGrid read_array(const fs::path& path) {
  const RawArray raw = read_raw(path);
  RealGrid out(static_cast<int>(raw.header.rows), static_cast<int>(raw.header.cols),
               std::max<int>(1, raw.header.channels));
  const std::size_t n = out.size();
  switch (static_cast<ArrayDtype>(raw.header.dtype)) {
    case ArrayDtype::kFloat64:
      std::memcpy(out.storage().data(), raw.bytes.data(), n * sizeof(double));
      break;
    case ArrayDtype::kFloat32:
      for (std::size_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, raw.bytes.data() + i * 4, 4);
        out[i] = v;
      }
      break;
    case ArrayDtype::kUint8:
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::uint8_t>(raw.bytes[i]);
      break;
  }
  return out;
}

MaskGrid read_mask_array(const fs::path& path) {
  const RealGrid g = read_array(path);
  MaskGrid out(g.rows(), g.cols(), g.channels());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] != 0.0;
  return out;
}

std::vector<std::uint8_t> colorize_depth(const DepthMap& depth, double max_depth) {
  require_same_extent(depth.values, depth.valid, "colorize_depth");
  double top = max_depth;
  if (!(top > 0.0)) {
    top = 0.0;
    for (std::size_t i = 0; i < depth.values.size(); ++i) {
      if (depth.valid[i] && std::isfinite(depth.values[i])) top = std::max(top, depth.values[i]);
    }
  }
  // Sixth-order polynomial fit of viridis per channel.
  static constexpr double kCoef[3][7] = {
      {0.2777273272234177, 0.1050930431085774, -0.3308618287255563, -4.634230498983486, 6.228269936347081,
       4.776384997670288, -5.435455855934631},
      {0.005407344544966578, 1.404613529898575, 0.214847559468213, -5.799100973351585, 14.17993336680509,
       -13.74514537774601, 4.645852612178535},
      {0.3340998053353061, 1.384590162594685, 0.09509516302823659, -19.33244095627987, 56.69055260068105,
       -65.35303263337234, 26.3124352495832}};
  std::vector<std::uint8_t> rgb(depth.values.size() * 3, 0);
  for (std::size_t i = 0; i < depth.values.size(); ++i) {
    if (!depth.valid[i] || !std::isfinite(depth.values[i]) || !(top > 0.0)) continue;
    const double t = std::clamp(depth.values[i] / top, 0.0, 1.0);
    for (int ch = 0; ch < 3; ++ch) {
      double v = 0.0;
      for (int k = 6; k >= 0; --k) v = v * t + kCoef[ch][k];
      rgb[3 * i + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return rgb;
}

}  // namespace endodepth
