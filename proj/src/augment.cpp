#include <cstddef>
#include <cstdio>

#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdlib>
#include <numbers>
#include <random>

#include "endodepth/train_eval.hpp"

namespace endodepth {

namespace photometric {

namespace {

float clip(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

template <typename F>
Image map_values(const Image& image, F f) {
  Image out = image;
  for (float& v : out.storage()) v = clip(f(static_cast<double>(v)));
  return out;
}

// Convolution with an arbitrary set of integer offsets and weights,
// replicating the border.
Image convolve(const Image& image, const std::vector<std::pair<int, int>>& offsets,
               const std::vector<double>& weights) {
  Image out(image.rows(), image.cols(), image.channels());
  const int H = image.rows(), W = image.cols();
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      for (int ch = 0; ch < image.channels(); ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < offsets.size(); ++i) {
          const int rr = std::clamp(r + offsets[i].first, 0, H - 1);
          const int cc = std::clamp(c + offsets[i].second, 0, W - 1);
          acc += weights[i] * image(rr, cc, ch);
        }
        out(r, c, ch) = clip(acc);
      }
    }
  }
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

}  // namespace

Image brightness(const Image& image, double factor) {
  return map_values(image, [=](double v) { return v * factor; });
}

Image contrast(const Image& image, double factor) {
  double mean = 0.0;
  for (float v : image.values()) mean += v;
  mean /= std::max<std::size_t>(1, image.size());
  return map_values(image, [=](double v) { return (v - mean) * factor + mean; });
}

Image gamma(const Image& image, double g) {
  return map_values(image, [=](double v) { return std::pow(v, g); });
}

Image hsv_shift(const Image& image, double hue_shift, double saturation_scale, double value_scale) {
  if (image.channels() != 3) throw InputError("hsv_shift: expected 3 channels");
  Image out = image;
  for (std::size_t p = 0; p < image.pixels(); ++p) {
    const double r = image[3 * p], g = image[3 * p + 1], b = image[3 * p + 2];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    double h = 0.0;
    if (d > 0.0) {
      if (mx == r) {
        h = std::fmod((g - b) / d, 6.0);
      } else if (mx == g) {
        h = (b - r) / d + 2.0;
      } else {
        h = (r - g) / d + 4.0;
      }
      h /= 6.0;
    }
    double s = mx > 0.0 ? d / mx : 0.0;
    double v = mx;
    h = h + hue_shift;
    h -= std::floor(h);
    s = std::clamp(s * saturation_scale, 0.0, 1.0);
    v = std::clamp(v * value_scale, 0.0, 1.0);
    const double h6 = h * 6.0;
    const int sector = static_cast<int>(std::floor(h6)) % 6;
    const double f = h6 - std::floor(h6);
    const double pp = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double rgb[3];
    switch (sector) {
      case 0: rgb[0] = v, rgb[1] = t, rgb[2] = pp; break;
      case 1: rgb[0] = q, rgb[1] = v, rgb[2] = pp; break;
      case 2: rgb[0] = pp, rgb[1] = v, rgb[2] = t; break;
      case 3: rgb[0] = pp, rgb[1] = q, rgb[2] = v; break;
      case 4: rgb[0] = t, rgb[1] = pp, rgb[2] = v; break;
      default: rgb[0] = v, rgb[1] = pp, rgb[2] = q; break;
    }
    for (int ch = 0; ch < 3; ++ch) out[3 * p + ch] = clip(rgb[ch]);
  }
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (!(sigma > 0.0)) return image;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k;
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k.push_back(std::exp(-0.5 * i * i / (sigma * sigma)));
    sum += k.back();
  }
  for (double& v : k) v /= sum;
  std::vector<std::pair<int, int>> horizontal, vertical;
  for (int i = -radius; i <= radius; ++i) {
    horizontal.emplace_back(0, i);
    vertical.emplace_back(i, 0);
  }
  return convolve(convolve(image, horizontal, k), vertical, k);
}

Image motion_blur(const Image& image, int length, double angle) {
  if (length <= 1) return image;
  std::vector<std::pair<int, int>> offsets;
  const double half = 0.5 * (length - 1);
  for (int i = 0; i < length; ++i) {
    const double t = i - half;
    offsets.emplace_back(static_cast<int>(std::lround(t * std::sin(angle))),
                         static_cast<int>(std::lround(t * std::cos(angle))));
  }
  return convolve(image, offsets, std::vector<double>(offsets.size(), 1.0 / length));
}

Image jpeg_roundtrip(const Image& image, int quality) {
  if (image.channels() != 3) throw InputError("jpeg_roundtrip: expected 3 channels");
  const int H = image.rows(), W = image.cols();
  std::vector<unsigned char> rgb(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    rgb[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
  }

  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  {
    jpeg_compress_struct c;
    JpegError err;
    c.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
      jpeg_destroy_compress(&c);
      std::free(buffer);
      throw NumericalError("jpeg_roundtrip: encoder failure");
    }
    jpeg_create_compress(&c);
    jpeg_mem_dest(&c, &buffer, &size);
    c.image_width = static_cast<JDIMENSION>(W);
    c.image_height = static_cast<JDIMENSION>(H);
    c.input_components = 3;
    c.in_color_space = JCS_RGB;
    jpeg_set_defaults(&c);
    jpeg_set_quality(&c, std::clamp(quality, 1, 100), TRUE);
    jpeg_start_compress(&c, TRUE);
    while (c.next_scanline < c.image_height) {
      JSAMPROW row = rgb.data() + static_cast<std::size_t>(c.next_scanline) * W * 3;
      jpeg_write_scanlines(&c, &row, 1);
    }
    jpeg_finish_compress(&c);
    jpeg_destroy_compress(&c);
  }

  Image out(H, W, 3);
  {
    jpeg_decompress_struct d;
    JpegError err;
    d.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
      jpeg_destroy_decompress(&d);
      std::free(buffer);
      throw NumericalError("jpeg_roundtrip: decoder failure");
    }
    jpeg_create_decompress(&d);
    jpeg_mem_src(&d, buffer, size);
    jpeg_read_header(&d, TRUE);
    d.out_color_space = JCS_RGB;
    jpeg_start_decompress(&d);
    std::vector<unsigned char> line(static_cast<std::size_t>(W) * 3);
    while (d.output_scanline < d.output_height) {
      const int r = static_cast<int>(d.output_scanline);
      JSAMPROW row = line.data();
      jpeg_read_scanlines(&d, &row, 1);
      for (int i = 0; i < W * 3; ++i) out[static_cast<std::size_t>(r) * W * 3 + i] = line[i] / 255.0f;
    }
    jpeg_finish_decompress(&d);
    jpeg_destroy_decompress(&d);
  }
  std::free(buffer);
  return out;
}

Image gaussian_noise(const Image& image, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  Image out = image;
  for (float& v : out.storage()) v = clip(v + n(rng));
  return out;
}

}  // namespace photometric

Image augment(const Image& image, std::uint64_t seed, const AugmentConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  // Parameters are drawn unconditionally so toggling one transform leaves the
  // draws of the others unchanged.
  const double p_bright = unit(rng), bright = range(0.8, 1.2);
  const double p_contrast = unit(rng), contrast = range(0.8, 1.2);
  const double p_gamma = unit(rng), gam = std::exp(range(std::log(0.8), std::log(1.25)));
  const double p_hsv = unit(rng), hue = range(-0.02, 0.02), sat = range(0.85, 1.15);
  const double p_blur = unit(rng), blur = range(0.3, 1.0);
  const double p_motion = unit(rng), angle = range(0.0, std::numbers::pi);
  const int motion_len = unit(rng) < 0.5 ? 3 : 5;
  const double p_jpeg = unit(rng);
  const int quality = 40 + static_cast<int>(unit(rng) * 55.0);
  const double p_noise = unit(rng), noise = range(0.003, 0.02);
  const std::uint64_t noise_seed = rng();

  const double p = cfg.probability;
  Image out = image;
  for (float& v : out.storage()) v = std::clamp(v, 0.0f, 1.0f);
  if (cfg.brightness && p_bright < p) out = photometric::brightness(out, bright);
  if (cfg.contrast && p_contrast < p) out = photometric::contrast(out, contrast);
  if (cfg.gamma && p_gamma < p) out = photometric::gamma(out, gam);
  if (cfg.hsv && p_hsv < p) out = photometric::hsv_shift(out, hue, sat, 1.0);
  if (cfg.gaussian_blur && p_blur < p) out = photometric::gaussian_blur(out, blur);
  if (cfg.motion_blur && p_motion < p) out = photometric::motion_blur(out, motion_len, angle);
  if (cfg.jpeg && p_jpeg < p) out = photometric::jpeg_roundtrip(out, quality);
  if (cfg.noise && p_noise < p) out = photometric::gaussian_noise(out, noise, noise_seed);
  return out;
}

}  // namespace endodepth
