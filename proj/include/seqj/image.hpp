// Image ingestion: binary PPM (P6) reading/writing, random crops and a
// synthetic band-limited image generator.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqj/rng.hpp"
#include "seqj/tensor.hpp"

namespace seqj {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class PpmHeaderReader {
 public:
  PpmHeaderReader(const std::vector<unsigned char>& bytes, std::size_t pos) : b_(bytes), pos_(pos) {}

  std::size_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) throw ImageError(std::string("ppm: malformed header, expected ") + what);
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_++] - '0');
      if (v > (1u << 24)) throw ImageError(std::string("ppm: ") + what + " out of range");
    }
    return v;
  }

  /// Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_start() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) throw ImageError("ppm: malformed header, missing raster separator");
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& b_;
  std::size_t pos_;
};

}  // namespace detail

/// Decodes a P6 image with maxval 255 into [3 x H x W] values byte / 255.
inline Tensor decode_ppm(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ImageError("ppm: wrong magic, expected P6");
  detail::PpmHeaderReader rd(bytes, 2);
  const std::size_t w = rd.number("width");
  const std::size_t h = rd.number("height");
  const std::size_t maxval = rd.number("maxval");
  if (w == 0 || h == 0) throw ImageError("ppm: zero image dimension");
  if (maxval != 255) throw ImageError("ppm: only maxval 255 is supported, got " + std::to_string(maxval));
  const std::size_t start = rd.raster_start();
  const std::size_t need = 3 * w * h;
  if (bytes.size() < start + need) {
    throw ImageError("ppm: short file, raster has " + std::to_string(bytes.size() - std::min(bytes.size(), start)) +
                     " of " + std::to_string(need) + " bytes");
  }
  Tensor img({3, h, w});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        img[ch * h * w + r * w + c] = static_cast<double>(bytes[start + 3 * (r * w + c) + ch]) / 255.0;
  return img;
}

inline Tensor load_image_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("ppm: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

/// Quantizes [3 x H x W] values in [0, 1] to a P6 byte stream.
inline std::vector<unsigned char> encode_ppm(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("encode_ppm: expected [3 x H x W], got " + shape_str(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(img[ch * h * w + r * w + c], 0.0, 1.0);
        out.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
  return out;
}

inline void save_image_ppm(const std::filesystem::path& path, const Tensor& img) {
  const std::vector<unsigned char> bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("ppm: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Uniformly placed [3 x height x width] crop.
inline Tensor random_crop(const Tensor& img, std::size_t height, std::size_t width, Prng& rng) {
  if (img.rank() != 3) throw ShapeError("random_crop: expected [C x H x W], got " + shape_str(img.shape()));
  const std::size_t ch = img.dim(0), ih = img.dim(1), iw = img.dim(2);
  if (height > ih || width > iw) {
    throw ShapeError("random_crop: " + std::to_string(height) + "x" + std::to_string(width) + " larger than " +
                     shape_str(img.shape()));
  }
  const std::size_t r0 = static_cast<std::size_t>(rng.below(ih - height + 1));
  const std::size_t c0 = static_cast<std::size_t>(rng.below(iw - width + 1));
  Tensor out({ch, height, width});
  for (std::size_t k = 0; k < ch; ++k)
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t c = 0; c < width; ++c) out[(k * height + r) * width + c] = img[(k * ih + r0 + r) * iw + c0 + c];
  return out;
}

struct SynthSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  /// Number of 2-D sinusoids summed per image.
  std::size_t components = 6;
  /// Highest spatial frequency, in cycles per image side.
  double max_frequency = 4.0;
};

/// Sum of random 2-D sinusoids with per-channel amplitudes, min-max scaled to
/// [0, 1] over the whole image.
inline Tensor synth_image(const SynthSpec& spec, Prng& rng) {
  const std::size_t h = spec.height, w = spec.width;
  Tensor img({3, h, w});
  for (std::size_t k = 0; k < spec.components; ++k) {
    const double fx = rng.uniform(-spec.max_frequency, spec.max_frequency);
    const double fy = rng.uniform(0.0, spec.max_frequency);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double amp[3];
    for (double& a : amp) a = rng.uniform(0.2, 1.0);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double s = std::sin(2.0 * std::numbers::pi * (fx * static_cast<double>(c) / static_cast<double>(w) +
                                                            fy * static_cast<double>(r) / static_cast<double>(h)) +
                                  phase);
        for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * h + r) * w + c] += amp[ch] * s;
      }
  }
  double lo = img[0], hi = img[0];
  for (double v : img.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double& v : img.data()) v = hi > lo ? (v - lo) / (hi - lo) : 0.5;
  return img;
}

inline std::vector<Tensor> synth_images(const SynthSpec& spec, std::size_t count, Prng& rng) {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth_image(spec, rng));
  return out;
}

}  // namespace seqj
