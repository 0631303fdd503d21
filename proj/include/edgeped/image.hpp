#pragma once

// Binary PPM (P6, maxval 255) decoding and bilinear resize into the model's
// NCHW input tensor.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "edgeped/error.hpp"
#include "edgeped/tensor.hpp"

namespace edgeped {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch) const noexcept {
    return rgb[(y * width + x) * 3 + ch];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

inline Image decode_ppm(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> InputError { return InputError(name + ": " + why); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw fail(std::string(what) + " is too large");
    }
    if (digits == 0) throw fail(std::string("missing ") + what);
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw fail("not a binary PPM (missing P6 magic)");
  pos = 2;
  Image img;
  img.width = number("width");
  img.height = number("height");
  const auto maxval = number("maxval");
  if (maxval != 255) throw fail("only maxval 255 is supported, got " + std::to_string(maxval));
  if (img.width == 0 || img.height == 0) throw fail("image has zero size");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("missing whitespace after maxval");
  ++pos;
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() - pos < need)
    throw fail("pixel data truncated: need " + std::to_string(need) + " bytes, have " + std::to_string(bytes.size() - pos));
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError(path + ": cannot open");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes, path);
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline void write_ppm(const std::string& path, const Image& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError(path + ": cannot create");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

struct Tap {
  std::size_t lo = 0, hi = 0;
  float frac = 0;
};

// Half-pixel-centre sampling positions, clamped at the borders.
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const float scale = static_cast<float>(in) / static_cast<float>(out);
  for (std::size_t i = 0; i < out; ++i) {
    float src = (static_cast<float>(i) + 0.5f) * scale - 0.5f;
    src = std::clamp(src, 0.0f, static_cast<float>(in - 1));
    const auto lo = static_cast<std::size_t>(src);
    taps[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<float>(lo)};
  }
  return taps;
}

}  // namespace detail

// Bilinear resize to size x size, RGB planes, values scaled to [0, 1].
inline Tensor preprocess(const Image& img, std::size_t size) {
  if (img.width == 0 || img.height == 0 || img.rgb.size() != img.width * img.height * 3)
    throw InputError("preprocess: image buffer does not match its dimensions");
  const auto xs = detail::bilinear_taps(img.width, size);
  const auto ys = detail::bilinear_taps(img.height, size);
  Tensor out(1, 3, size, size);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < size; ++y) {
      const auto& ty = ys[y];
      for (std::size_t x = 0; x < size; ++x) {
        const auto& tx = xs[x];
        const float p00 = img.at(tx.lo, ty.lo, ch), p01 = img.at(tx.hi, ty.lo, ch);
        const float p10 = img.at(tx.lo, ty.hi, ch), p11 = img.at(tx.hi, ty.hi, ch);
        const float top = p00 + (p01 - p00) * tx.frac;
        const float bottom = p10 + (p11 - p10) * tx.frac;
        out.at(0, ch, y, x) = (top + (bottom - top) * ty.frac) / 255.0f;
      }
    }
  return out;
}

}  // namespace edgeped
