#pragma once

// Dense NCHW float tensors and the CPU reference kernels used by the model
// graph. Every kernel is a pure function; per-element accumulation order is
// fixed (input channel, kernel row, kernel column, then bias) so results are
// bit-reproducible for any thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "edgeped/error.hpp"

namespace edgeped {

struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t size() const noexcept { return n * c * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : Tensor(Shape{n, c, h, w}, fill) {}
  Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw DimensionError("data", "expected " + std::to_string(shape_.size()) + " floats for " +
                                       shape_.str() + ", got " + std::to_string(data_.size()));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t n() const noexcept { return shape_.n; }
  std::size_t c() const noexcept { return shape_.c; }
  std::size_t h() const noexcept { return shape_.h; }
  std::size_t w() const noexcept { return shape_.w; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  float& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
    return data_[index(n, c, y, x)];
  }
  float at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return data_[index(n, c, y, x)];
  }

  // Contiguous h*w plane for (batch, channel).
  std::span<float> plane(std::size_t n, std::size_t c) noexcept {
    return {data_.data() + index(n, c, 0, 0), shape_.h * shape_.w};
  }
  std::span<const float> plane(std::size_t n, std::size_t c) const noexcept {
    return {data_.data() + index(n, c, 0, 0), shape_.h * shape_.w};
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

struct ConvParams {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  std::vector<float> weights;  // out_ch x (in_ch/groups) x k x k
  std::vector<float> bias;     // empty, or out_ch

  std::size_t weight_count() const noexcept {
    return groups == 0 ? 0 : out_ch * (in_ch / groups) * kernel * kernel;
  }
  std::size_t param_count() const noexcept { return weights.size() + bias.size(); }

  // Zero-initialised parameters with the right buffer sizes.
  static ConvParams make(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                         std::size_t stride = 1, std::size_t groups = 1, bool with_bias = true) {
    ConvParams p;
    p.in_ch = in_ch;
    p.out_ch = out_ch;
    p.kernel = kernel;
    p.stride = stride;
    p.padding = kernel / 2;
    p.groups = groups;
    p.weights.assign(p.weight_count(), 0.0f);
    if (with_bias) p.bias.assign(out_ch, 0.0f);
    return p;
  }

  void validate() const {
    if (groups == 0 || in_ch % groups != 0 || out_ch % groups != 0)
      throw DimensionError("groups", "in_ch " + std::to_string(in_ch) + " and out_ch " +
                                         std::to_string(out_ch) + " must be divisible by groups " +
                                         std::to_string(groups));
    if (kernel == 0) throw DimensionError("kernel", "kernel size must be >= 1");
    if (stride == 0) throw DimensionError("stride", "stride must be >= 1");
    if (weights.size() != weight_count())
      throw DimensionError("weights", "expected " + std::to_string(weight_count()) +
                                          " weights, got " + std::to_string(weights.size()));
    if (!bias.empty() && bias.size() != out_ch)
      throw DimensionError("bias", "expected " + std::to_string(out_ch) + " bias values, got " +
                                       std::to_string(bias.size()));
  }

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

// Threads used to split output channels. Results never depend on it.
struct ExecOptions {
  unsigned threads = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) return 0;
  return (in + 2 * p - k) / s + 1;
}

namespace detail {

template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < count; i += workers) fn(i);
    });
  }
}

// out[oy, ox] += wv * in[oy*s + ky - p, ox*s + kx - p] over the valid region.
inline void accumulate_tap(float* out, const float* in, float wv, std::size_t out_h,
                           std::size_t out_w, std::size_t in_h, std::size_t in_w, std::size_t ky,
                           std::size_t kx, std::size_t s, std::size_t p) {
  const auto ox_begin = static_cast<std::ptrdiff_t>(kx >= p ? 0 : (p - kx + s - 1) / s);
  const auto ox_limit = static_cast<std::ptrdiff_t>(in_w + p);  // exclusive bound on ox*s + kx
  std::ptrdiff_t ox_end = 0;
  if (ox_limit > static_cast<std::ptrdiff_t>(kx))
    ox_end = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_w),
                                      (ox_limit - static_cast<std::ptrdiff_t>(kx) - 1) /
                                              static_cast<std::ptrdiff_t>(s) +
                                          1);
  if (ox_end <= ox_begin) return;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
    float* orow = out + oy * out_w;
    const float* irow = in + static_cast<std::size_t>(iy) * in_w;
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p);
    if (s == 1) {
      for (std::ptrdiff_t ox = ox_begin; ox < ox_end; ++ox) orow[ox] += wv * irow[ox + shift];
    } else {
      for (std::ptrdiff_t ox = ox_begin; ox < ox_end; ++ox)
        orow[ox] += wv * irow[ox * static_cast<std::ptrdiff_t>(s) + shift];
    }
  }
}

inline Tensor conv_core(const Tensor& input, const ConvParams& params, const ExecOptions& opts) {
  params.validate();
  if (input.c() != params.in_ch)
    throw DimensionError("c", "input has " + std::to_string(input.c()) +
                                  " channels, conv expects " + std::to_string(params.in_ch));
  const std::size_t k = params.kernel, s = params.stride, p = params.padding;
  const std::size_t out_h = conv_out_extent(input.h(), k, s, p);
  const std::size_t out_w = conv_out_extent(input.w(), k, s, p);
  if (out_h == 0) throw DimensionError("h", "kernel does not fit the padded input height");
  if (out_w == 0) throw DimensionError("w", "kernel does not fit the padded input width");

  Tensor out(input.n(), params.out_ch, out_h, out_w);
  const std::size_t in_per_group = params.in_ch / params.groups;
  const std::size_t out_per_group = params.out_ch / params.groups;
  const std::size_t jobs = input.n() * params.out_ch;

  parallel_for(jobs, opts.threads, [&](std::size_t job) {
    const std::size_t b = job / params.out_ch;
    const std::size_t oc = job % params.out_ch;
    const std::size_t g = oc / out_per_group;
    float* oplane = out.plane(b, oc).data();
    const float* wbase = params.weights.data() + oc * in_per_group * k * k;
    for (std::size_t ic = 0; ic < in_per_group; ++ic) {
      const float* iplane = input.plane(b, g * in_per_group + ic).data();
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx)
          accumulate_tap(oplane, iplane, wbase[(ic * k + ky) * k + kx], out_h, out_w, input.h(),
                         input.w(), ky, kx, s, p);
    }
    if (!params.bias.empty()) {
      const float bv = params.bias[oc];
      for (std::size_t i = 0; i < out_h * out_w; ++i) oplane[i] += bv;
    }
  });
  return out;
}

}  // namespace detail

// Direct cross-correlation (no kernel flip), grouped when params.groups > 1.
inline Tensor conv2d(const Tensor& input, const ConvParams& params, const ExecOptions& opts = {}) {
  return detail::conv_core(input, params, opts);
}

inline Tensor depthwise_conv2d(const Tensor& input, const ConvParams& params,
                               const ExecOptions& opts = {}) {
  if (params.groups != params.in_ch || params.in_ch != params.out_ch)
    throw MisuseError("depthwise_conv2d requires groups == in_ch == out_ch (got groups=" +
                      std::to_string(params.groups) + ", in_ch=" + std::to_string(params.in_ch) +
                      ", out_ch=" + std::to_string(params.out_ch) + ")");
  return detail::conv_core(input, params, opts);
}

inline Tensor pointwise_conv2d(const Tensor& input, const ConvParams& params,
                               const ExecOptions& opts = {}) {
  if (params.kernel != 1 || params.padding != 0)
    throw MisuseError("pointwise_conv2d requires kernel 1 and padding 0 (got k=" +
                      std::to_string(params.kernel) + ", p=" + std::to_string(params.padding) + ")");
  return detail::conv_core(input, params, opts);
}

// Folds inference-time batch normalisation into the preceding convolution:
// y = gamma * (conv(x) - mean) / sqrt(var + eps) + beta.
inline ConvParams batchnorm_fold(const ConvParams& params, std::span<const float> gamma,
                                 std::span<const float> beta, std::span<const float> mean,
                                 std::span<const float> var, float eps) {
  params.validate();
  const std::size_t oc = params.out_ch;
  for (auto [name, len] : {std::pair{"gamma", gamma.size()}, std::pair{"beta", beta.size()},
                           std::pair{"mean", mean.size()}, std::pair{"var", var.size()}})
    if (len != oc)
      throw DimensionError(name, "expected " + std::to_string(oc) + " values, got " +
                                     std::to_string(len));
  for (std::size_t i = 0; i < oc; ++i)
    if (!(var[i] >= 0.0f))
      throw DomainError("batchnorm_fold: variance of channel " + std::to_string(i) +
                        " is negative");
  if (eps < 0.0f) throw DomainError("batchnorm_fold: eps must be non-negative");

  ConvParams folded = params;
  if (folded.bias.empty()) folded.bias.assign(oc, 0.0f);
  const std::size_t per_oc = params.weight_count() / oc;
  for (std::size_t o = 0; o < oc; ++o) {
    const float denom = std::sqrt(var[o] + eps);
    if (denom == 0.0f)
      throw DomainError("batchnorm_fold: var + eps is zero for channel " + std::to_string(o));
    const float scale = gamma[o] / denom;
    for (std::size_t i = 0; i < per_oc; ++i) folded.weights[o * per_oc + i] *= scale;
    folded.bias[o] = (folded.bias[o] - mean[o]) * scale + beta[o];
  }
  return folded;
}

inline Tensor leaky_relu(Tensor input, float slope = 0.1f) {
  for (float& v : input.data()) v = std::max(v, slope * v);
  return input;
}

inline Tensor relu6(Tensor input) {
  for (float& v : input.data()) v = v > 0.0f ? std::min(v, 6.0f) : 0.0f;
  return input;
}

inline Tensor upsample_nearest2x(const Tensor& input) {
  Tensor out(input.n(), input.c(), input.h() * 2, input.w() * 2);
  for (std::size_t b = 0; b < input.n(); ++b)
    for (std::size_t ch = 0; ch < input.c(); ++ch)
      for (std::size_t y = 0; y < out.h(); ++y)
        for (std::size_t x = 0; x < out.w(); ++x) out.at(b, ch, y, x) = input.at(b, ch, y / 2, x / 2);
  return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n()) throw DimensionError("n", "batch " + std::to_string(a.n()) + " vs " + std::to_string(b.n()));
  if (a.h() != b.h()) throw DimensionError("h", "height " + std::to_string(a.h()) + " vs " + std::to_string(b.h()));
  if (a.w() != b.w()) throw DimensionError("w", "width " + std::to_string(a.w()) + " vs " + std::to_string(b.w()));
  Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
  const std::size_t plane = a.h() * a.w();
  for (std::size_t n = 0; n < a.n(); ++n) {
    auto dst = out.data().begin() + static_cast<std::ptrdiff_t>(out.index(n, 0, 0, 0));
    auto sa = a.data().subspan(a.index(n, 0, 0, 0), a.c() * plane);
    auto sb = b.data().subspan(b.c() ? b.index(n, 0, 0, 0) : 0, b.c() * plane);
    dst = std::copy(sa.begin(), sa.end(), dst);
    std::copy(sb.begin(), sb.end(), dst);
  }
  return out;
}

// Channels [begin, end) of the input.
inline Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t end) {
  if (begin > end || end > input.c())
    throw DimensionError("c", "slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                                  ") outside " + std::to_string(input.c()) + " channels");
  Tensor out(input.n(), end - begin, input.h(), input.w());
  for (std::size_t n = 0; n < input.n(); ++n)
    for (std::size_t ch = begin; ch < end; ++ch) {
      auto src = input.plane(n, ch);
      std::copy(src.begin(), src.end(), out.plane(n, ch - begin).begin());
    }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape()))
    throw DimensionError("shape", a.shape().str() + " vs " + b.shape().str());
  Tensor out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

// Max over k x k windows; padded cells never win.
inline Tensor maxpool2d(const Tensor& input, std::size_t k, std::size_t s, std::size_t p = 0) {
  if (k == 0 || s == 0) throw DimensionError("kernel", "maxpool kernel and stride must be >= 1");
  if (p >= k) throw DimensionError("padding", "maxpool padding must be smaller than the kernel");
  const std::size_t out_h = conv_out_extent(input.h(), k, s, p);
  const std::size_t out_w = conv_out_extent(input.w(), k, s, p);
  if (out_h == 0)
    throw DimensionError("h", "maxpool window " + std::to_string(k) + " exceeds padded height " +
                                  std::to_string(input.h() + 2 * p));
  if (out_w == 0)
    throw DimensionError("w", "maxpool window " + std::to_string(k) + " exceeds padded width " +
                                  std::to_string(input.w() + 2 * p));
  Tensor out(input.n(), input.c(), out_h, out_w);
  for (std::size_t n = 0; n < input.n(); ++n)
    for (std::size_t ch = 0; ch < input.c(); ++ch)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(input.h())) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(input.w())) continue;
              best = std::max(best, input.at(n, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)));
            }
          }
          out.at(n, ch, oy, ox) = best;
        }
  return out;
}

}  // namespace edgeped
