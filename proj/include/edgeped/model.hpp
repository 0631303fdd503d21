#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "edgeped/error.hpp"
#include "edgeped/model_config.hpp"
#include "edgeped/tensor.hpp"

namespace edgeped {

// ---------------------------------------------------------------------------
// Parameter accounting for a single inverted residual block.

// O = C * t
constexpr std::size_t expand_channels(std::size_t channels, std::size_t factor) noexcept {
  return channels * factor;
}

// D = k^2 * C
constexpr std::size_t depthwise_param_count(std::size_t kernel, std::size_t channels) noexcept {
  return kernel * kernel * channels;
}

// The block total as commonly printed: C*t^2 + k^2*C + C*C. It does not match
// the actual buffer sizes; see block_param_count_exact.
constexpr std::size_t block_param_count_paper(const InvertedResidualSpec& s) noexcept {
  return s.in_ch * s.expansion * s.expansion + s.kernel * s.kernel * s.in_ch + s.in_ch * s.in_ch;
}

// Sum of the weight arrays of the expansion, depthwise and projection convs.
// Biases (folded batch norm) add expanded + expanded + out_ch when requested.
constexpr std::size_t block_param_count_exact(const InvertedResidualSpec& s,
                                              bool include_bias = false) noexcept {
  const std::size_t o = expand_channels(s.in_ch, s.expansion);
  std::size_t n = s.in_ch * o + depthwise_param_count(s.kernel, o) + o * s.out_ch;
  if (include_bias) n += o + o + s.out_ch;
  return n;
}

// ---------------------------------------------------------------------------
// Graph resolution

struct LayerGeometry {
  int source = -1;          // -1: network input
  int second = -1;          // concat partner
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t in_extent = 0;   // square spatial size of the input
  std::size_t out_extent = 0;
  std::size_t out_stride = 0;  // input_size / out_extent
};

namespace detail {

inline std::string layer_label(std::size_t i, const LayerSpec& l) {
  std::string s = "layer " + std::to_string(i) + " (" + std::string(l.kind());
  if (l.line) s += ", line " + std::to_string(l.line);
  return s + ")";
}

inline int resolve_ref(const ModelConfig& cfg, std::size_t self, const std::string& ref) {
  if (ref.empty()) return static_cast<int>(self) - 1;
  const auto& layers = cfg.layers;
  if (std::all_of(ref.begin(), ref.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    const auto idx = std::stoul(ref);
    if (idx >= self)
      throw GraphError(layer_label(self, layers[self]) + ": reference " + ref +
                       " does not point to an earlier layer");
    return static_cast<int>(idx);
  }
  int found = -1;
  for (std::size_t i = 0; i < self; ++i) {
    const bool hit = (ref == "tap16" && layers[i].tap == 16u) ||
                     (ref == "tap32" && layers[i].tap == 32u) || layers[i].name == ref;
    if (hit) {
      if (found >= 0)
        throw GraphError(layer_label(self, layers[self]) + ": reference '" + ref + "' is ambiguous");
      found = static_cast<int>(i);
    }
  }
  if (found < 0)
    throw GraphError(layer_label(self, layers[self]) + ": unknown reference '" + ref + "'");
  return found;
}

}  // namespace detail

// Checks the whole graph and returns per-layer channel/extent bookkeeping.
// Throws GraphError before any compute happens.
inline std::vector<LayerGeometry> resolve_graph(const ModelConfig& cfg) {
  if (cfg.input_size == 0 || cfg.input_size % 32 != 0)
    throw GraphError("input_size " + std::to_string(cfg.input_size) + " must be a positive multiple of 32");
  if (cfg.class_count == 0) throw GraphError("class count must be >= 1");

  std::vector<LayerGeometry> geo(cfg.layers.size());
  std::vector<std::size_t> head_strides;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const auto& l = cfg.layers[i];
    auto& g = geo[i];
    const auto label = detail::layer_label(i, l);
    g.source = detail::resolve_ref(cfg, i, l.from);
    g.in_ch = g.source < 0 ? 3 : geo[static_cast<std::size_t>(g.source)].out_ch;
    g.in_extent = g.source < 0 ? cfg.input_size : geo[static_cast<std::size_t>(g.source)].out_extent;
    if (l.in_ch && *l.in_ch != g.in_ch)
      throw GraphError(label + ": declares " + std::to_string(*l.in_ch) + " input channels but receives " +
                       std::to_string(g.in_ch));

    auto conv_extent = [&](std::size_t k, std::size_t s, std::size_t p) {
      if (k == 0 || s == 0) throw GraphError(label + ": kernel and stride must be >= 1");
      const auto e = conv_out_extent(g.in_extent, k, s, p);
      if (e == 0) throw GraphError(label + ": kernel does not fit a " + std::to_string(g.in_extent) + " input");
      return e;
    };

    std::visit(
        [&](const auto& b) {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, ConvSpec>) {
            if (b.out_ch == 0) throw GraphError(label + ": out must be >= 1");
            g.out_ch = b.out_ch;
            g.out_extent = conv_extent(b.kernel, b.stride, b.kernel / 2);
          } else if constexpr (std::is_same_v<T, InvertedResidualSpec>) {
            if (b.expansion == 0 || b.out_ch == 0) throw GraphError(label + ": t and out must be >= 1");
            if (b.stride != 1 && b.stride != 2) throw GraphError(label + ": stride must be 1 or 2");
            g.out_ch = b.out_ch;
            g.out_extent = conv_extent(b.kernel, b.stride, b.kernel / 2);
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            if (b.padding >= std::max<std::size_t>(b.kernel, 1))
              throw GraphError(label + ": maxpool padding must be smaller than the kernel");
            g.out_ch = g.in_ch;
            g.out_extent = conv_extent(b.kernel, b.stride, b.padding);
          } else if constexpr (std::is_same_v<T, UpsampleSpec>) {
            g.out_ch = g.in_ch;
            g.out_extent = g.in_extent * 2;
          } else if constexpr (std::is_same_v<T, ConcatSpec>) {
            g.second = detail::resolve_ref(cfg, i, b.with);
            const auto& other = geo[static_cast<std::size_t>(g.second)];
            if (other.out_extent != g.in_extent)
              throw GraphError(label + ": concat spatial mismatch " + std::to_string(g.in_extent) +
                               " vs " + std::to_string(other.out_extent));
            g.out_ch = g.in_ch + other.out_ch;
            g.out_extent = g.in_extent;
          } else if constexpr (std::is_same_v<T, HeadSpec>) {
            if (b.anchors.empty()) throw GraphError(label + ": head needs anchors");
            if (b.stride != 16 && b.stride != 32) throw GraphError(label + ": head stride must be 16 or 32");
            if (g.in_extent * b.stride != cfg.input_size)
              throw GraphError(label + ": head stride " + std::to_string(b.stride) +
                               " fed by a feature map of extent " + std::to_string(g.in_extent));
            g.out_ch = b.channels(cfg.class_count);
            g.out_extent = g.in_extent;
            head_strides.push_back(b.stride);
          }
        },
        l.body);

    if (cfg.input_size % g.out_extent != 0)
      throw GraphError(label + ": output extent " + std::to_string(g.out_extent) + " does not divide input_size");
    g.out_stride = cfg.input_size / g.out_extent;
    if (l.tap && *l.tap != g.out_stride)
      throw GraphError(label + ": tap=" + std::to_string(*l.tap) + " but cumulative stride is " +
                       std::to_string(g.out_stride));
  }
  std::sort(head_strides.begin(), head_strides.end());
  if (head_strides != std::vector<std::size_t>{16, 32})
    throw GraphError("model needs exactly two heads, one at stride 16 and one at stride 32");
  return geo;
}

// ---------------------------------------------------------------------------
// Model

struct Layer {
  LayerSpec spec;
  LayerGeometry geometry;
  // conv: 1 entry; ir: expansion, depthwise, projection; head: 1; others: none
  std::vector<ConvParams> convs;
};

struct HeadOutputs {
  Tensor raw32;
  Tensor raw16;
};

class WeightFormatError : public Error {
 public:
  enum class Kind { bad_magic, bad_version, layer_count_mismatch, length_mismatch, trailing_bytes };

  WeightFormatError(Kind kind, const std::string& detail, std::optional<std::size_t> layer = {})
      : Error("weight file: " + detail), kind_(kind), layer_(layer) {}
  Kind kind() const noexcept { return kind_; }
  std::optional<std::size_t> layer() const noexcept { return layer_; }

 private:
  Kind kind_;
  std::optional<std::size_t> layer_;
};

class Model {
 public:
  static constexpr std::uint32_t kWeightVersion = 1;

  // Validates the graph and allocates zero weights.
  explicit Model(ModelConfig config) : config_(std::move(config)) {
    const auto geo = resolve_graph(config_);
    layers_.reserve(config_.layers.size());
    for (std::size_t i = 0; i < geo.size(); ++i) {
      Layer layer{config_.layers[i], geo[i], {}};
      const auto in = geo[i].in_ch;
      std::visit(
          [&](const auto& b) {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, ConvSpec>) {
              layer.convs.push_back(ConvParams::make(in, b.out_ch, b.kernel, b.stride));
            } else if constexpr (std::is_same_v<T, InvertedResidualSpec>) {
              const auto mid = b.expanded_ch();
              layer.convs.push_back(ConvParams::make(in, mid, 1));
              layer.convs.push_back(ConvParams::make(mid, mid, b.kernel, b.stride, mid));
              layer.convs.push_back(ConvParams::make(mid, b.out_ch, 1));
            } else if constexpr (std::is_same_v<T, HeadSpec>) {
              layer.convs.push_back(ConvParams::make(in, b.channels(config_.class_count), 1));
            }
          },
          config_.layers[i].body);
      layers_.push_back(std::move(layer));
    }
    compute_last_use();
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t input_size() const noexcept { return config_.input_size; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  std::span<const Layer> layers() const noexcept { return layers_; }

  const HeadSpec& head(std::size_t stride) const {
    for (const auto& l : layers_)
      if (const auto* h = std::get_if<HeadSpec>(&l.spec.body); h && h->stride == stride) return *h;
    throw GraphError("no head with stride " + std::to_string(stride));
  }

  // Runs one layer on explicit inputs (`second` only for concat).
  Tensor run_layer(std::size_t index, const Tensor& x, const Tensor* second = nullptr,
                   const ExecOptions& opts = {}) const {
    const auto& l = layers_.at(index);
    const float slope = config_.leaky_slope;
    return std::visit(
        [&](const auto& b) -> Tensor {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, ConvSpec>) {
            return activate(conv2d(x, l.convs[0], opts), b.act, slope);
          } else if constexpr (std::is_same_v<T, InvertedResidualSpec>) {
            Tensor y = relu6(pointwise_conv2d(x, l.convs[0], opts));
            y = relu6(depthwise_conv2d(y, l.convs[1], opts));
            y = pointwise_conv2d(y, l.convs[2], opts);
            return b.has_shortcut() ? add(x, y) : y;
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            return maxpool2d(x, b.kernel, b.stride, b.padding);
          } else if constexpr (std::is_same_v<T, UpsampleSpec>) {
            return upsample_nearest2x(x);
          } else if constexpr (std::is_same_v<T, ConcatSpec>) {
            if (!second) throw MisuseError("concat layer needs a second input");
            return concat_channels(x, *second);
          } else {
            return pointwise_conv2d(x, l.convs[0], opts);
          }
        },
        l.spec.body);
  }

  HeadOutputs forward(const Tensor& input, const ExecOptions& opts = {}) const {
    const auto s = config_.input_size;
    if (input.n() != 1 || input.c() != 3 || input.h() != s || input.w() != s)
      throw DimensionError(input.n() != 1 ? "n" : input.c() != 3 ? "c" : input.h() != s ? "h" : "w",
                           "forward expects 1x3x" + std::to_string(s) + "x" + std::to_string(s) +
                               ", got " + input.shape().str());
    std::vector<std::optional<Tensor>> outs(layers_.size());
    HeadOutputs heads;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& g = layers_[i].geometry;
      const Tensor& x = g.source < 0 ? input : *outs[static_cast<std::size_t>(g.source)];
      const Tensor* second = g.second < 0 ? nullptr : &*outs[static_cast<std::size_t>(g.second)];
      outs[i] = run_layer(i, x, second, opts);
      if (const auto* h = std::get_if<HeadSpec>(&layers_[i].spec.body))
        (h->stride == 32 ? heads.raw32 : heads.raw16) = *outs[i];
      for (std::size_t j = 0; j <= i; ++j)
        if (last_use_[j] <= i) outs[j].reset();
    }
    return heads;
  }

 private:
  static Tensor activate(Tensor t, Activation a, float slope) {
    switch (a) {
      case Activation::relu6: return relu6(std::move(t));
      case Activation::leaky: return leaky_relu(std::move(t), slope);
      case Activation::linear: break;
    }
    return t;
  }

  void compute_last_use() {
    last_use_.assign(layers_.size(), 0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      last_use_[i] = std::max(last_use_[i], i);
      for (int src : {layers_[i].geometry.source, layers_[i].geometry.second})
        if (src >= 0) last_use_[static_cast<std::size_t>(src)] = i;
    }
  }

  ModelConfig config_;
  std::vector<Layer> layers_;
  std::vector<std::size_t> last_use_;
};

// ---------------------------------------------------------------------------
// Accounting

// Total learnable floats (weights and folded-BN biases).
inline std::size_t count_params(const Model& model) {
  std::size_t n = 0;
  for (const auto& l : model.layers())
    for (const auto& c : l.convs) n += c.param_count();
  return n;
}

inline std::size_t conv_flops(const ConvParams& p, std::size_t out_h, std::size_t out_w) {
  return 2 * p.kernel * p.kernel * (p.in_ch / p.groups) * p.out_ch * out_h * out_w;
}

// Multiply-accumulates over all convolutions, counted as two ops each.
inline std::size_t count_flops(const ModelConfig& config, std::size_t input_size) {
  ModelConfig cfg = config;
  cfg.input_size = input_size;
  const Model model(cfg);
  std::size_t total = 0;
  for (const auto& l : model.layers()) {
    std::size_t extent = l.geometry.in_extent;
    for (const auto& c : l.convs) {
      extent = conv_out_extent(extent, c.kernel, c.stride, c.padding);
      total += conv_flops(c, extent, extent);
    }
  }
  return total;
}

inline std::size_t count_flops(const Model& model, std::size_t input_size) {
  return count_flops(model.config(), input_size);
}

// ---------------------------------------------------------------------------
// Weight initialisation

// Portable uniform draws in [0, 1): the engine output sequence is fixed by
// the standard, the float mapping is explicit.
class UniformSource {
 public:
  explicit UniformSource(std::uint64_t seed) : rng_(seed) {}
  float next() { return static_cast<float>(rng_() >> 40) * 0x1p-24f; }
  float symmetric(float bound) { return (2.0f * next() - 1.0f) * bound; }

 private:
  std::mt19937_64 rng_;
};

// Fills every conv with fan-in scaled uniform weights and small biases.
inline void randomize_weights(Model& model, std::uint64_t seed, float bias_bound = 0.05f) {
  UniformSource u(seed);
  for (std::size_t i = 0; i < model.layer_count(); ++i)
    for (auto& c : model.layer(i).convs) {
      const auto fan_in = (c.in_ch / c.groups) * c.kernel * c.kernel;
      const float bound = std::sqrt(3.0f / static_cast<float>(fan_in));
      for (float& w : c.weights) w = u.symmetric(bound);
      for (float& b : c.bias) b = u.symmetric(bias_bound);
    }
}

// ---------------------------------------------------------------------------
// Weight file: "EPW1" | version u32 | layer count u32 |
//              per layer: index u32, float count u64, floats (little-endian)

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  bool has(std::size_t n) const noexcept { return bytes_.size() - pos_ >= n; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::uint64_t uint(int width) {
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> save_weights(const Model& model) {
  std::vector<std::uint8_t> out{'E', 'P', 'W', '1'};
  detail::put_u32(out, Model::kWeightVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(model.layer_count()));
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    const auto& l = model.layer(i);
    std::uint64_t count = 0;
    for (const auto& c : l.convs) count += c.param_count();
    detail::put_u32(out, static_cast<std::uint32_t>(i));
    detail::put_u64(out, count);
    for (const auto& c : l.convs) {
      for (float v : c.weights) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
      for (float v : c.bias) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
  }
  return out;
}

// Replaces the model's weights in place. The model is left untouched on error.
inline void load_weights(Model& model, std::span<const std::uint8_t> bytes) {
  using K = WeightFormatError::Kind;
  detail::ByteReader in(bytes);
  if (!in.has(4) || std::memcmp(in.take(4).data(), "EPW1", 4) != 0)
    throw WeightFormatError(K::bad_magic, "missing EPW1 magic");
  if (!in.has(8)) throw WeightFormatError(K::length_mismatch, "header truncated");
  const auto version = in.uint(4);
  if (version != Model::kWeightVersion)
    throw WeightFormatError(K::bad_version, "unsupported version " + std::to_string(version));
  const auto layer_count = in.uint(4);
  if (layer_count != model.layer_count())
    throw WeightFormatError(K::layer_count_mismatch,
                            "file has " + std::to_string(layer_count) + " layers, config has " +
                                std::to_string(model.layer_count()));

  std::vector<std::vector<ConvParams>> staged;
  staged.reserve(model.layer_count());
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    auto convs = model.layer(i).convs;
    std::uint64_t expected = 0;
    for (const auto& c : convs) expected += c.param_count();
    if (!in.has(12))
      throw WeightFormatError(K::length_mismatch, "layer " + std::to_string(i) + " header truncated", i);
    const auto index = in.uint(4);
    const auto count = in.uint(8);
    if (index != i)
      throw WeightFormatError(K::length_mismatch,
                              "layer " + std::to_string(i) + " stored as index " + std::to_string(index), i);
    if (count != expected)
      throw WeightFormatError(K::length_mismatch,
                              "layer " + std::to_string(i) + " holds " + std::to_string(count) +
                                  " floats, config needs " + std::to_string(expected),
                              i);
    if (in.remaining() / 4 < count)
      throw WeightFormatError(K::length_mismatch,
                              "layer " + std::to_string(i) + " truncated: needs " + std::to_string(count) +
                                  " floats",
                              i);
    auto read = [&](std::vector<float>& dst) {
      for (float& v : dst) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.uint(4)));
    };
    for (auto& c : convs) {
      read(c.weights);
      read(c.bias);
    }
    staged.push_back(std::move(convs));
  }
  if (in.remaining() != 0)
    throw WeightFormatError(K::trailing_bytes, std::to_string(in.remaining()) + " unexpected trailing bytes");
  for (std::size_t i = 0; i < staged.size(); ++i) model.layer(i).convs = std::move(staged[i]);
}

}  // namespace edgeped
