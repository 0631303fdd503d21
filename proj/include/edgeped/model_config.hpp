#pragma once

// Declarative network description and its plain-text file format.
//
// File format (one item per line, '#' starts a comment):
//
//   input_size = 416          global keys: input_size, classes, leaky_slope
//   classes = 1
//   conv  out=32 k=3 s=2 act=relu6
//   ir    in=32 t=1 out=16 s=1 [k=3]
//   ir    in=96 t=6 out=96 s=1 tap=16
//   conv  out=256 k=1 act=leaky name=route32
//   head  stride=32 anchors=81x82,135x169,344x319
//   conv  out=128 k=1 act=leaky from=route32
//   upsample
//   concat with=tap16
//   maxpool k=2 s=2 [p=0]
//
// Layer kinds: conv, ir, maxpool, upsample, concat, head. Every layer reads the
// previous layer's output unless `from=` names another source; `concat` also
// reads `with=`. A reference is a 0-based layer index, a `name=` label, or one
// of `tap16` / `tap32` (the layers carrying `tap=16` / `tap=32`). `in=` is an
// optional declaration of the input channel count, checked during validation.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "edgeped/error.hpp"

namespace edgeped {

enum class Activation { linear, relu6, leaky };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu6: return "relu6";
    case Activation::leaky: return "leaky";
  }
  return "?";
}

// MobileNetV2 bottleneck: 1x1 expansion, k x k depthwise, 1x1 linear projection.
struct InvertedResidualSpec {
  std::size_t in_ch = 0;     // C
  std::size_t expansion = 1; // t
  std::size_t out_ch = 0;
  std::size_t stride = 1;
  std::size_t kernel = 3;

  std::size_t expanded_ch() const noexcept { return in_ch * expansion; }
  bool has_shortcut() const noexcept { return stride == 1 && in_ch == out_ch; }
  friend bool operator==(const InvertedResidualSpec&, const InvertedResidualSpec&) = default;
};

struct Anchor {
  float w = 0.0f;
  float h = 0.0f;
  friend bool operator==(const Anchor&, const Anchor&) = default;
};

struct HeadSpec {
  std::size_t stride = 32;
  std::vector<Anchor> anchors;

  std::size_t channels(std::size_t class_count) const noexcept {
    return anchors.size() * (5 + class_count);
  }
  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

struct ConvSpec {
  std::size_t out_ch = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  Activation act = Activation::leaky;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct MaxPoolSpec {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
  friend bool operator==(const MaxPoolSpec&, const MaxPoolSpec&) = default;
};

struct UpsampleSpec {
  friend bool operator==(const UpsampleSpec&, const UpsampleSpec&) = default;
};

struct ConcatSpec {
  std::string with;
  friend bool operator==(const ConcatSpec&, const ConcatSpec&) = default;
};

using LayerBody =
    std::variant<ConvSpec, InvertedResidualSpec, MaxPoolSpec, UpsampleSpec, ConcatSpec, HeadSpec>;

struct LayerSpec {
  LayerBody body;
  std::string from;                   // empty: previous layer
  std::optional<std::size_t> in_ch;   // declared input channels (ir always declares)
  std::optional<std::size_t> tap;     // 16 or 32
  std::string name;
  std::size_t line = 0;               // source line, 0 when built in code

  std::string_view kind() const {
    static constexpr std::string_view names[] = {"conv", "ir", "maxpool", "upsample", "concat", "head"};
    return names[body.index()];
  }
  friend bool operator==(const LayerSpec& a, const LayerSpec& b) {
    return a.body == b.body && a.from == b.from && a.in_ch == b.in_ch && a.tap == b.tap &&
           a.name == b.name;
  }
};

struct ModelConfig {
  std::size_t input_size = 416;
  std::size_t class_count = 1;
  float leaky_slope = 0.1f;
  std::vector<LayerSpec> layers;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_count(std::string_view v, std::size_t line, std::string_view key) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw ConfigError(line, "field '" + std::string(key) + "' expects a non-negative integer, got '" +
                                std::string(v) + "'");
  return out;
}

inline float parse_float(std::string_view v, std::size_t line, std::string_view key) {
  try {
    std::size_t used = 0;
    const std::string s(v);
    const float f = std::stof(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return f;
  } catch (const std::logic_error&) {
    throw ConfigError(line, "field '" + std::string(key) + "' expects a number, got '" +
                                std::string(v) + "'");
  }
}

inline std::vector<Anchor> parse_anchors(std::string_view v, std::size_t line) {
  std::vector<Anchor> anchors;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const auto item = v.substr(0, comma);
    const auto x = item.find('x');
    if (x == std::string_view::npos)
      throw ConfigError(line, "anchor '" + std::string(item) + "' must look like WxH");
    anchors.push_back({parse_float(item.substr(0, x), line, "anchors"),
                       parse_float(item.substr(x + 1), line, "anchors")});
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  if (anchors.empty()) throw ConfigError(line, "head needs at least one anchor");
  return anchors;
}

inline Activation parse_activation(std::string_view v, std::size_t line) {
  if (v == "linear") return Activation::linear;
  if (v == "relu6") return Activation::relu6;
  if (v == "leaky") return Activation::leaky;
  throw ConfigError(line, "unknown activation '" + std::string(v) + "'");
}

}  // namespace detail

inline ModelConfig parse_model_config(std::string_view text) {
  using detail::parse_count;
  ModelConfig cfg;
  std::size_t line_no = 0;
  bool seen_layer = false;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;

    // "key = value" when the first word is directly followed by '='.
    const auto word_end = std::min(line.find_first_of(" \t="), line.size());
    const auto after = line.find_first_not_of(" \t", word_end);
    if (after != std::string_view::npos && line[after] == '=') {
      const auto eq = after;
      const auto key = detail::trim(line.substr(0, eq));
      const auto value = detail::trim(line.substr(eq + 1));
      if (seen_layer) throw ConfigError(line_no, "global key '" + std::string(key) + "' after first layer");
      if (key == "input_size") cfg.input_size = parse_count(value, line_no, key);
      else if (key == "classes") cfg.class_count = parse_count(value, line_no, key);
      else if (key == "leaky_slope") cfg.leaky_slope = detail::parse_float(value, line_no, key);
      else throw ConfigError(line_no, "unknown global key '" + std::string(key) + "'");
      continue;
    }

    seen_layer = true;
    std::istringstream tokens{std::string(line)};
    std::string kind;
    tokens >> kind;
    std::map<std::string, std::string> fields;
    for (std::string tok; tokens >> tok;) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == tok.size())
        throw ConfigError(line_no, "expected key=value, got '" + tok + "'");
      if (!fields.emplace(tok.substr(0, eq), tok.substr(eq + 1)).second)
        throw ConfigError(line_no, "duplicate field '" + tok.substr(0, eq) + "'");
    }
    auto take = [&](const std::string& key) -> std::optional<std::string> {
      auto it = fields.find(key);
      if (it == fields.end()) return std::nullopt;
      auto v = it->second;
      fields.erase(it);
      return v;
    };
    auto require = [&](const std::string& key) {
      auto v = take(key);
      if (!v) throw ConfigError(line_no, kind + " requires field '" + key + "'");
      return *v;
    };
    auto count_or = [&](const std::string& key, std::size_t def) {
      auto v = take(key);
      return v ? parse_count(*v, line_no, key) : def;
    };

    LayerSpec layer;
    layer.line = line_no;
    if (auto v = take("from")) layer.from = *v;
    if (auto v = take("name")) layer.name = *v;
    if (auto v = take("in")) layer.in_ch = parse_count(*v, line_no, "in");
    if (auto v = take("tap")) {
      const auto t = parse_count(*v, line_no, "tap");
      if (t != 16 && t != 32) throw ConfigError(line_no, "tap must be 16 or 32");
      layer.tap = t;
    }

    if (kind == "conv") {
      ConvSpec c;
      c.out_ch = parse_count(require("out"), line_no, "out");
      c.kernel = count_or("k", 1);
      c.stride = count_or("s", 1);
      if (auto a = take("act")) c.act = detail::parse_activation(*a, line_no);
      layer.body = c;
    } else if (kind == "ir") {
      InvertedResidualSpec ir;
      if (!layer.in_ch) throw ConfigError(line_no, "ir requires field 'in'");
      ir.in_ch = *layer.in_ch;
      ir.expansion = parse_count(require("t"), line_no, "t");
      ir.out_ch = parse_count(require("out"), line_no, "out");
      ir.stride = count_or("s", 1);
      ir.kernel = count_or("k", 3);
      layer.body = ir;
    } else if (kind == "maxpool") {
      MaxPoolSpec m;
      m.kernel = count_or("k", 2);
      m.stride = count_or("s", 2);
      m.padding = count_or("p", 0);
      layer.body = m;
    } else if (kind == "upsample") {
      layer.body = UpsampleSpec{};
    } else if (kind == "concat") {
      layer.body = ConcatSpec{require("with")};
    } else if (kind == "head") {
      HeadSpec h;
      h.stride = parse_count(require("stride"), line_no, "stride");
      h.anchors = detail::parse_anchors(require("anchors"), line_no);
      layer.body = h;
    } else {
      throw ConfigError(line_no, "unknown layer kind '" + kind + "'");
    }
    if (!fields.empty())
      throw ConfigError(line_no, "unknown field '" + fields.begin()->first + "' for " + kind);
    cfg.layers.push_back(std::move(layer));
  }
  return cfg;
}

inline ModelConfig load_model_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open model config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_model_config(ss.str());
}

// Inverse of parse_model_config (comments and line numbers are not kept).
inline std::string format_model_config(const ModelConfig& cfg) {
  std::ostringstream out;
  out << "input_size = " << cfg.input_size << "\n";
  out << "classes = " << cfg.class_count << "\n";
  out << "leaky_slope = " << cfg.leaky_slope << "\n";
  for (const auto& l : cfg.layers) {
    out << l.kind();
    std::visit(
        [&](const auto& b) {
          using T = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<T, ConvSpec>) {
            if (l.in_ch) out << " in=" << *l.in_ch;
            out << " out=" << b.out_ch << " k=" << b.kernel << " s=" << b.stride
                << " act=" << to_string(b.act);
          } else if constexpr (std::is_same_v<T, InvertedResidualSpec>) {
            out << " in=" << b.in_ch << " t=" << b.expansion << " out=" << b.out_ch
                << " s=" << b.stride << " k=" << b.kernel;
          } else if constexpr (std::is_same_v<T, MaxPoolSpec>) {
            out << " k=" << b.kernel << " s=" << b.stride << " p=" << b.padding;
          } else if constexpr (std::is_same_v<T, ConcatSpec>) {
            out << " with=" << b.with;
          } else if constexpr (std::is_same_v<T, HeadSpec>) {
            if (l.in_ch) out << " in=" << *l.in_ch;
            out << " stride=" << b.stride << " anchors=";
            for (std::size_t i = 0; i < b.anchors.size(); ++i)
              out << (i ? "," : "") << b.anchors[i].w << "x" << b.anchors[i].h;
          }
        },
        l.body);
    if (!l.from.empty()) out << " from=" << l.from;
    if (l.tap) out << " tap=" << *l.tap;
    if (!l.name.empty()) out << " name=" << l.name;
    out << "\n";
  }
  return out.str();
}

// MobileNetV2 schedule truncated after the stride-32 stage, followed by a
// two-scale tiny-YOLOv3 neck (strides 32 and 16) with the tiny-YOLOv3 anchors.
inline constexpr std::string_view kReferenceConfig = R"(# MobileNetV2 backbone + two-scale tiny-YOLOv3 neck/head
input_size = 416
classes = 1
leaky_slope = 0.1

# backbone                                  cumulative stride
conv  out=32 k=3 s=2 act=relu6            # 2
ir    in=32  t=1 out=16  s=1
ir    in=16  t=6 out=24  s=2              # 4
ir    in=24  t=6 out=24  s=1
ir    in=24  t=6 out=32  s=2              # 8
ir    in=32  t=6 out=32  s=1
ir    in=32  t=6 out=32  s=1
ir    in=32  t=6 out=64  s=2              # 16
ir    in=64  t=6 out=64  s=1
ir    in=64  t=6 out=64  s=1
ir    in=64  t=6 out=64  s=1
ir    in=64  t=6 out=96  s=1
ir    in=96  t=6 out=96  s=1
ir    in=96  t=6 out=96  s=1  tap=16
ir    in=96  t=6 out=160 s=2              # 32
ir    in=160 t=6 out=160 s=1
ir    in=160 t=6 out=160 s=1
ir    in=160 t=6 out=320 s=1  tap=32

# stride-32 detection branch
conv  out=256 k=1 act=leaky name=route32
conv  out=512 k=3 act=leaky
head  stride=32 anchors=81x82,135x169,344x319

# stride-16 detection branch
conv  out=128 k=1 act=leaky from=route32
upsample
concat with=tap16
conv  out=256 k=3 act=leaky
head  stride=16 anchors=10x14,23x27,37x58
)";

inline ModelConfig reference_config(std::size_t input_size = 416) {
  auto cfg = parse_model_config(kReferenceConfig);
  cfg.input_size = input_size;
  return cfg;
}

}  // namespace edgeped
