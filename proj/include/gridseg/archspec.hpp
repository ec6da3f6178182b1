#pragma once

#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace gridseg {

enum class LayerKind {
  Conv,
  TConv,
  MaxPool,
  Upsample,
  LeakyRelu,
  BatchNorm,
  Sigmoid,
  Dense,
  DtFixed,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::TConv: return "tconv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::LeakyRelu: return "leaky_relu";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Dense: return "dense";
    case LayerKind::DtFixed: return "dt";
  }
  return "?";
}

inline LayerKind layer_kind_from_name(const std::string& name) {
  if (name == "conv") return LayerKind::Conv;
  if (name == "tconv") return LayerKind::TConv;
  if (name == "maxpool") return LayerKind::MaxPool;
  if (name == "upsample") return LayerKind::Upsample;
  if (name == "leaky_relu") return LayerKind::LeakyRelu;
  if (name == "batchnorm") return LayerKind::BatchNorm;
  if (name == "sigmoid") return LayerKind::Sigmoid;
  if (name == "dense") return LayerKind::Dense;
  if (name == "dt") return LayerKind::DtFixed;
  throw std::invalid_argument("unknown layer kind: '" + name + "'");
}

/** @brief One row of an architecture description; shared by the cost model and the runtime net. */
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int filters = 0;  // output channels (conv/tconv/dense); level count for dt rows
  int kh = 0;
  int kw = 0;
  int stride = 1;
  double alpha = 0.1;  // leaky_relu slope
};

struct TensorShape {
  int h = 0;
  int w = 0;
  int c = 0;

  long long size() const { return static_cast<long long>(h) * w * c; }
  bool operator==(const TensorShape&) const = default;
};

struct ArchTable {
  TensorShape input;
  std::vector<LayerSpec> layers;
};

/** @brief Parse the plain-text table format: an `input HxWxC` line, then one layer per line.
 *
 * Layer lines look like `conv 64 7x7 /2`, `maxpool 2x2 /2`, `upsample 2x2`,
 * `tconv 256 3x3 /2`, `dense 4096`, `dt 8 15x15`. `#` starts a comment.
 */
inline ArchTable parse_table(const std::string& text) {
  ArchTable table;
  bool have_input = false;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = hash == std::string::npos ? raw : raw.substr(0, hash);
    std::istringstream ls(line);
    std::string word;
    std::vector<std::string> words;
    while (ls >> word) words.push_back(word);
    if (words.empty()) continue;

    const auto fail = [&](const std::string& msg) {
      throw std::invalid_argument("table line " + std::to_string(line_no) + ": " + msg);
    };
    const auto parse_kernel = [&](const std::string& s, int& kh, int& kw) {
      const auto x = s.find('x');
      if (x == std::string::npos) fail("expected kernel as KxK: '" + s + "'");
      try {
        kh = std::stoi(s.substr(0, x));
        kw = std::stoi(s.substr(x + 1));
      } catch (const std::exception&) {
        fail("bad kernel: '" + s + "'");
      }
      if (kh < 1 || kw < 1) fail("kernel must be positive");
    };

    std::string head;
    for (char ch : words[0]) head.push_back(static_cast<char>(std::tolower(ch)));

    if (head == "input") {
      if (have_input) fail("duplicate input line");
      int h = 0, w = 0, c = 0;
      if (words.size() == 2) {
        int kh = 0, kw = 0;
        // Accept HxWxC in one token.
        const auto x1 = words[1].find('x');
        const auto x2 = words[1].find('x', x1 + 1);
        if (x1 == std::string::npos || x2 == std::string::npos) fail("expected input HxWxC");
        try {
          h = std::stoi(words[1].substr(0, x1));
          w = std::stoi(words[1].substr(x1 + 1, x2 - x1 - 1));
          c = std::stoi(words[1].substr(x2 + 1));
        } catch (const std::exception&) {
          fail("bad input shape");
        }
        (void)kh;
        (void)kw;
      } else if (words.size() == 4) {
        try {
          h = std::stoi(words[1]);
          w = std::stoi(words[2]);
          c = std::stoi(words[3]);
        } catch (const std::exception&) {
          fail("bad input shape");
        }
      } else {
        fail("expected input HxWxC");
      }
      if (h < 1 || w < 1 || c < 1) fail("input dimensions must be positive");
      table.input = {h, w, c};
      have_input = true;
      continue;
    }

    LayerSpec spec;
    spec.kind = layer_kind_from_name(head);
    std::size_t idx = 1;
    const auto want = [&](const char* what) -> std::string {
      if (idx >= words.size()) fail(std::string("missing ") + what);
      return words[idx++];
    };
    switch (spec.kind) {
      case LayerKind::Conv:
      case LayerKind::TConv: {
        try {
          spec.filters = std::stoi(want("filter count"));
        } catch (const std::exception&) {
          fail("bad filter count");
        }
        parse_kernel(want("kernel"), spec.kh, spec.kw);
        break;
      }
      case LayerKind::MaxPool:
      case LayerKind::Upsample: {
        parse_kernel(want("kernel"), spec.kh, spec.kw);
        break;
      }
      case LayerKind::Dense: {
        try {
          spec.filters = std::stoi(want("unit count"));
        } catch (const std::exception&) {
          fail("bad unit count");
        }
        break;
      }
      case LayerKind::DtFixed: {
        try {
          spec.filters = std::stoi(want("level count"));
        } catch (const std::exception&) {
          fail("bad level count");
        }
        parse_kernel(want("kernel"), spec.kh, spec.kw);
        break;
      }
      case LayerKind::LeakyRelu:
      case LayerKind::BatchNorm:
      case LayerKind::Sigmoid:
        break;
    }
    if (idx < words.size() && words[idx].size() > 1 && words[idx][0] == '/') {
      try {
        spec.stride = std::stoi(words[idx].substr(1));
      } catch (const std::exception&) {
        fail("bad stride");
      }
      if (spec.stride < 1) fail("stride must be >= 1");
      ++idx;
    }
    if (spec.kind == LayerKind::Upsample) spec.stride = 1;
    if (idx < words.size()) fail("trailing tokens: '" + words[idx] + "'");
    if ((spec.kind == LayerKind::Conv || spec.kind == LayerKind::TConv) && spec.filters < 1)
      fail("filter count must be positive");
    if (spec.kind == LayerKind::Dense && spec.filters < 1) fail("unit count must be positive");
    table.layers.push_back(spec);
  }
  if (!have_input) throw std::invalid_argument("table has no input line");
  return table;
}

/** @brief Output shape of a single layer.
 *
 * Convolutions keep spatial extent up to stride (same padding, ceil division);
 * transposed convolutions expand to stride*(in-1)+kernel; pooling requires an
 * exact division; upsampling multiplies by the kernel factor.
 */
inline TensorShape layer_output_shape(const LayerSpec& spec, const TensorShape& in) {
  const auto ceil_div = [](int a, int b) { return (a + b - 1) / b; };
  switch (spec.kind) {
    case LayerKind::Conv:
      return {ceil_div(in.h, spec.stride), ceil_div(in.w, spec.stride), spec.filters};
    case LayerKind::TConv:
      return {spec.stride * (in.h - 1) + spec.kh, spec.stride * (in.w - 1) + spec.kw, spec.filters};
    case LayerKind::MaxPool: {
      if (in.h % spec.stride != 0 || in.w % spec.stride != 0)
        throw std::invalid_argument("maxpool: input not divisible by stride");
      return {in.h / spec.stride, in.w / spec.stride, in.c};
    }
    case LayerKind::Upsample:
      return {in.h * spec.kh, in.w * spec.kw, in.c};
    case LayerKind::Dense:
      return {1, 1, spec.filters};
    case LayerKind::DtFixed:
    case LayerKind::LeakyRelu:
    case LayerKind::BatchNorm:
    case LayerKind::Sigmoid:
      return in;
  }
  throw std::logic_error("unreachable");
}

/** @brief Shapes after every layer, starting from the table's input. */
inline std::vector<TensorShape> infer_shapes(const ArchTable& table) {
  std::vector<TensorShape> shapes;
  shapes.reserve(table.layers.size());
  TensorShape cur = table.input;
  for (const auto& spec : table.layers) {
    cur = layer_output_shape(spec, cur);
    shapes.push_back(cur);
  }
  return shapes;
}

/** @brief Learnable parameter count: kernel volume times filters plus biases; only
 * convolutional, transposed and dense layers carry parameters. */
inline long long layer_params(const LayerSpec& spec, const TensorShape& in) {
  switch (spec.kind) {
    case LayerKind::Conv:
    case LayerKind::TConv:
      return static_cast<long long>(spec.kh) * spec.kw * in.c * spec.filters + spec.filters;
    case LayerKind::Dense:
      return in.size() * spec.filters + spec.filters;
    default:
      return 0;
  }
}

/** @brief Multiply-add operation count (two ops per MAC).
 *
 * Convolutions and the fixed distance-transform stage count per output pixel;
 * transposed convolutions count per input pixel; upsampling counts one copy
 * per output value; pooling is free.
 */
inline long long layer_ops(const LayerSpec& spec, const TensorShape& in, const TensorShape& out) {
  switch (spec.kind) {
    case LayerKind::Conv:
      return 2LL * spec.kh * spec.kw * in.c * spec.filters * out.h * out.w;
    case LayerKind::TConv:
      return 2LL * spec.kh * spec.kw * in.c * spec.filters * in.h * in.w;
    case LayerKind::DtFixed:
      return 2LL * spec.kh * spec.kw * in.c * spec.filters * out.h * out.w;
    case LayerKind::Dense:
      return 2LL * in.size() * spec.filters;
    case LayerKind::Upsample:
      return out.size();
    case LayerKind::MaxPool:
    case LayerKind::LeakyRelu:
    case LayerKind::BatchNorm:
    case LayerKind::Sigmoid:
      return 0;
  }
  throw std::logic_error("unreachable");
}

struct LayerCost {
  LayerSpec spec;
  TensorShape out;
  long long ops = 0;
  long long params = 0;
};

struct CostReport {
  TensorShape input;
  std::vector<LayerCost> rows;
  long long total_ops = 0;
  long long total_params = 0;
};

inline long long count_params(const ArchTable& table) {
  long long total = 0;
  TensorShape cur = table.input;
  for (const auto& spec : table.layers) {
    total += layer_params(spec, cur);
    cur = layer_output_shape(spec, cur);
  }
  return total;
}

inline long long count_ops(const ArchTable& table) {
  long long total = 0;
  TensorShape cur = table.input;
  for (const auto& spec : table.layers) {
    const TensorShape out = layer_output_shape(spec, cur);
    total += layer_ops(spec, cur, out);
    cur = out;
  }
  return total;
}

inline CostReport cost_report(const ArchTable& table) {
  CostReport report;
  report.input = table.input;
  TensorShape cur = table.input;
  for (const auto& spec : table.layers) {
    LayerCost row;
    row.spec = spec;
    row.out = layer_output_shape(spec, cur);
    row.ops = layer_ops(spec, cur, row.out);
    row.params = layer_params(spec, cur);
    report.rows.push_back(row);
    report.total_ops += row.ops;
    report.total_params += row.params;
    cur = row.out;
  }
  return report;
}

/** @brief Round half away from zero at the given number of decimals. */
inline double round_half_up(double value, int decimals = 0) {
  const double scale = std::pow(10.0, decimals);
  return std::floor(value * scale + 0.5) / scale;
}

inline nlohmann::ordered_json cost_report_to_json(const CostReport& report) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    rows.push_back({{"kind", layer_kind_name(row.spec.kind)},
                    {"filters", row.spec.filters},
                    {"kernel", {row.spec.kh, row.spec.kw}},
                    {"stride", row.spec.stride},
                    {"out", {row.out.h, row.out.w, row.out.c}},
                    {"ops", row.ops},
                    {"params", row.params}});
  }
  return {{"input", {report.input.h, report.input.w, report.input.c}},
          {"layers", rows},
          {"total_ops", report.total_ops},
          {"total_params", report.total_params}};
}

}  // namespace gridseg
