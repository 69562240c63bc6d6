#include "nbx/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "nbx/error.hpp"
#include "nbx/rng.hpp"

namespace nbx {

using nlohmann::json;

void MlpModel::validate() const {
  if (input_shape.height <= 0 || input_shape.width <= 0 || input_shape.channels <= 0) {
    throw ShapeError("model input_shape must be positive, got " + to_string(input_shape));
  }
  if (num_classes < 1) throw ShapeError("model num_classes must be >= 1");
  if (layers.empty()) throw ShapeError("model has no layers");
  auto expected = static_cast<int>(input_shape.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string name = "layer " + std::to_string(i);
    if (l.inputs != expected) {
      throw ShapeError(name + ": inputs = " + std::to_string(l.inputs) + " but previous stage has " +
                       std::to_string(expected) + " outputs");
    }
    if (l.outputs < 1) throw ShapeError(name + ": outputs must be >= 1");
    if (l.weights.size() != static_cast<std::size_t>(l.inputs) * l.outputs) {
      throw ShapeError(name + ": weights has " + std::to_string(l.weights.size()) +
                       " values, expected outputs*inputs = " +
                       std::to_string(static_cast<std::size_t>(l.inputs) * l.outputs));
    }
    if (l.biases.size() != static_cast<std::size_t>(l.outputs)) {
      throw ShapeError(name + ": biases has " + std::to_string(l.biases.size()) +
                       " values, expected " + std::to_string(l.outputs));
    }
    expected = l.outputs;
  }
  if (expected != num_classes) {
    throw ShapeError("layer " + std::to_string(layers.size() - 1) + ": outputs = " +
                     std::to_string(expected) + " but num_classes = " +
                     std::to_string(num_classes));
  }
}

namespace {

void check_input(const MlpModel& model, const Image& x) {
  if (x.shape() != model.input_shape) {
    throw ShapeError("image shape " + to_string(x.shape()) + " does not match model input " +
                     to_string(model.input_shape));
  }
}

std::vector<double> affine(const DenseLayer& layer, std::span<const double> in) {
  std::vector<double> out(layer.biases);
  for (int o = 0; o < layer.outputs; ++o) {
    const double* row = layer.weights.data() + static_cast<std::size_t>(o) * layer.inputs;
    double acc = 0.0;
    for (int i = 0; i < layer.inputs; ++i) acc += row[i] * in[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] += acc;
  }
  return out;
}

void activate(Activation act, std::vector<double>& v) {
  if (act == Activation::kRelu) {
    for (double& z : v) z = z > 0.0 ? z : 0.0;
  }
}

std::vector<double> softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace

std::vector<double> logits(const MlpModel& model, const Image& x) {
  check_input(model, x);
  std::vector<double> h(x.data().begin(), x.data().end());
  for (const auto& layer : model.layers) {
    h = affine(layer, h);
    activate(layer.activation, h);
  }
  return h;
}

std::vector<double> classify_full(const MlpModel& model, const Image& x) {
  return softmax(logits(model, x));
}

std::vector<double> analytic_logprob_grad(const MlpModel& model, const Image& x, int label) {
  check_input(model, x);
  if (label < 0 || label >= model.num_classes) {
    throw ConfigError("analytic_logprob_grad: label " + std::to_string(label) +
                      " out of range");
  }
  // Forward, keeping pre-activations for the backward pass.
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<double>> pre;
  std::vector<double> h(x.data().begin(), x.data().end());
  for (const auto& layer : model.layers) {
    inputs.push_back(h);
    pre.push_back(affine(layer, h));
    h = pre.back();
    activate(layer.activation, h);
  }
  // d log p_y / d z = e_y - p.
  std::vector<double> delta = softmax(h);
  for (double& d : delta) d = -d;
  delta[static_cast<std::size_t>(label)] += 1.0;

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& layer = model.layers[li];
    if (layer.activation == Activation::kRelu) {
      for (std::size_t o = 0; o < delta.size(); ++o) {
        if (!(pre[li][o] > 0.0)) delta[o] = 0.0;
      }
    }
    std::vector<double> back(static_cast<std::size_t>(layer.inputs), 0.0);
    for (int o = 0; o < layer.outputs; ++o) {
      const double d = delta[static_cast<std::size_t>(o)];
      if (d == 0.0) continue;
      const double* row = layer.weights.data() + static_cast<std::size_t>(o) * layer.inputs;
      for (int i = 0; i < layer.inputs; ++i) back[static_cast<std::size_t>(i)] += d * row[i];
    }
    delta = std::move(back);
  }
  return delta;
}

namespace {

const char* activation_name(Activation a) {
  return a == Activation::kRelu ? "relu" : "identity";
}

template <typename T>
T field(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ParseError(where + ": missing field '" + key + "'");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + "." + key + ": " + e.what());
  }
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_array(std::ostringstream& os, const std::vector<double>& values) {
  os << '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << ", ";
    os << number(values[i]);
  }
  os << ']';
}

}  // namespace

MlpModel parse_model(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("model file: ") + e.what());
  }
  const std::string root = "model";
  const auto format = field<std::string>(doc, "format", root);
  if (format != "nbx-mlp-v1") throw ParseError(root + ".format: unknown format '" + format + "'");
  MlpModel model;
  const auto shape = field<std::vector<int>>(doc, "input_shape", root);
  if (shape.size() != 3) throw ParseError(root + ".input_shape: expected [h, w, c]");
  model.input_shape = Shape{shape[0], shape[1], shape[2]};
  model.num_classes = field<int>(doc, "num_classes", root);
  if (!doc.contains("layers") || !doc["layers"].is_array()) {
    throw ParseError(root + ": missing array field 'layers'");
  }
  const auto& layers = doc["layers"];
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = root + ".layers[" + std::to_string(i) + "]";
    DenseLayer layer;
    layer.inputs = field<int>(layers[i], "inputs", where);
    layer.outputs = field<int>(layers[i], "outputs", where);
    const auto act = field<std::string>(layers[i], "activation", where);
    if (act == "relu") {
      layer.activation = Activation::kRelu;
    } else if (act == "identity") {
      layer.activation = Activation::kIdentity;
    } else {
      throw ParseError(where + ".activation: unknown activation '" + act + "'");
    }
    layer.weights = field<std::vector<double>>(layers[i], "weights", where);
    layer.biases = field<std::vector<double>>(layers[i], "biases", where);
    model.layers.push_back(std::move(layer));
  }
  model.validate();
  return model;
}

MlpModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_model(ss.str());
  } catch (const ShapeError& e) {
    throw ShapeError(path.string() + ": " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string serialize_model(const MlpModel& model) {
  model.validate();
  std::ostringstream os;
  const auto& s = model.input_shape;
  os << "{\n  \"format\": \"nbx-mlp-v1\",\n  \"input_shape\": [" << s.height << ", " << s.width
     << ", " << s.channels << "],\n  \"num_classes\": " << model.num_classes
     << ",\n  \"layers\": [\n";
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    os << "    {\"inputs\": " << l.inputs << ", \"outputs\": " << l.outputs
       << ", \"activation\": \"" << activation_name(l.activation) << "\",\n     \"weights\": ";
    write_array(os, l.weights);
    os << ",\n     \"biases\": ";
    write_array(os, l.biases);
    os << '}' << (i + 1 < model.layers.size() ? ",\n" : "\n");
  }
  os << "  ]\n}\n";
  return os.str();
}

void save_model(const std::filesystem::path& path, const MlpModel& model) {
  const std::string text = serialize_model(model);
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

Image random_image(const Shape& shape, Rng& rng) {
  Image img(shape);
  for (double& v : img.data()) v = rng.uniform();
  return img;
}

Image random_smooth_image(const Shape& shape, Rng& rng) {
  constexpr int kFreq = 4;
  constexpr double kAmplitude = 0.1;
  Image img(shape);
  for (int ch = 0; ch < shape.channels; ++ch) {
    double coef[kFreq][kFreq];
    for (int u = 0; u < kFreq; ++u) {
      for (int v = 0; v < kFreq; ++v) coef[u][v] = kAmplitude / std::sqrt(1.0 + u + v) * rng.normal();
    }
    for (int r = 0; r < shape.height; ++r) {
      for (int c = 0; c < shape.width; ++c) {
        double value = 0.5;
        for (int u = 0; u < kFreq; ++u) {
          const double cu = std::cos(std::numbers::pi * u * (r + 0.5) / shape.height);
          for (int v = 0; v < kFreq; ++v) {
            value += coef[u][v] * cu * std::cos(std::numbers::pi * v * (c + 0.5) / shape.width);
          }
        }
        img.at(r, c, ch) = std::clamp(value, 0.0, 1.0);
      }
    }
  }
  return img;
}

Image random_disk_image(const Shape& shape, Rng& rng) {
  Image img = random_smooth_image(shape, rng);
  const double outer = 0.5 * std::min(shape.height, shape.width);
  const double inner = outer - 2.0;
  const double cy = 0.5 * (shape.height - 1);
  const double cx = 0.5 * (shape.width - 1);
  for (int r = 0; r < shape.height; ++r) {
    for (int c = 0; c < shape.width; ++c) {
      const double d = std::hypot(r - cy, c - cx);
      const double w = std::clamp((outer - d) / (outer - inner), 0.0, 1.0);
      for (int ch = 0; ch < shape.channels; ++ch) img.at(r, c, ch) *= w;
    }
  }
  return img;
}

Image random_input(InputKind kind, const Shape& shape, Rng& rng) {
  switch (kind) {
    case InputKind::kUniform: return random_image(shape, rng);
    case InputKind::kSmooth: return random_smooth_image(shape, rng);
    case InputKind::kDisk: return random_disk_image(shape, rng);
  }
  return random_image(shape, rng);
}

namespace {

// Separable Gaussian blur of one weight row laid out as an (h, w, c) image.
void smooth_row(std::span<double> row, const Shape& shape, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  }
  const double norm_before = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
  Image field(shape, std::vector<double>(row.begin(), row.end()));
  auto blur = [&](bool along_rows) {
    Image out(shape);
    for (int r = 0; r < shape.height; ++r) {
      for (int c = 0; c < shape.width; ++c) {
        for (int ch = 0; ch < shape.channels; ++ch) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            const int rr = along_rows ? r + i : r;
            const int cc = along_rows ? c : c + i;
            if (rr < 0 || rr >= shape.height || cc < 0 || cc >= shape.width) continue;
            acc += kernel[static_cast<std::size_t>(i + radius)] * field.at(rr, cc, ch);
          }
          out.at(r, c, ch) = acc;
        }
      }
    }
    field = std::move(out);
  };
  blur(true);
  blur(false);
  const auto data = field.data();
  const double norm_after = std::sqrt(std::inner_product(data.begin(), data.end(), data.begin(), 0.0));
  for (std::size_t i = 0; i < row.size(); ++i) {
    row[i] = norm_after > 0.0 ? data[i] * norm_before / norm_after : 0.0;
  }
}

}  // namespace

MlpModel generate_model(const ModelGenOptions& options) {
  if (options.num_classes < 2) throw ConfigError("model gen: need at least two classes");
  if (!(options.weight_scale > 0.0)) throw ConfigError("model gen: weight_scale must be > 0");
  Rng rng(options.seed);
  MlpModel model;
  model.input_shape = options.input_shape;
  model.num_classes = options.num_classes;

  std::vector<int> widths = options.hidden;
  widths.push_back(options.num_classes);
  int fan_in = static_cast<int>(options.input_shape.size());
  for (std::size_t i = 0; i < widths.size(); ++i) {
    DenseLayer layer;
    layer.inputs = fan_in;
    layer.outputs = widths[i];
    layer.activation = i + 1 < widths.size() ? Activation::kRelu : Activation::kIdentity;
    const double stddev = options.weight_scale * std::sqrt(2.0 / fan_in);
    layer.weights.resize(static_cast<std::size_t>(fan_in) * widths[i]);
    for (double& w : layer.weights) w = stddev * rng.normal();
    layer.biases.assign(static_cast<std::size_t>(widths[i]), 0.0);
    if (i == 0 && options.weight_smoothing > 0.0) {
      for (int o = 0; o < layer.outputs; ++o) {
        smooth_row(std::span<double>(layer.weights).subspan(static_cast<std::size_t>(o) * fan_in,
                                                            static_cast<std::size_t>(fan_in)),
                   options.input_shape, options.weight_smoothing);
      }
    }
    if (i == 0) {
      for (int o = 0; o < layer.outputs; ++o) {
        double row_sum = 0.0;
        for (int in = 0; in < layer.inputs; ++in) row_sum += layer.weight(o, in);
        layer.biases[static_cast<std::size_t>(o)] = -0.5 * row_sum;
      }
    }
    model.layers.push_back(std::move(layer));
    fan_in = widths[i];
  }

  if (options.calibration_inputs > 0) {
    Rng calib = rng.split(1);
    std::vector<double> mean(static_cast<std::size_t>(options.num_classes), 0.0);
    for (int n = 0; n < options.calibration_inputs; ++n) {
      const auto z = logits(model, random_input(options.calibration_kind, model.input_shape, calib));
      for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += z[c];
    }
    auto& out_bias = model.layers.back().biases;
    for (std::size_t c = 0; c < mean.size(); ++c) {
      out_bias[c] -= mean[c] / options.calibration_inputs;
    }
  }
  model.validate();
  return model;
}

ModelOracle::ModelOracle(const MlpModel& model, OutputMode mode, int k,
                         std::optional<ScoreTransform> transform)
    : model_(model), mode_(mode), k_(k), transform_(transform) {
  model_.validate();
  if (mode_ == OutputMode::kTopK && k_ < 1) throw ConfigError("top-k oracle needs k >= 1");
  if (transform_ && !(transform_->scale > 0.0)) {
    throw ConfigError("score transform scale must be positive");
  }
}

ClassifierOutput ModelOracle::classify(const Image& x) {
  auto probs = classify_full(model_, x);
  if (mode_ == OutputMode::kFull) return ClassifierOutput::full(std::move(probs));
  return truncate_topk(probs, k_, transform_);
}

}  // namespace nbx
