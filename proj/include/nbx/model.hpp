#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nbx/image.hpp"
#include "nbx/oracle.hpp"
#include "nbx/rng.hpp"

namespace nbx {

enum class Activation { kRelu, kIdentity };

struct DenseLayer {
  int inputs = 0;
  int outputs = 0;
  std::vector<double> weights;  // outputs x inputs, row-major
  std::vector<double> biases;   // outputs
  Activation activation = Activation::kIdentity;

  double weight(int out, int in) const {
    return weights[static_cast<std::size_t>(out) * inputs + in];
  }
};

/// Dense feed-forward classifier ending in softmax.
struct MlpModel {
  Shape input_shape;
  int num_classes = 0;
  std::vector<DenseLayer> layers;

  /// Checks dimension chaining; throws ShapeError naming the offending layer.
  void validate() const;
};

/// Softmax of the final layer's logits.
std::vector<double> classify_full(const MlpModel& model, const Image& x);

/// Final-layer pre-softmax values. White-box; used by tests and tooling only.
std::vector<double> logits(const MlpModel& model, const Image& x);

/// Exact gradient of log P(label | x) with respect to x, by backpropagation.
/// White-box; used only to check black-box estimates.
std::vector<double> analytic_logprob_grad(const MlpModel& model, const Image& x, int label);

// Model file: a JSON document
//   {
//     "format": "nbx-mlp-v1",
//     "input_shape": [h, w, c],
//     "num_classes": K,
//     "layers": [
//       {"inputs": I, "outputs": O, "activation": "relu" | "identity",
//        "weights": [O*I numbers, row-major, row o = output unit o],
//        "biases": [O numbers]},
//       ...
//     ]
//   }
// The first layer's inputs must equal h*w*c, each layer's inputs the previous
// layer's outputs, and the last layer's outputs num_classes. Numbers are written with
// 17 significant digits, so save-then-load reproduces every parameter bit for bit.

MlpModel load_model(const std::filesystem::path& path);
MlpModel parse_model(const std::string& text);
void save_model(const std::filesystem::path& path, const MlpModel& model);
std::string serialize_model(const MlpModel& model);

/// How synthetic inputs are drawn.
enum class InputKind {
  kUniform,  // i.i.d. uniform [0, 1) pixels
  kSmooth,   // low-frequency cosine mixture around mid-grey, see random_smooth_image
  kDisk,     // kSmooth faded to black outside a centred disk, see random_disk_image
};

struct ModelGenOptions {
  std::uint64_t seed = 0;
  Shape input_shape{16, 16, 1};
  std::vector<int> hidden{64};
  int num_classes = 10;
  /// Multiplies the He-initialised weights. Larger values give sharper output
  /// probabilities; the top label of any input is unchanged.
  double weight_scale = 1.0;
  /// Random inputs used to centre the output biases so every class gets a share
  /// of the input distribution. 0 disables calibration.
  int calibration_inputs = 512;
  InputKind calibration_kind = InputKind::kDisk;
  /// When > 0, each first-layer weight row, viewed as an image, is blurred with a
  /// Gaussian of this standard deviation in pixels and rescaled to its original
  /// norm. Spatially smooth filters respond similarly to slightly rotated inputs.
  double weight_smoothing = 0.0;
};

/// Seeded random MLP. First-layer biases are set to -W * 0.5 so a mid-grey input
/// maps to zero pre-activations; output biases subtract the mean logit over
/// `calibration_inputs` random images of `calibration_kind`.
MlpModel generate_model(const ModelGenOptions& options);

/// Image with i.i.d. uniform [0, 1) pixels.
Image random_image(const Shape& shape, Rng& rng);

/// 0.5 + sum over the 4x4 lowest 2-D cosine frequencies (u, v) of
/// a_uvc cos(pi u (r + 0.5) / h) cos(pi v (c + 0.5) / w), with a_uvc ~ N(0, 0.1^2 / (1 + u + v))
/// drawn per channel, clipped to [0, 1].
Image random_smooth_image(const Shape& shape, Rng& rng);

/// random_smooth_image times a radial window: 1 within radius min(h, w) / 2 - 2 of
/// the centre, falling linearly to 0 at min(h, w) / 2. Rotations about the centre
/// leave the black surround black.
Image random_disk_image(const Shape& shape, Rng& rng);

Image random_input(InputKind kind, const Shape& shape, Rng& rng);

/// In-process black box over a loaded model.
class ModelOracle final : public Oracle {
 public:
  explicit ModelOracle(const MlpModel& model, OutputMode mode = OutputMode::kFull, int k = 1,
                       std::optional<ScoreTransform> transform = std::nullopt);

  ClassifierOutput classify(const Image& x) override;

  const MlpModel& model() const noexcept { return model_; }

 private:
  const MlpModel& model_;
  OutputMode mode_;
  int k_;
  std::optional<ScoreTransform> transform_;
};

}  // namespace nbx
