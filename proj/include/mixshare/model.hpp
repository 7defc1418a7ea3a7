#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixshare/checkpoint.hpp"
#include "mixshare/masks.hpp"
#include "mixshare/ops.hpp"
#include "mixshare/rng.hpp"
#include "mixshare/tensor.hpp"

namespace mixshare {

enum class InitMode { independent, identical, colinear };

std::string init_mode_name(InitMode mode);
InitMode parse_init_mode(const std::string& name);

struct MimoConfig {
  int m = 2;
  int depth = 10;
  int width = 1;
  int num_classes = 10;
  int in_channels = 3;
  UnmixMode unmix;
  InitMode init = InitMode::independent;
  /// Start classifier weights at zero instead of He-normal, so that their L1
  /// histograms reflect learned structure only.
  bool zero_init_heads = false;

  std::vector<std::string> violations() const;
  int blocks_per_group() const { return (depth - 4) / 6; }
  std::int64_t encoder_channels() const { return 16; }
  std::int64_t final_channels() const { return 64 * static_cast<std::int64_t>(width); }
};

/// Pre-activation wide residual block: bn-relu-conv3x3-bn-relu-conv3x3 plus
/// an identity or 1x1 projection shortcut.
struct ResidualBlock {
  BatchNorm2d bn1;
  Tensor conv1;
  BatchNorm2d bn2;
  Tensor conv2;
  Tensor shortcut;  // undefined when the shortcut is the identity
  std::int64_t stride = 1;

  Tensor forward(const Tensor& x, bool training);
};

struct Classifier {
  Tensor weight;  // num_classes x features
  Tensor bias;
};

/// M encoders, a shared WRN core, and M dense heads.
///
/// Parameter names: `encoder{i}.weight`, `core.block{g}.{b}.*`,
/// `core.final_bn.*`, `classifier{i}.weight|bias`.
class MimoModel {
 public:
  MimoModel(const MimoConfig& config, Rng& rng);

  const MimoConfig& config() const { return config_; }

  std::vector<Tensor> encoders;
  std::vector<std::vector<ResidualBlock>> groups;
  BatchNorm2d final_bn;
  std::vector<Classifier> classifiers;

  Tensor encode(int i, const Tensor& x) const;
  /// Residual groups followed by the final bn-relu. When `group_outputs` is
  /// given, the output of each residual group is appended to it.
  Tensor core(const Tensor& mixed, bool training, std::vector<Tensor>* group_outputs = nullptr);
  Tensor head(int i, const Tensor& pooled) const;

  /// Trainable tensors, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  /// Parameters plus batchnorm running statistics (checkpoint contents).
  NamedTensors state();
  /// Copies values from `saved` into this model; names and shapes must match.
  void load_state(const NamedTensors& saved);

  std::vector<Tensor> parameters();
  std::int64_t parameter_count();
  std::int64_t core_parameter_count();

 private:
  MimoConfig config_;
};

/// Draws encoder 0 with He-normal init and derives the other encoders from it
/// according to `mode` (independent draws, copies, or per-channel positive
/// rescalings by U[0.5, 2]).
void init_encoders(MimoModel& model, InitMode mode, Rng& rng);

struct TrainForward {
  std::vector<Tensor> logits;       // M tensors N x K
  Tensor features;                  // pre-unmix final maps N x C x H' x W'
  std::vector<Tensor> group_outputs;
};

/// Mixing at encoder resolution, core, fadeout-adjusted unmixing, pooling,
/// and one head per branch. `training` selects batch statistics in batchnorm.
TrainForward forward_train(MimoModel& model, std::span<const Tensor> inputs,
                           const std::vector<MaskPair>& masks, double r, bool training);

struct InferenceOutput {
  Tensor ensemble_probs;                // N x K
  std::vector<Tensor> per_subnet_probs;  // M x (N x K)
};

/// Feeds x to every encoder, averages the encodings, and ensembles the heads
/// by probability averaging. Batchnorm uses running statistics.
InferenceOutput forward_inference(MimoModel& model, const Tensor& x);

}  // namespace mixshare
