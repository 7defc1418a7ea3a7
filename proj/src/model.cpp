#include "mixshare/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mixshare {

namespace {

Tensor he_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor conv_weight(std::int64_t out_c, std::int64_t in_c, std::int64_t k, Rng& rng) {
  return he_normal({out_c, in_c, k, k}, in_c * k * k, rng);
}

void add_bn(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
            BatchNorm2d& bn, bool with_stats) {
  out.emplace_back(prefix + ".weight", bn.weight);
  out.emplace_back(prefix + ".bias", bn.bias);
  if (with_stats) {
    out.emplace_back(prefix + ".running_mean", bn.running_mean);
    out.emplace_back(prefix + ".running_var", bn.running_var);
  }
}

}  // namespace

std::string init_mode_name(InitMode mode) {
  switch (mode) {
    case InitMode::independent: return "independent";
    case InitMode::identical: return "identical";
    case InitMode::colinear: return "colinear";
  }
  return "independent";
}

InitMode parse_init_mode(const std::string& name) {
  if (name == "independent") return InitMode::independent;
  if (name == "identical") return InitMode::identical;
  if (name == "colinear") return InitMode::colinear;
  throw std::invalid_argument("unknown init mode '" + name +
                              "' (expected independent|identical|colinear)");
}

std::vector<std::string> MimoConfig::violations() const {
  std::vector<std::string> out;
  if (m < 2) out.push_back("m must be >= 2, got " + std::to_string(m));
  if (depth < 10 || (depth - 4) % 6 != 0) {
    out.push_back("depth must satisfy (depth - 4) % 6 == 0 with depth >= 10, got " +
                  std::to_string(depth));
  }
  if (width < 1) out.push_back("width must be >= 1, got " + std::to_string(width));
  if (num_classes < 2) out.push_back("num_classes must be >= 2, got " + std::to_string(num_classes));
  if (in_channels < 1) out.push_back("in_channels must be >= 1");
  for (auto& v : unmix.violations()) out.push_back(std::move(v));
  if (m > 2 && unmix.kind != UnmixMode::Kind::none) {
    out.push_back("unmixing requires m == 2 (masked mixing is only defined for two inputs)");
  }
  return out;
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
  const Tensor pre = relu(batchnorm2d(x, bn1, training));
  Tensor y = conv2d(pre, conv1, stride, 1);
  y = conv2d(relu(batchnorm2d(y, bn2, training)), conv2, 1, 1);
  const Tensor skip = shortcut.defined() ? conv2d(pre, shortcut, stride, 0) : x;
  return add(y, skip);
}

MimoModel::MimoModel(const MimoConfig& config, Rng& rng) : config_(config) {
  const auto problems = config.violations();
  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
  const std::int64_t w = config.width;
  const std::int64_t widths[3] = {16 * w, 32 * w, 64 * w};
  std::int64_t in_c = config.encoder_channels();
  for (int g = 0; g < 3; ++g) {
    std::vector<ResidualBlock> blocks;
    for (int b = 0; b < config.blocks_per_group(); ++b) {
      ResidualBlock block;
      const auto out_c = widths[g];
      block.stride = (g > 0 && b == 0) ? 2 : 1;
      block.bn1 = BatchNorm2d(in_c);
      block.conv1 = conv_weight(out_c, in_c, 3, rng);
      block.bn2 = BatchNorm2d(out_c);
      block.conv2 = conv_weight(out_c, out_c, 3, rng);
      if (in_c != out_c || block.stride != 1) block.shortcut = conv_weight(out_c, in_c, 1, rng);
      blocks.push_back(std::move(block));
      in_c = out_c;
    }
    groups.push_back(std::move(blocks));
  }
  final_bn = BatchNorm2d(in_c);
  for (int i = 0; i < config.m; ++i) {
    Classifier head;
    head.weight = he_normal({config.num_classes, in_c}, in_c, rng);
    if (config.zero_init_heads) std::ranges::fill(head.weight.data(), 0.0);
    head.bias = Tensor::zeros({config.num_classes});
    head.bias.set_requires_grad(true);
    classifiers.push_back(std::move(head));
  }
  encoders.resize(static_cast<std::size_t>(config.m));
  init_encoders(*this, config.init, rng);
}

void init_encoders(MimoModel& model, InitMode mode, Rng& rng) {
  const auto& cfg = model.config();
  const std::int64_t out_c = cfg.encoder_channels();
  const std::int64_t in_c = cfg.in_channels;
  auto& enc = model.encoders;
  enc.resize(static_cast<std::size_t>(cfg.m));
  enc[0] = conv_weight(out_c, in_c, 3, rng);
  const std::int64_t slab = in_c * 9;
  for (std::size_t i = 1; i < enc.size(); ++i) {
    switch (mode) {
      case InitMode::independent:
        enc[i] = conv_weight(out_c, in_c, 3, rng);
        break;
      case InitMode::identical:
        enc[i] = enc[0].clone();
        enc[i].set_requires_grad(true);
        break;
      case InitMode::colinear: {
        enc[i] = enc[0].clone();
        enc[i].set_requires_grad(true);
        auto values = enc[i].data();
        for (std::int64_t c = 0; c < out_c; ++c) {
          const double factor = rng.uniform(0.5, 2.0);
          for (std::int64_t k = 0; k < slab; ++k) values[c * slab + k] *= factor;
        }
        break;
      }
    }
  }
}

Tensor MimoModel::encode(int i, const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.in_channels) {
    throw ShapeError("encode: expected N x " + std::to_string(config_.in_channels) +
                     " x H x W input, got " + shape_str(x.shape()));
  }
  return conv2d(x, encoders.at(static_cast<std::size_t>(i)), 1, 1);
}

Tensor MimoModel::core(const Tensor& mixed, bool training, std::vector<Tensor>* group_outputs) {
  Tensor h = mixed;
  for (auto& blocks : groups) {
    for (auto& block : blocks) h = block.forward(h, training);
    if (group_outputs) group_outputs->push_back(h);
  }
  return relu(batchnorm2d(h, final_bn, training));
}

Tensor MimoModel::head(int i, const Tensor& pooled) const {
  const auto& c = classifiers.at(static_cast<std::size_t>(i));
  return linear(pooled, c.weight, c.bias);
}

std::vector<std::pair<std::string, Tensor>> MimoModel::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < encoders.size(); ++i) {
    out.emplace_back("encoder" + std::to_string(i) + ".weight", encoders[i]);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t b = 0; b < groups[g].size(); ++b) {
      auto& blk = groups[g][b];
      const auto p = "core.block" + std::to_string(g + 1) + "." + std::to_string(b);
      add_bn(out, p + ".bn1", blk.bn1, false);
      out.emplace_back(p + ".conv1.weight", blk.conv1);
      add_bn(out, p + ".bn2", blk.bn2, false);
      out.emplace_back(p + ".conv2.weight", blk.conv2);
      if (blk.shortcut.defined()) out.emplace_back(p + ".shortcut.weight", blk.shortcut);
    }
  }
  add_bn(out, "core.final_bn", final_bn, false);
  for (std::size_t i = 0; i < classifiers.size(); ++i) {
    out.emplace_back("classifier" + std::to_string(i) + ".weight", classifiers[i].weight);
    out.emplace_back("classifier" + std::to_string(i) + ".bias", classifiers[i].bias);
  }
  return out;
}

NamedTensors MimoModel::state() {
  NamedTensors out = named_parameters();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t b = 0; b < groups[g].size(); ++b) {
      auto& blk = groups[g][b];
      const auto p = "core.block" + std::to_string(g + 1) + "." + std::to_string(b);
      out.emplace_back(p + ".bn1.running_mean", blk.bn1.running_mean);
      out.emplace_back(p + ".bn1.running_var", blk.bn1.running_var);
      out.emplace_back(p + ".bn2.running_mean", blk.bn2.running_mean);
      out.emplace_back(p + ".bn2.running_var", blk.bn2.running_var);
    }
  }
  out.emplace_back("core.final_bn.running_mean", final_bn.running_mean);
  out.emplace_back("core.final_bn.running_var", final_bn.running_var);
  return out;
}

void MimoModel::load_state(const NamedTensors& saved) {
  auto mine = state();
  if (mine.size() != saved.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(saved.size()) +
                             " tensors, model expects " + std::to_string(mine.size()));
  }
  for (std::size_t i = 0; i < mine.size(); ++i) {
    auto& [name, dst] = mine[i];
    const auto& [saved_name, src] = saved[i];
    if (name != saved_name || dst.shape() != src.shape()) {
      throw std::runtime_error("checkpoint tensor " + std::to_string(i) + " is '" + saved_name +
                               "' " + shape_str(src.shape()) + ", model expects '" + name + "' " +
                               shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

std::vector<Tensor> MimoModel::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::int64_t MimoModel::parameter_count() {
  std::int64_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

std::int64_t MimoModel::core_parameter_count() {
  std::int64_t n = 0;
  for (auto& [name, t] : named_parameters()) {
    if (name.rfind("core.", 0) == 0) n += t.numel();
  }
  return n;
}

TrainForward forward_train(MimoModel& model, std::span<const Tensor> inputs,
                           const std::vector<MaskPair>& masks, double r, bool training) {
  const auto& cfg = model.config();
  if (static_cast<int>(inputs.size()) != cfg.m) {
    throw std::invalid_argument("forward_train: model has " + std::to_string(cfg.m) +
                                " inputs, got " + std::to_string(inputs.size()));
  }
  std::vector<Tensor> encoded;
  for (int i = 0; i < cfg.m; ++i) encoded.push_back(model.encode(i, inputs[static_cast<std::size_t>(i)]));

  Tensor mixed;
  if (cfg.m == 2) {
    const auto h = encoded[0].dim(2);
    const auto w = encoded[0].dim(3);
    std::vector<MaskPair> resized;
    const std::vector<MaskPair>* use = &masks;
    if (!masks.empty() && (masks.front().height != h || masks.front().width != w)) {
      for (const auto& m : masks) {
        MaskPair small;
        small.height = h;
        small.width = w;
        small.mask = downsample_mask(m.mask, m.height, m.width, h, w);
        small.kappa = m.kappa;
        resized.push_back(std::move(small));
      }
      use = &resized;
    }
    mixed = mix(encoded, *use, /*training=*/true);
  } else {
    // Summation-style aggregation (as a mean) for M > 2.
    mixed = mean_of(encoded);
  }

  TrainForward out;
  out.features = model.core(mixed, training, &out.group_outputs);

  std::vector<Tensor> branches;
  const bool unmixing = cfg.m == 2 && cfg.unmix.kind != UnmixMode::Kind::none && r < 1.0;
  if (unmixing) {
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
    for (const auto& m : masks) {
      auto [a, b] = effective_masks(m, r);
      first.push_back(std::move(a));
      second.push_back(std::move(b));
    }
    const auto fh = out.features.dim(2);
    const auto fw = out.features.dim(3);
    const auto src_h = masks.front().height;
    const auto src_w = masks.front().width;
    const Tensor maps[2] = {stack_maps(first, src_h, src_w, fh, fw),
                            stack_maps(second, src_h, src_w, fh, fw)};
    branches = unmix(out.features, maps, cfg.unmix);
  } else {
    branches.assign(static_cast<std::size_t>(cfg.m), out.features);
  }

  if (!unmixing) {
    const Tensor pooled = global_avg_pool(out.features);
    for (int i = 0; i < cfg.m; ++i) out.logits.push_back(model.head(i, pooled));
  } else {
    for (int i = 0; i < cfg.m; ++i) {
      out.logits.push_back(model.head(i, global_avg_pool(branches[static_cast<std::size_t>(i)])));
    }
  }
  return out;
}

InferenceOutput forward_inference(MimoModel& model, const Tensor& x) {
  const auto& cfg = model.config();
  std::vector<Tensor> encoded;
  for (int i = 0; i < cfg.m; ++i) encoded.push_back(model.encode(i, x));
  const Tensor features = model.core(mean_of(encoded), /*training=*/false);
  const Tensor pooled = global_avg_pool(features);

  InferenceOutput out;
  for (int i = 0; i < cfg.m; ++i) out.per_subnet_probs.push_back(softmax_rows(model.head(i, pooled)));
  out.ensemble_probs = mean_of(out.per_subnet_probs);
  return out;
}

}  // namespace mixshare
