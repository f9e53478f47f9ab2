#pragma once

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "deqflow/numerics/rng.hpp"
#include "deqflow/numerics/serialize.hpp"
#include "deqflow/numerics/tensor.hpp"

namespace deqflow::toyflow {

enum class Variant { raft, gma };

inline std::string to_string(Variant v) { return v == Variant::raft ? "raft" : "gma"; }
inline Variant parse_variant(const std::string& s) {
  if (s == "raft") return Variant::raft;
  if (s == "gma") return Variant::gma;
  throw std::invalid_argument("unknown model variant '" + s + "'");
}

/// Architecture hyperparameters. The encoders are fixed at two strided
/// convolutions (k7/s4 to 16 channels, then k3/s2), so the feature grid is
/// 1/8 of the image.
struct ModelConfig {
  static constexpr std::size_t stride = 8;
  static constexpr std::size_t encoder_mid = 16;

  Variant variant = Variant::raft;
  std::size_t image_height = 64, image_width = 64;
  std::size_t feature_channels = 32;
  std::size_t context_channels = 32;
  std::size_t hidden_channels = 32;
  std::size_t motion_channels = 32;
  std::size_t attention_channels = 16;
  std::size_t levels = 2;
  std::size_t radius = 3;
  std::size_t kernel = 3;
  double head_init_scale = 0.1;
  std::uint64_t init_seed = 0;

  std::size_t feature_height() const { return image_height / stride; }
  std::size_t feature_width() const { return image_width / stride; }
  std::size_t window() const { return 2 * radius + 1; }
  std::size_t corr_channels() const { return levels * window() * window(); }
  std::size_t motion_in_channels() const { return context_channels + 2 + corr_channels(); }
  /// Channels of the GRU input [x, q], or [x_hat, x, q] for GMA.
  std::size_t gru_in_channels() const {
    return motion_channels * (variant == Variant::gma ? 2 : 1) + context_channels;
  }

  void validate() const {
    if (image_height == 0 || image_width == 0 || image_height % stride || image_width % stride)
      throw std::invalid_argument("model: image size must be a positive multiple of 8");
    if (feature_channels == 0 || context_channels == 0 || hidden_channels == 0 || motion_channels == 0 ||
        attention_channels == 0)
      throw std::invalid_argument("model: channel counts must be positive");
    if (levels == 0) throw std::invalid_argument("model: levels must be >= 1");
    const std::size_t div = std::size_t{1} << (levels - 1);
    if (feature_height() % div || feature_width() % div)
      throw std::invalid_argument("model: feature grid not divisible by 2^(levels-1)");
    if (kernel % 2 == 0) throw std::invalid_argument("model: kernel must be odd");
    if (!(head_init_scale >= 0)) throw std::invalid_argument("model: head_init_scale must be >= 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"variant", to_string(c.variant)},
       {"image_height", c.image_height},
       {"image_width", c.image_width},
       {"feature_channels", c.feature_channels},
       {"context_channels", c.context_channels},
       {"hidden_channels", c.hidden_channels},
       {"motion_channels", c.motion_channels},
       {"attention_channels", c.attention_channels},
       {"levels", c.levels},
       {"radius", c.radius},
       {"kernel", c.kernel},
       {"head_init_scale", c.head_init_scale},
       {"init_seed", c.init_seed}};
}

/// Strict: unknown keys are rejected, missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("model: expected an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "variant") c.variant = parse_variant(v.get<std::string>());
    else if (key == "image_height") c.image_height = v.get<std::size_t>();
    else if (key == "image_width") c.image_width = v.get<std::size_t>();
    else if (key == "feature_channels") c.feature_channels = v.get<std::size_t>();
    else if (key == "context_channels") c.context_channels = v.get<std::size_t>();
    else if (key == "hidden_channels") c.hidden_channels = v.get<std::size_t>();
    else if (key == "motion_channels") c.motion_channels = v.get<std::size_t>();
    else if (key == "attention_channels") c.attention_channels = v.get<std::size_t>();
    else if (key == "levels") c.levels = v.get<std::size_t>();
    else if (key == "radius") c.radius = v.get<std::size_t>();
    else if (key == "kernel") c.kernel = v.get<std::size_t>();
    else if (key == "head_init_scale") c.head_init_scale = v.get<double>();
    else if (key == "init_seed") c.init_seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("model: unknown key '" + key + "'");
  }
}

struct ParamEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Named slices of one flat parameter vector.
class ParamLayout {
 public:
  void add(std::string name, Shape shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    const std::size_t n = shape_numel(shape);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(shape), total_, n});
    total_ += n;
  }

  const ParamEntry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t offset(const std::string& name) const { return at(name).offset; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return total_; }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

inline ParamLayout build_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t k = c.kernel, mid = ModelConfig::encoder_mid;
  ParamLayout l;
  for (const char* net : {"fnet", "cnet"}) {
    const std::string p(net);
    const std::size_t out = p == "fnet" ? c.feature_channels : c.context_channels;
    l.add(p + ".conv1.weight", {mid, 3, 7, 7});
    l.add(p + ".conv1.bias", {mid});
    l.add(p + ".conv2.weight", {out, mid, 3, 3});
    l.add(p + ".conv2.bias", {out});
  }
  l.add("motion.weight", {c.motion_channels, c.motion_in_channels(), k, k});
  l.add("motion.bias", {c.motion_channels});
  const std::size_t gru_in = c.hidden_channels + c.gru_in_channels();
  for (const char* gate : {"gru.update", "gru.reset", "gru.candidate"}) {
    l.add(std::string(gate) + ".weight", {c.hidden_channels, gru_in, k, k});
    l.add(std::string(gate) + ".bias", {c.hidden_channels});
  }
  l.add("head.weight", {2, c.hidden_channels, k, k});
  l.add("head.bias", {2});
  if (c.variant == Variant::gma) {
    l.add("attn.query.weight", {c.attention_channels, c.context_channels, 1, 1});
    l.add("attn.key.weight", {c.attention_channels, c.context_channels, 1, 1});
    l.add("attn.value.weight", {c.motion_channels, c.motion_channels, 1, 1});
  }
  return l;
}

/// Model configuration plus its flat parameter vector theta.
struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  Vec theta;

  explicit ModelParams(const ModelConfig& c) : config(c), layout(build_layout(c)), theta(layout.size(), 0.0) {}

  double* ptr(const std::string& name) { return theta.data() + layout.offset(name); }
  const double* ptr(const std::string& name) const { return theta.data() + layout.offset(name); }

  Tensor tensor(const std::string& name) const {
    const ParamEntry& e = layout.at(name);
    const auto b = theta.begin() + static_cast<std::ptrdiff_t>(e.offset);
    return Tensor(e.shape, Vec(b, b + static_cast<std::ptrdiff_t>(e.size)));
  }
  void set(const std::string& name, const Tensor& t) {
    const ParamEntry& e = layout.at(name);
    if (t.shape() != e.shape)
      throw ShapeError("parameter '" + name + "' expects " + shape_str(e.shape) + ", got " + shape_str(t.shape()));
    std::copy(t.values().begin(), t.values().end(), theta.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
};

/// Scaled-normal initialisation: weights ~ N(0, gain^2 / fan_in), biases 0.
/// ReLU layers use gain sqrt(2); the flow head is scaled by head_init_scale.
inline ModelParams init_params(const ModelConfig& c) {
  ModelParams p(c);
  Rng rng = Rng(c.init_seed).split(0x1417);
  for (const ParamEntry& e : p.layout.entries()) {
    if (e.shape.size() != 4) continue;
    const double fan_in = static_cast<double>(e.shape[1] * e.shape[2] * e.shape[3]);
    double gain = 1.0;
    if (e.name.starts_with("fnet") || e.name.starts_with("cnet") || e.name == "motion.weight") gain = std::sqrt(2.0);
    if (e.name == "head.weight") gain = c.head_init_scale;
    const double sd = gain / std::sqrt(fan_in);
    for (std::size_t i = 0; i < e.size; ++i) p.theta[e.offset + i] = sd * rng.normal();
  }
  return p;
}

/// Writes manifest.json + weights.bin (one entry per parameter) and model.json.
inline void save_checkpoint(const std::filesystem::path& dir, const ModelParams& p) {
  std::vector<NamedTensor> named;
  for (const ParamEntry& e : p.layout.entries()) named.emplace_back(e.name, p.tensor(e.name));
  save_tensors(dir, named);
  std::ofstream(dir / "model.json", std::ios::trunc) << nlohmann::json(p.config).dump(2) << '\n';
}

inline ModelParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw FormatError("missing model.json in " + dir.string());
  ModelConfig cfg;
  try {
    cfg = nlohmann::json::parse(in).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model.json: ") + e.what());
  }
  ModelParams p(cfg);
  const std::vector<NamedTensor> named = load_tensors(dir);
  if (named.size() != p.layout.entries().size())
    throw FormatError("checkpoint holds " + std::to_string(named.size()) + " tensors, model expects " +
                      std::to_string(p.layout.entries().size()));
  for (const auto& [name, t] : named) {
    if (!p.layout.contains(name)) throw FormatError("checkpoint has unexpected tensor '" + name + "'");
    p.set(name, t);
  }
  return p;
}

}  // namespace deqflow::toyflow
