#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lors/errors.hpp"
#include "lors/graph.hpp"
#include "lors/random.hpp"
#include "lors/tensor.hpp"

namespace lors {

// Image-text contrastive (ITC) model: two encoders producing unit-norm
// embeddings whose scaled dot products are the similarity logits.

enum class EncoderKind { Linear, Mlp };

/// Encoder architecture. Hidden layers use tanh; no layer has a bias.
struct EncoderSpec {
  EncoderKind kind = EncoderKind::Linear;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::vector<std::size_t> hidden;

  static EncoderSpec linear(std::size_t in, std::size_t out) { return {EncoderKind::Linear, in, out, {}}; }
  static EncoderSpec mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t out) {
    return {EncoderKind::Mlp, in, out, std::move(hidden)};
  }

  /// Layer widths from input to output.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    if (kind == EncoderKind::Mlp) w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(output_dim);
    return w;
  }

  std::size_t layer_count() const { return widths().size() - 1; }

  std::size_t param_count() const {
    const auto w = widths();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) n += w[l] * w[l + 1];
    return n;
  }

  void validate() const {
    if (input_dim == 0 || output_dim == 0) throw ConfigError("encoder dimensions must be >= 1");
    if (kind == EncoderKind::Mlp) {
      if (hidden.empty()) throw ConfigError("mlp encoder needs at least one hidden layer");
      for (auto h : hidden) {
        if (h == 0) throw ConfigError("mlp hidden sizes must be >= 1");
      }
    } else if (!hidden.empty()) {
      throw ConfigError("linear encoder cannot have hidden layers");
    }
  }

  std::string name() const {
    if (kind == EncoderKind::Linear) return "linear";
    std::string s = "mlp";
    for (auto h : hidden) s += "-" + std::to_string(h);
    return s;
  }

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

inline nlohmann::json to_json(const EncoderSpec& s) {
  return {{"kind", s.kind == EncoderKind::Linear ? "linear" : "mlp"},
          {"input_dim", s.input_dim},
          {"output_dim", s.output_dim},
          {"hidden", s.hidden},
          {"activation", "tanh"}};
}

inline EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "linear") {
    s.kind = EncoderKind::Linear;
  } else if (kind == "mlp") {
    s.kind = EncoderKind::Mlp;
  } else {
    throw FormatError("unknown encoder kind '" + kind + "'");
  }
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.output_dim = j.at("output_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.validate();
  return s;
}

/// Image and text encoders plus the (fixed) temperature.
struct ModelSpec {
  EncoderSpec image;
  EncoderSpec text;
  double tau = 0.07;

  void validate() const {
    image.validate();
    text.validate();
    if (image.output_dim != text.output_dim) throw ConfigError("image and text embedding dims differ");
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  }

  std::size_t param_count() const { return image.param_count() + text.param_count(); }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"image", to_json(s.image)}, {"text", to_json(s.text)}, {"tau", s.tau}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s{encoder_spec_from_json(j.at("image")), encoder_spec_from_json(j.at("text")), j.at("tau").get<double>()};
  s.validate();
  return s;
}

/// Flattened encoder weights. Layer l of an encoder is stored row-major as (out_l x in_l).
struct ModelParams {
  std::vector<double> image;
  std::vector<double> text;
  double tau = 0.07;

  std::vector<double> flatten() const {
    std::vector<double> flat(image);
    flat.insert(flat.end(), text.begin(), text.end());
    return flat;
  }

  static ModelParams unflatten(const ModelSpec& spec, std::span<const double> flat) {
    const std::size_t ni = spec.image.param_count();
    if (flat.size() != ni + spec.text.param_count()) {
      throw ShapeError("flattened parameter length " + std::to_string(flat.size()) + " does not match model spec");
    }
    return {std::vector<double>(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(ni)),
            std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(ni), flat.end()), spec.tau};
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Weight matrices (out x in) of each encoder layer, viewed from flattened storage.
inline std::vector<Tensor> layer_tensors(const EncoderSpec& spec, std::span<const double> flat) {
  if (flat.size() != spec.param_count()) throw ShapeError("encoder parameter length mismatch");
  const auto w = spec.widths();
  std::vector<Tensor> layers;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    const std::size_t n = w[l] * w[l + 1];
    layers.emplace_back(w[l + 1], w[l],
                        std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                            flat.begin() + static_cast<std::ptrdiff_t>(offset + n)));
    offset += n;
  }
  return layers;
}

inline std::vector<double> flatten_layers(std::span<const Tensor> layers) {
  std::vector<double> flat;
  for (const auto& t : layers) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

/// LeCun-normal weights (std 1/sqrt(fan_in)); image and text draw from separate derived streams.
inline ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto init_encoder = [](const EncoderSpec& e, Rng rng) {
    const auto w = e.widths();
    std::vector<double> flat;
    flat.reserve(e.param_count());
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(w[l]));
      for (std::size_t k = 0; k < w[l] * w[l + 1]; ++k) flat.push_back(scale * rng.normal());
    }
    return flat;
  };
  return {init_encoder(spec.image, Rng(derive_seed(seed, 0))), init_encoder(spec.text, Rng(derive_seed(seed, 1))),
          spec.tau};
}

/// Unit-norm embeddings (m x d) of `inputs` (m x input_dim).
inline Tensor encode(std::span<const double> weights, const EncoderSpec& spec, const Tensor& inputs) {
  if (inputs.cols() != spec.input_dim) {
    throw ShapeError("encoder expects input dim " + std::to_string(spec.input_dim) + ", got " +
                     std::to_string(inputs.cols()));
  }
  const auto layers = layer_tensors(spec, weights);
  Tensor h = inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = matmul_nt(h, layers[l]);
    if (l + 1 < layers.size()) {
      for (auto& x : h.values()) x = std::tanh(x);
    }
  }
  return normalize_rows(h);
}

/// Graph form of encode(); `layers` are the (out x in) weight nodes.
inline Var encode(Graph& g, const EncoderSpec& spec, std::span<const Var> layers, Var inputs) {
  if (g.value(inputs).cols() != spec.input_dim) throw ShapeError("encoder input dim mismatch");
  if (layers.size() != spec.layer_count()) throw ShapeError("encoder layer count mismatch");
  Var h = inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = g.matmul(h, g.transpose(layers[l]));
    if (l + 1 < layers.size()) h = g.tanh(h);
  }
  return g.normalize_rows(h);
}

inline Tensor similarity_logits(const Tensor& u, const Tensor& v, double tau) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive");
  if (u.cols() != v.cols()) throw ShapeError("embedding dims differ: " + u.shape_string() + " vs " + v.shape_string());
  Tensor z = matmul_nt(u, v);
  for (auto& x : z.values()) x /= tau;
  return z;
}

inline Var similarity_logits(Graph& g, Var u, Var v, double tau) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive");
  return g.scale(g.matmul(u, g.transpose(v)), 1.0 / tau);
}

}  // namespace lors
