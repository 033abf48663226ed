#include "mmfusion/encoder.hpp"

#include <cmath>

#include "mmfusion/errors.hpp"
#include "mmfusion/random.hpp"

namespace mmfusion::encoder {
namespace {

ConvLayer make_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(in * k * k * k));
  return {normal_tensor({out, in, k, k, k}, std, rng), Tensor({out}), stride};
}

ag::Var apply(ag::Tape& tape, const ag::Var& x, const ConvLayer& c) {
  return ag::conv3d(x, tape.param(c.weight), tape.param(c.bias), c.stride);
}

std::size_t growth(std::size_t width) { return std::max<std::size_t>(2, width / 2); }

}  // namespace

Architecture parse_architecture(std::string_view name) {
  if (name == "resnet_small") return Architecture::resnet_small;
  if (name == "densenet_small") return Architecture::densenet_small;
  throw ConfigError("unknown encoder architecture '" + std::string(name) +
                    "'; supported: resnet_small, densenet_small");
}

std::string_view to_string(Architecture a) {
  return a == Architecture::resnet_small ? "resnet_small" : "densenet_small";
}

EncoderParams init_encoder(Architecture architecture, const cohort::GridShape& grid,
                           std::size_t latent_dim, std::uint64_t seed, std::size_t width,
                           std::size_t blocks) {
  if (latent_dim < 4) throw ConfigError("latent_dim must be at least 4");
  if (width == 0 || blocks == 0) throw ConfigError("encoder width and depth must be positive");
  EncoderParams p;
  p.architecture = architecture;
  p.grid = grid;
  p.latent_dim = latent_dim;
  p.width = width;
  p.blocks = blocks;
  p.seed = seed;
  Rng rng(seed);

  std::size_t channels = width;
  p.convs.push_back(make_conv(1, width, 3, 2, rng));
  if (architecture == Architecture::resnet_small) {
    const std::size_t stage_width[3] = {width, 2 * width, 2 * width};
    for (std::size_t stage = 0; stage < 3; ++stage) {
      for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
        const std::size_t out = stage_width[stage];
        p.convs.push_back(make_conv(channels, out, 3, stride, rng));
        p.convs.push_back(make_conv(out, out, 3, 1, rng));
        if (stride != 1 || out != channels) p.convs.push_back(make_conv(channels, out, 1, stride, rng));
        channels = out;
      }
    }
  } else {
    const std::size_t g = growth(width);
    for (std::size_t block = 0; block < 3; ++block) {
      for (std::size_t l = 0; l < blocks; ++l) {
        p.convs.push_back(make_conv(channels, g, 3, 1, rng));
        channels += g;
      }
      if (block < 2) {
        p.convs.push_back(make_conv(channels, width, 3, 2, rng));
        channels = width;
      }
    }
  }
  p.head_weight = normal_tensor({latent_dim, channels}, 1.0 / std::sqrt(static_cast<double>(channels)), rng);
  p.head_bias = Tensor({latent_dim});
  return p;
}

ag::Var encode_volume(ag::Tape& tape, const ag::Var& volume, const EncoderParams& p) {
  const Shape expected{1, p.grid.depth, p.grid.height, p.grid.width};
  if (volume.shape() != expected)
    throw ConfigError("encoder expects a volume of shape " + shape_str(expected) + ", got " +
                      shape_str(volume.shape()));

  std::size_t next = 0;
  ag::Var x = ag::relu(apply(tape, volume, p.convs[next++]));
  if (p.architecture == Architecture::resnet_small) {
    for (std::size_t stage = 0; stage < 3; ++stage) {
      for (std::size_t b = 0; b < p.blocks; ++b) {
        const ConvLayer& a = p.convs[next++];
        const ConvLayer& c = p.convs[next++];
        ag::Var h = ag::relu(apply(tape, x, a));
        h = apply(tape, h, c);
        ag::Var shortcut = x;
        if (a.stride != 1 || a.weight.shape[0] != a.weight.shape[1])
          shortcut = apply(tape, x, p.convs[next++]);
        x = ag::relu(ag::add(h, shortcut));
      }
    }
  } else {
    for (std::size_t block = 0; block < 3; ++block) {
      std::vector<ag::Var> features{x};
      for (std::size_t l = 0; l < p.blocks; ++l) {
        ag::Var in = features.size() == 1 ? features[0] : ag::concat_channels(features);
        features.push_back(ag::relu(apply(tape, in, p.convs[next++])));
      }
      x = ag::concat_channels(features);
      if (block < 2) x = ag::relu(apply(tape, x, p.convs[next++]));
    }
  }
  return ag::linear(ag::global_avg_pool(x), tape.param(p.head_weight), tape.param(p.head_bias));
}

ag::Var volume_var(const cohort::Volume& volume) {
  const auto& s = volume.shape;
  Tensor t({1, s.depth, s.height, s.width});
  for (std::size_t i = 0; i < volume.voxels.size(); ++i) t[i] = volume.voxels[i];
  return ag::constant(std::move(t));
}

Tensor encode_volume(const cohort::Volume& volume, const EncoderParams& params) {
  ag::Tape tape(false);
  return encode_volume(tape, volume_var(volume), params).value();
}

ParamList parameters(EncoderParams& p, const std::string& prefix) {
  ParamList out;
  for (std::size_t i = 0; i < p.convs.size(); ++i) {
    out.push_back({prefix + "conv" + std::to_string(i) + ".weight", &p.convs[i].weight});
    out.push_back({prefix + "conv" + std::to_string(i) + ".bias", &p.convs[i].bias});
  }
  out.push_back({prefix + "head.weight", &p.head_weight});
  out.push_back({prefix + "head.bias", &p.head_bias});
  return out;
}

}  // namespace mmfusion::encoder
