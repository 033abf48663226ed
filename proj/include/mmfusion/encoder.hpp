#pragma once

// Small 3-D convolutional encoders mapping a volume to a latent token.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/cohort.hpp"
#include "mmfusion/params.hpp"

namespace mmfusion::encoder {

enum class Architecture { resnet_small, densenet_small };

// Throws ConfigError listing the supported names.
Architecture parse_architecture(std::string_view name);
std::string_view to_string(Architecture a);

struct ConvLayer {
  Tensor weight;  // out x in x k x k x k
  Tensor bias;    // out
  std::size_t stride = 1;
};

struct EncoderParams {
  Architecture architecture = Architecture::resnet_small;
  cohort::GridShape grid;
  std::size_t latent_dim = 64;
  std::size_t width = 4;
  std::size_t blocks = 1;  // residual blocks per stage / layers per dense block
  std::uint64_t seed = 0;

  // resnet_small: stem, then per block [conv_a, conv_b, shortcut?].
  // densenet_small: stem, dense layers, transitions, in forward order.
  std::vector<ConvLayer> convs;
  Tensor head_weight;  // latent_dim x channels
  Tensor head_bias;
};

EncoderParams init_encoder(Architecture architecture, const cohort::GridShape& grid,
                           std::size_t latent_dim, std::uint64_t seed, std::size_t width = 4,
                           std::size_t blocks = 1);

// volume: 1 x D x H x W.  Returns a rank-1 latent of length latent_dim.
ag::Var encode_volume(ag::Tape& tape, const ag::Var& volume, const EncoderParams& params);
Tensor encode_volume(const cohort::Volume& volume, const EncoderParams& params);

ag::Var volume_var(const cohort::Volume& volume);

ParamList parameters(EncoderParams& params, const std::string& prefix = "encoder.");

}  // namespace mmfusion::encoder
