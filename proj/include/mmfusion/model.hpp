#pragma once

// Full pipeline wiring: encoder -> MMRL -> HGA -> CFD, plus the reduced
// ablation variants.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mmfusion/cfd.hpp"
#include "mmfusion/cohort.hpp"
#include "mmfusion/encoder.hpp"
#include "mmfusion/hga.hpp"
#include "mmfusion/mmrl.hpp"

namespace mmfusion {

// base1: encoder + concatenation MLP; base2: + MMRL; base3: + HGA; full: + CFD.
enum class Variant { base1, base2, base3, full };
Variant parse_variant(std::string_view name);
std::string_view to_string(Variant v);

struct ModelConfig {
  Variant variant = Variant::full;
  encoder::Architecture architecture = encoder::Architecture::resnet_small;
  std::size_t latent_dim = 64;
  std::size_t encoder_width = 4;
  std::size_t encoder_blocks = 1;
  std::size_t heads = 4;
  std::size_t tumor_tiles = 3;
  hga::LayerType gnn = hga::LayerType::gat;
  hga::Activation activation = hga::Activation::elu;
  std::size_t gnn_layers = 1;
  std::size_t denoiser_hidden = 128;
  std::size_t time_embed_dim = 16;
  std::size_t timesteps = 10;
  double beta1 = 0.01;
  double betaT = 0.95;
  cohort::GridShape grid;
  cohort::VectorDims dims;
  std::uint64_t seed = 0;

  bool uses_mmrl() const { return variant != Variant::base1; }
  bool uses_hga() const { return variant == Variant::base3 || variant == Variant::full; }
  bool uses_cfd() const { return variant == Variant::full; }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Concatenation classifier used by the variants without graph fusion.
struct ConcatHead {
  Tensor hidden_w, hidden_b, out_w, out_b;
};

struct Model {
  ModelConfig config;
  encoder::EncoderParams encoder;
  mmrl::MmrlParams mmrl;
  hga::GnnParams gnn;
  hga::FusionHeadParams head;
  ConcatHead concat_head;
  cfd::DenoiserParams denoiser;
  cfd::NoiseSchedule schedule;
};

Model init_model(const ModelConfig& config);

// Parameters of the modules the variant uses, in a fixed order.  Names carry
// the prefixes encoder., mmrl., hga., head., cfd.
ParamList parameters(Model& model);
std::string parameter_group(const std::string& name);

struct Augmentation {
  double flip_prob = 0.6;
  double noise_prob = 0.4;
  double noise_sigma = 0.1;
};

struct RecordForward {
  ag::Var f_phi;  // class-probability 2-vector
  ag::Var y_hat;  // probability of metastasis
  std::vector<mmrl::AlignPair> align_pairs;
  bool used_masked_path = false;
};

// rng drives augmentation (when given) and relation masks in train mode.
RecordForward forward_record(ag::Tape& tape, const Model& model, const cohort::PatientRecord& record,
                             mmrl::Mode mode, double mask_ratio, Rng& rng,
                             const Augmentation* augmentation = nullptr);

// Guidance distribution f_phi(x) in inference mode.
Tensor guidance(const Model& model, const cohort::PatientRecord& record);

struct PredictOptions {
  std::size_t chains = 100;
  std::uint64_t seed = 0;
  cfd::ReverseMode reverse_mode = cfd::ReverseMode::card_posterior;
};

struct Predictions {
  std::vector<int> labels;
  std::size_t masked_passes = 0;  // forward passes that took the masked MMRL path
};

// Diffusion sampling for the full model, argmax of f_phi otherwise.  Record i
// samples from a stream derived from (seed, i).
Predictions predict(const Model& model, const std::vector<const cohort::PatientRecord*>& records,
                    const PredictOptions& options);
std::vector<int> predict_labels(const Model& model,
                                const std::vector<const cohort::PatientRecord*>& records,
                                const PredictOptions& options);

// Seed of record i's sampling stream under PredictOptions::seed.
std::uint64_t record_sampling_seed(std::uint64_t seed, std::size_t record_index);

Tensor one_hot(int label);

}  // namespace mmfusion
