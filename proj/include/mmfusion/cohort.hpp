#pragma once

// Synthetic multi-modal cohort: generation, fold splitting, volume
// augmentation and on-disk persistence.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfusion/random.hpp"

namespace mmfusion::cohort {

struct GridShape {
  std::size_t depth = 16, height = 32, width = 32;

  std::size_t voxels() const { return depth * height * width; }
  bool operator==(const GridShape&) const = default;
};

struct Volume {
  GridShape shape;
  std::vector<float> voxels;

  float& at(std::size_t z, std::size_t y, std::size_t x) {
    return voxels[(z * shape.height + y) * shape.width + x];
  }
  float at(std::size_t z, std::size_t y, std::size_t x) const {
    return voxels[(z * shape.height + y) * shape.width + x];
  }
  bool operator==(const Volume&) const = default;
};

inline constexpr std::size_t kNodeVolumes = 3;

struct PatientRecord {
  std::string id;
  Volume tumor;
  std::array<Volume, kNodeVolumes> nodes;
  std::vector<double> clinical;
  std::vector<double> hematology;
  std::vector<double> radiomics;
  int label = 0;  // 1 = metastasis

  bool operator==(const PatientRecord&) const = default;
};

using Cohort = std::vector<PatientRecord>;

struct VectorDims {
  std::size_t clinical = 6, hematology = 8, radiomics = 16;
  bool operator==(const VectorDims&) const = default;
};

struct SyntheticConfig {
  std::size_t n_patients = 1354;
  GridShape grid_shape;
  VectorDims vector_dims;
  double signal_strength = 1.0;
  double noise_level = 0.1;  // label corruption probability is noise_level / 2
  double prevalence = 0.3;
  std::uint64_t seed = 0;
};

// Throws ConfigError on any violated invariant.
void validate(const SyntheticConfig& config);

// Flat object with the SyntheticConfig field names; grid_shape and
// vector_dims are 3-element arrays.  Unknown keys are errors.
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticConfig& config);

// The label is XOR (or XNOR, for prevalence above one half) of the sign of
// the tumour blob and the sign of radiomics[0]; a fraction noise_level/2 of
// labels is then flipped.  Records are seeded independently by index.
Cohort generate_cohort(const SyntheticConfig& config);

// Noise-free label implied by the observable tumour statistic and
// radiomics coordinate of a record.
int planted_label(const PatientRecord& record, const SyntheticConfig& config);
// Mean intensity of the central box of the tumour volume.
double tumor_blob_statistic(const Volume& tumor);

struct FoldSplit {
  std::vector<std::string> train_ids, val_ids, test_ids;
};

// Stratified k-fold rotation: the test sets partition the cohort; the
// remaining records of each fold are divided train:val = 7:1.
std::vector<FoldSplit> split_folds(const Cohort& cohort, std::size_t k, std::uint64_t seed);

// Records of the cohort whose ids are listed, in list order.
std::vector<const PatientRecord*> select(const Cohort& cohort, const std::vector<std::string>& ids);

// Random flip along one axis with probability flip_prob, then additive
// Gaussian noise with probability noise_prob.
Volume augment_volume(const Volume& volume, double flip_prob, double noise_prob,
                      double noise_sigma, Rng& rng);

void save_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort(const std::filesystem::path& dir);

}  // namespace mmfusion::cohort
