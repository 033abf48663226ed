#pragma once

// Heterogeneous graph aggregation over a fully connected graph holding one
// vertex per modality, followed by the fusion readout that produces the
// guidance distribution f_phi(x).

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/cohort.hpp"
#include "mmfusion/params.hpp"

namespace mmfusion::hga {

enum class Modality { gtvT = 0, gtvN, clinical, hematology, radiomics };
inline constexpr std::size_t kModalityCount = 5;
std::string_view to_string(Modality m);

struct ModalityGraph {
  std::vector<Modality> vertices;  // canonical order
  ag::Var features;                // |V| x d

  std::size_t vertex_count() const { return vertices.size(); }
  // Fully connected with self-loops.
  std::size_t edge_count() const { return vertices.size() * vertices.size(); }
};

// Inputs may arrive in any order; each modality exactly once, all d-vectors.
ModalityGraph build_modality_graph(const std::vector<std::pair<Modality, ag::Var>>& inputs);
ModalityGraph build_modality_graph(const ag::Var& z_tumor, const ag::Var& z_node,
                                   const ag::Var& clinical, const ag::Var& hematology,
                                   const ag::Var& radiomics);

enum class LayerType { gat, gcn };
enum class Activation { elu, relu, identity };
LayerType parse_layer_type(std::string_view name);
Activation parse_activation(std::string_view name);
std::string_view to_string(LayerType t);
std::string_view to_string(Activation a);

struct GnnLayer {
  Tensor weight;     // d x d, applied as W F_j
  Tensor attention;  // 2d; unused by gcn
};

struct GnnParams {
  LayerType type = LayerType::gat;
  Activation activation = Activation::elu;
  double leaky_slope = 0.2;
  std::vector<GnnLayer> layers;
};

GnnParams init_gnn(LayerType type, Activation activation, std::size_t dim, std::size_t layers,
                   std::uint64_t seed);
ParamList parameters(GnnParams& params, const std::string& prefix = "hga.");

ag::Var activate(const ag::Var& x, Activation a);

// alpha(i,j) = softmax_j LeakyReLU(a^T [W F_i || W F_j]) over all vertices.
ag::Var gat_attention(ag::Tape& tape, const ag::Var& features, const GnnLayer& layer, double slope);
// F'_i = sigma(sum_j alpha_ij W F_j), all vertices updated from the same input.
ag::Var gat_layer(ag::Tape& tape, const ag::Var& features, const GnnLayer& layer,
                  Activation activation, double slope = 0.2);
// F'_i = sigma(mean_j W F_j) over {i} and its neighbours (here: every vertex).
ag::Var gcn_layer(ag::Tape& tape, const ag::Var& features, const GnnLayer& layer,
                  Activation activation);

struct FusionHeadParams {
  Tensor embed_clinical_w, embed_clinical_b;
  Tensor embed_hematology_w, embed_hematology_b;
  Tensor embed_radiomics_w, embed_radiomics_b;
  Tensor readout_w, readout_b;        // d x d
  Tensor classifier_w, classifier_b;  // 2 x d
};

FusionHeadParams init_fusion_head(std::size_t dim, const cohort::VectorDims& dims, std::uint64_t seed);
ParamList parameters(FusionHeadParams& params, const std::string& prefix = "head.");

struct TabularEmbeddings {
  ag::Var clinical, hematology, radiomics;
};
TabularEmbeddings embed_tabular(ag::Tape& tape, const FusionHeadParams& head,
                                const std::vector<double>& clinical,
                                const std::vector<double>& hematology,
                                const std::vector<double>& radiomics);

struct HgaOutput {
  ag::Var f_phi;  // class-probability 2-vector
  ag::Var y_hat;  // f_phi[1]
};

HgaOutput hga_forward(ag::Tape& tape, const ModalityGraph& graph, const GnnParams& gnn,
                      const FusionHeadParams& head);

}  // namespace mmfusion::hga
