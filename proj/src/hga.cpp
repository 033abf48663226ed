#include "mmfusion/hga.hpp"

#include <algorithm>
#include <cmath>

#include "mmfusion/errors.hpp"
#include "mmfusion/random.hpp"

namespace mmfusion::hga {

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::gtvT: return "gtvT";
    case Modality::gtvN: return "gtvN";
    case Modality::clinical: return "clinical";
    case Modality::hematology: return "hematology";
    case Modality::radiomics: return "radiomics";
  }
  return "?";
}

ModalityGraph build_modality_graph(const std::vector<std::pair<Modality, ag::Var>>& inputs) {
  std::array<ag::Var, kModalityCount> slots;
  for (const auto& [m, v] : inputs) {
    auto& slot = slots[static_cast<std::size_t>(m)];
    if (slot) throw ConfigError("modality " + std::string(to_string(m)) + " given twice");
    if (v.value().rank() != 1) throw ConfigError("modality features must be vectors");
    slot = v;
  }
  ModalityGraph g;
  std::vector<ag::Var> rows;
  for (std::size_t i = 0; i < kModalityCount; ++i) {
    const auto m = static_cast<Modality>(i);
    if (!slots[i]) throw ConfigError("missing modality " + std::string(to_string(m)));
    if (slots[i].size() != slots[0].size())
      throw ConfigError("modality " + std::string(to_string(m)) + " has dimension " +
                        std::to_string(slots[i].size()) + ", expected " + std::to_string(slots[0].size()));
    g.vertices.push_back(m);
    rows.push_back(slots[i]);
  }
  g.features = ag::stack_rows(rows);
  return g;
}

ModalityGraph build_modality_graph(const ag::Var& z_tumor, const ag::Var& z_node,
                                   const ag::Var& clinical, const ag::Var& hematology,
                                   const ag::Var& radiomics) {
  return build_modality_graph({{Modality::gtvT, z_tumor},
                               {Modality::gtvN, z_node},
                               {Modality::clinical, clinical},
                               {Modality::hematology, hematology},
                               {Modality::radiomics, radiomics}});
}

LayerType parse_layer_type(std::string_view name) {
  if (name == "gat") return LayerType::gat;
  if (name == "gcn") return LayerType::gcn;
  throw ConfigError("unknown graph layer '" + std::string(name) + "'; supported: gat, gcn");
}

Activation parse_activation(std::string_view name) {
  if (name == "elu") return Activation::elu;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'; supported: elu, relu, identity");
}

std::string_view to_string(LayerType t) { return t == LayerType::gat ? "gat" : "gcn"; }

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::elu: return "elu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

GnnParams init_gnn(LayerType type, Activation activation, std::size_t dim, std::size_t layers,
                   std::uint64_t seed) {
  if (layers == 0) throw ConfigError("graph layer count must be positive");
  Rng rng(seed);
  GnnParams p;
  p.type = type;
  p.activation = activation;
  const double std = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t l = 0; l < layers; ++l)
    p.layers.push_back({normal_tensor({dim, dim}, std, rng), normal_tensor({2 * dim}, std, rng)});
  return p;
}

ParamList parameters(GnnParams& p, const std::string& prefix) {
  ParamList out;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string base = prefix + "layer" + std::to_string(l) + ".";
    out.push_back({base + "weight", &p.layers[l].weight});
    if (p.type == LayerType::gat) out.push_back({base + "attention", &p.layers[l].attention});
  }
  return out;
}

ag::Var activate(const ag::Var& x, Activation a) {
  switch (a) {
    case Activation::elu: return ag::elu(x);
    case Activation::relu: return ag::relu(x);
    case Activation::identity: return x;
  }
  return x;
}

namespace {

// Rows W F_i.
ag::Var transform(ag::Tape& tape, const ag::Var& features, const GnnLayer& layer) {
  return ag::matmul(features, tape.param(layer.weight), false, true);
}

ag::Var attention_from(const ag::Var& wh, const ag::Var& att, double slope) {
  const std::size_t d = wh.shape()[1];
  const ag::Var a_self = ag::reshape(ag::slice_cols(ag::reshape(att, {1, 2 * d}), 0, d), {d, 1});
  const ag::Var a_nbr = ag::reshape(ag::slice_cols(ag::reshape(att, {1, 2 * d}), d, d), {d, 1});
  const std::size_t n = wh.shape()[0];
  const ag::Var s_self = ag::reshape(ag::matmul(wh, a_self), {n});
  const ag::Var s_nbr = ag::reshape(ag::matmul(wh, a_nbr), {n});
  return ag::softmax(ag::leaky_relu(ag::outer_sum(s_self, s_nbr), slope));
}

}  // namespace

ag::Var gat_attention(ag::Tape& tape, const ag::Var& features, const GnnLayer& layer, double slope) {
  return attention_from(transform(tape, features, layer), tape.param(layer.attention), slope);
}

ag::Var gat_layer(ag::Tape& tape, const ag::Var& features, const GnnLayer& layer,
                  Activation activation, double slope) {
  const ag::Var wh = transform(tape, features, layer);
  const ag::Var alpha = attention_from(wh, tape.param(layer.attention), slope);
  return activate(ag::matmul(alpha, wh), activation);
}

ag::Var gcn_layer(ag::Tape& tape, const ag::Var& features, const GnnLayer& layer,
                  Activation activation) {
  const ag::Var wh = transform(tape, features, layer);
  const std::size_t n = wh.shape()[0];
  const ag::Var uniform = ag::constant(Tensor({n, n}, 1.0 / static_cast<double>(n)));
  return activate(ag::matmul(uniform, wh), activation);
}

FusionHeadParams init_fusion_head(std::size_t dim, const cohort::VectorDims& dims, std::uint64_t seed) {
  Rng rng(seed);
  const auto w = [&](std::size_t out, std::size_t in) {
    return normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  };
  FusionHeadParams p;
  p.embed_clinical_w = w(dim, dims.clinical);
  p.embed_clinical_b = Tensor({dim});
  p.embed_hematology_w = w(dim, dims.hematology);
  p.embed_hematology_b = Tensor({dim});
  p.embed_radiomics_w = w(dim, dims.radiomics);
  p.embed_radiomics_b = Tensor({dim});
  p.readout_w = w(dim, dim);
  p.readout_b = Tensor({dim});
  p.classifier_w = w(2, dim);
  p.classifier_b = Tensor({2});
  return p;
}

ParamList parameters(FusionHeadParams& p, const std::string& prefix) {
  return {
      {prefix + "embed_clinical.weight", &p.embed_clinical_w},
      {prefix + "embed_clinical.bias", &p.embed_clinical_b},
      {prefix + "embed_hematology.weight", &p.embed_hematology_w},
      {prefix + "embed_hematology.bias", &p.embed_hematology_b},
      {prefix + "embed_radiomics.weight", &p.embed_radiomics_w},
      {prefix + "embed_radiomics.bias", &p.embed_radiomics_b},
      {prefix + "readout.weight", &p.readout_w},
      {prefix + "readout.bias", &p.readout_b},
      {prefix + "classifier.weight", &p.classifier_w},
      {prefix + "classifier.bias", &p.classifier_b},
  };
}

TabularEmbeddings embed_tabular(ag::Tape& tape, const FusionHeadParams& head,
                                const std::vector<double>& clinical,
                                const std::vector<double>& hematology,
                                const std::vector<double>& radiomics) {
  const auto embed = [&](const std::vector<double>& x, const Tensor& w, const Tensor& b) {
    if (x.size() != w.shape[1])
      throw ConfigError("tabular vector of length " + std::to_string(x.size()) + ", expected " +
                        std::to_string(w.shape[1]));
    return ag::linear(ag::constant(Tensor({x.size()}, x)), tape.param(w), tape.param(b));
  };
  return {embed(clinical, head.embed_clinical_w, head.embed_clinical_b),
          embed(hematology, head.embed_hematology_w, head.embed_hematology_b),
          embed(radiomics, head.embed_radiomics_w, head.embed_radiomics_b)};
}

HgaOutput hga_forward(ag::Tape& tape, const ModalityGraph& graph, const GnnParams& gnn,
                      const FusionHeadParams& head) {
  ag::Var h = graph.features;
  for (const auto& layer : gnn.layers)
    h = gnn.type == LayerType::gat ? gat_layer(tape, h, layer, gnn.activation, gnn.leaky_slope)
                                   : gcn_layer(tape, h, layer, gnn.activation);
  const ag::Var pooled = ag::mean_rows(h);
  const ag::Var hidden = ag::elu(ag::linear(pooled, tape.param(head.readout_w), tape.param(head.readout_b)));
  const ag::Var logits = ag::linear(hidden, tape.param(head.classifier_w), tape.param(head.classifier_b));
  HgaOutput out;
  out.f_phi = ag::softmax(logits);
  out.y_hat = ag::element(out.f_phi, 1);
  return out;
}

}  // namespace mmfusion::hga
