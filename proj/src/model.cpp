#include "mmfusion/model.hpp"

#include <cmath>

#include "mmfusion/errors.hpp"

namespace mmfusion {
namespace {

constexpr std::uint64_t kEncoderStream = 1, kMmrlStream = 2, kGnnStream = 3, kHeadStream = 4,
                        kConcatStream = 5, kDenoiserStream = 6, kEvalStream = 7;

std::size_t concat_input_dim(const ModelConfig& c) {
  const std::size_t tabular = c.dims.clinical + c.dims.hematology + c.dims.radiomics;
  return (c.uses_mmrl() ? 2 : 1 + cohort::kNodeVolumes) * c.latent_dim + tabular;
}

ag::Var tabular(const std::vector<double>& v) { return ag::constant(Tensor({v.size()}, v)); }

}  // namespace

Variant parse_variant(std::string_view name) {
  if (name == "base1") return Variant::base1;
  if (name == "base2") return Variant::base2;
  if (name == "base3") return Variant::base3;
  if (name == "full") return Variant::full;
  throw ConfigError("unknown variant '" + std::string(name) + "'; supported: base1, base2, base3, full");
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::base1: return "base1";
    case Variant::base2: return "base2";
    case Variant::base3: return "base3";
    case Variant::full: return "full";
  }
  return "?";
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"architecture", encoder::to_string(c.architecture)},
          {"latent_dim", c.latent_dim},
          {"encoder_width", c.encoder_width},
          {"encoder_blocks", c.encoder_blocks},
          {"heads", c.heads},
          {"tumor_tiles", c.tumor_tiles},
          {"gnn", hga::to_string(c.gnn)},
          {"activation", hga::to_string(c.activation)},
          {"gnn_layers", c.gnn_layers},
          {"denoiser_hidden", c.denoiser_hidden},
          {"time_embed_dim", c.time_embed_dim},
          {"timesteps", c.timesteps},
          {"beta1", c.beta1},
          {"betaT", c.betaT},
          {"grid_shape", {c.grid.depth, c.grid.height, c.grid.width}},
          {"vector_dims", {c.dims.clinical, c.dims.hematology, c.dims.radiomics}},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.architecture = encoder::parse_architecture(j.at("architecture").get<std::string>());
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.encoder_width = j.at("encoder_width").get<std::size_t>();
    c.encoder_blocks = j.at("encoder_blocks").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.tumor_tiles = j.at("tumor_tiles").get<std::size_t>();
    c.gnn = hga::parse_layer_type(j.at("gnn").get<std::string>());
    c.activation = hga::parse_activation(j.at("activation").get<std::string>());
    c.gnn_layers = j.at("gnn_layers").get<std::size_t>();
    c.denoiser_hidden = j.at("denoiser_hidden").get<std::size_t>();
    c.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
    c.timesteps = j.at("timesteps").get<std::size_t>();
    c.beta1 = j.at("beta1").get<double>();
    c.betaT = j.at("betaT").get<double>();
    const auto g = j.at("grid_shape").get<std::vector<std::size_t>>();
    const auto d = j.at("vector_dims").get<std::vector<std::size_t>>();
    if (g.size() != 3 || d.size() != 3) throw ParseError("grid_shape and vector_dims need 3 entries");
    c.grid = {g[0], g[1], g[2]};
    c.dims = {d[0], d[1], d[2]};
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model descriptor: ") + e.what());
  }
}

Model init_model(const ModelConfig& c) {
  Model m;
  m.config = c;
  m.encoder = encoder::init_encoder(c.architecture, c.grid, c.latent_dim, mix_seed(c.seed, kEncoderStream),
                                    c.encoder_width, c.encoder_blocks);
  m.schedule = cfd::make_noise_schedule(c.timesteps, c.beta1, c.betaT);
  if (c.uses_mmrl()) m.mmrl = mmrl::init_mmrl(c.latent_dim, c.heads, c.tumor_tiles, mix_seed(c.seed, kMmrlStream));
  if (c.uses_hga()) {
    m.gnn = hga::init_gnn(c.gnn, c.activation, c.latent_dim, c.gnn_layers, mix_seed(c.seed, kGnnStream));
    m.head = hga::init_fusion_head(c.latent_dim, c.dims, mix_seed(c.seed, kHeadStream));
  } else {
    Rng rng(mix_seed(c.seed, kConcatStream));
    const std::size_t in = concat_input_dim(c);
    m.concat_head.hidden_w = normal_tensor({c.latent_dim, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    m.concat_head.hidden_b = Tensor({c.latent_dim});
    m.concat_head.out_w =
        normal_tensor({2, c.latent_dim}, 1.0 / std::sqrt(static_cast<double>(c.latent_dim)), rng);
    m.concat_head.out_b = Tensor({2});
  }
  if (c.uses_cfd())
    m.denoiser = cfd::init_denoiser(c.denoiser_hidden, c.time_embed_dim, mix_seed(c.seed, kDenoiserStream));
  return m;
}

ParamList parameters(Model& m) {
  ParamList out = encoder::parameters(m.encoder);
  const auto append = [&](ParamList more) { out.insert(out.end(), more.begin(), more.end()); };
  if (m.config.uses_mmrl()) append(mmrl::parameters(m.mmrl));
  if (m.config.uses_hga()) {
    append(hga::parameters(m.gnn));
    append(hga::parameters(m.head));
  } else {
    append({{"head.concat_hidden.weight", &m.concat_head.hidden_w},
            {"head.concat_hidden.bias", &m.concat_head.hidden_b},
            {"head.concat_out.weight", &m.concat_head.out_w},
            {"head.concat_out.bias", &m.concat_head.out_b}});
  }
  if (m.config.uses_cfd()) append(cfd::parameters(m.denoiser));
  return out;
}

std::string parameter_group(const std::string& name) { return name.substr(0, name.find('.')); }

RecordForward forward_record(ag::Tape& tape, const Model& m, const cohort::PatientRecord& r,
                             mmrl::Mode mode, double mask_ratio, Rng& rng,
                             const Augmentation* aug) {
  const auto volume = [&](const cohort::Volume& v) {
    if (!aug) return encoder::volume_var(v);
    return encoder::volume_var(cohort::augment_volume(v, aug->flip_prob, aug->noise_prob, aug->noise_sigma, rng));
  };
  const ag::Var x_tumor = encoder::encode_volume(tape, volume(r.tumor), m.encoder);
  std::vector<ag::Var> x_nodes;
  for (const auto& n : r.nodes) x_nodes.push_back(encoder::encode_volume(tape, volume(n), m.encoder));

  RecordForward out;
  ag::Var z_tumor = x_tumor, z_node;
  if (m.config.uses_mmrl()) {
    mmrl::MmrlOutput mo = mmrl::mmrl_forward(tape, x_tumor, ag::stack_rows(x_nodes), m.mmrl, mode, mask_ratio, rng);
    z_tumor = mo.z_tumor;
    z_node = mo.z_node;
    out.align_pairs = std::move(mo.align_pairs);
    out.used_masked_path = mo.used_masked_path;
  }

  if (m.config.uses_hga()) {
    const auto tab = hga::embed_tabular(tape, m.head, r.clinical, r.hematology, r.radiomics);
    const auto graph = hga::build_modality_graph(z_tumor, z_node, tab.clinical, tab.hematology, tab.radiomics);
    const auto h = hga::hga_forward(tape, graph, m.gnn, m.head);
    out.f_phi = h.f_phi;
    out.y_hat = h.y_hat;
    return out;
  }

  std::vector<ag::Var> parts{z_tumor};
  if (m.config.uses_mmrl())
    parts.push_back(z_node);
  else
    parts.insert(parts.end(), x_nodes.begin(), x_nodes.end());
  parts.push_back(tabular(r.clinical));
  parts.push_back(tabular(r.hematology));
  parts.push_back(tabular(r.radiomics));
  const ConcatHead& h = m.concat_head;
  const ag::Var hidden = ag::elu(ag::linear(ag::concat(parts), tape.param(h.hidden_w), tape.param(h.hidden_b)));
  out.f_phi = ag::softmax(ag::linear(hidden, tape.param(h.out_w), tape.param(h.out_b)));
  out.y_hat = ag::element(out.f_phi, 1);
  return out;
}

namespace {

RecordForward infer(const Model& model, const cohort::PatientRecord& record) {
  ag::Tape tape(false);
  Rng unused(0);
  return forward_record(tape, model, record, mmrl::Mode::infer, 0.0, unused);
}

}  // namespace

Tensor guidance(const Model& model, const cohort::PatientRecord& record) {
  return infer(model, record).f_phi.value();
}

Predictions predict(const Model& model, const std::vector<const cohort::PatientRecord*>& records,
                    const PredictOptions& options) {
  Predictions out;
  out.labels.resize(records.size());
  std::vector<char> masked(records.size(), 0);
  const auto n = static_cast<std::int64_t>(records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t ii = 0; ii < n; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const RecordForward fw = infer(model, *records[i]);
    masked[i] = fw.used_masked_path;
    const Tensor& f = fw.f_phi.value();
    if (model.config.uses_cfd()) {
      Rng rng(record_sampling_seed(options.seed, i));
      out.labels[i] = cfd::sample_prediction(f, model.denoiser, model.schedule, options.chains, rng,
                                             options.reverse_mode)
                          .label;
    } else {
      out.labels[i] = f[1] > f[0] ? 1 : 0;
    }
  }
  for (char m : masked) out.masked_passes += m ? 1 : 0;
  return out;
}

std::vector<int> predict_labels(const Model& model, const std::vector<const cohort::PatientRecord*>& records,
                                const PredictOptions& options) {
  return predict(model, records, options).labels;
}

std::uint64_t record_sampling_seed(std::uint64_t seed, std::size_t record_index) {
  return mix_seed(seed, {kEvalStream, record_index});
}

Tensor one_hot(int label) { return label ? Tensor::vector({0.0, 1.0}) : Tensor::vector({1.0, 0.0}); }

}  // namespace mmfusion
