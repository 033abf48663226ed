#include "mmfusion/mmrl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmfusion/errors.hpp"

namespace mmfusion::mmrl {

AttentionParams init_attention(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0)
    throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  const double std = 1.0 / std::sqrt(static_cast<double>(dim));
  AttentionParams p;
  p.heads = heads;
  for (Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo}) *w = normal_tensor({dim, dim}, std, rng);
  for (Tensor* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = Tensor({dim});
  return p;
}

MmrlParams init_mmrl(std::size_t dim, std::size_t heads, std::size_t tumor_tiles, std::uint64_t seed) {
  if (tumor_tiles == 0) throw ConfigError("tumor_tiles must be positive");
  Rng rng(seed);
  MmrlParams p;
  p.dim = dim;
  p.heads = heads;
  p.tumor_tiles = tumor_tiles;
  p.intra_node = init_attention(dim, heads, rng);
  p.intra_tumor = init_attention(dim, heads, rng);
  p.cross_node = init_attention(dim, heads, rng);
  p.cross_tumor = init_attention(dim, heads, rng);
  return p;
}

ParamList parameters(MmrlParams& p, const std::string& prefix) {
  ParamList out;
  const auto add = [&](AttentionParams& a, const std::string& name) {
    const std::string base = prefix + name + ".";
    out.push_back({base + "wq", &a.wq});
    out.push_back({base + "bq", &a.bq});
    out.push_back({base + "wk", &a.wk});
    out.push_back({base + "bk", &a.bk});
    out.push_back({base + "wv", &a.wv});
    out.push_back({base + "bv", &a.bv});
    out.push_back({base + "wo", &a.wo});
    out.push_back({base + "bo", &a.bo});
  };
  add(p.intra_node, "intra_node");
  add(p.intra_tumor, "intra_tumor");
  add(p.cross_node, "cross_node");
  add(p.cross_tumor, "cross_tumor");
  return out;
}

std::size_t RelationMask::masked_count() const {
  return static_cast<std::size_t>(std::count(keep.data.begin(), keep.data.end(), 0.0));
}

RelationMask sample_relation_mask(std::size_t n_q, std::size_t n_k, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in [0,1)");
  const std::size_t total = n_q * n_k;
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  const bool row_safe_possible = count <= n_q * (n_k - std::min<std::size_t>(n_k, 1));

  std::vector<std::size_t> positions(total);
  RelationMask mask{Tensor({n_q, n_k}, 1.0), ratio};
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    std::shuffle(positions.begin(), positions.end(), rng);
    std::fill(mask.keep.data.begin(), mask.keep.data.end(), 1.0);
    for (std::size_t i = 0; i < count; ++i) mask.keep[positions[i]] = 0.0;

    bool full_row = false;
    for (std::size_t r = 0; r < n_q && !full_row; ++r) {
      full_row = true;
      for (std::size_t c = 0; c < n_k; ++c) full_row = full_row && mask.keep[r * n_k + c] == 0.0;
    }
    if (!full_row || !row_safe_possible) break;
  }
  return mask;
}

ag::Var multi_head_attention(ag::Tape& tape, const ag::Var& queries, const ag::Var& keys,
                             const AttentionParams& p, const RelationMask* mask) {
  const std::size_t d = p.wq.shape.at(0);
  if (queries.value().rank() != 2 || keys.value().rank() != 2 || queries.shape()[1] != d ||
      keys.shape()[1] != d)
    throw ConfigError("attention inputs must be n x " + std::to_string(d) + ", got " +
                      shape_str(queries.shape()) + " and " + shape_str(keys.shape()));
  if (mask && mask->keep.shape != Shape{queries.shape()[0], keys.shape()[0]})
    throw ConfigError("relation mask shape " + shape_str(mask->keep.shape) + " does not match " +
                      std::to_string(queries.shape()[0]) + "x" + std::to_string(keys.shape()[0]));

  const std::size_t dh = d / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const ag::Var q = ag::linear(queries, tape.param(p.wq), tape.param(p.bq));
  const ag::Var k = ag::linear(keys, tape.param(p.wk), tape.param(p.bk));
  const ag::Var v = ag::linear(keys, tape.param(p.wv), tape.param(p.bv));

  std::vector<ag::Var> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const ag::Var qh = ag::slice_cols(q, h * dh, dh);
    const ag::Var kh = ag::slice_cols(k, h * dh, dh);
    const ag::Var vh = ag::slice_cols(v, h * dh, dh);
    const ag::Var scores = ag::scale(ag::matmul(qh, kh, false, true), inv_sqrt);
    const ag::Var weights = mask ? ag::masked_softmax(scores, mask->keep) : ag::softmax(scores);
    heads.push_back(ag::matmul(weights, vh));
  }
  const ag::Var joined = heads.size() == 1 ? heads[0] : ag::concat_cols(heads);
  return ag::linear(joined, tape.param(p.wo), tape.param(p.bo));
}

ag::Var multi_head_self_attention(ag::Tape& tape, const ag::Var& tokens, const AttentionParams& p,
                                  const RelationMask* mask) {
  return multi_head_attention(tape, tokens, tokens, p, mask);
}

std::vector<Tensor> attention_weights(const Tensor& queries, const Tensor& keys,
                                      const AttentionParams& p, const RelationMask* mask) {
  ag::Tape tape(false);
  const std::size_t d = p.wq.shape.at(0), dh = d / p.heads;
  const ag::Var q = ag::linear(ag::constant(queries), tape.param(p.wq), tape.param(p.bq));
  const ag::Var k = ag::linear(ag::constant(keys), tape.param(p.wk), tape.param(p.bk));
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < p.heads; ++h) {
    const ag::Var s = ag::scale(
        ag::matmul(ag::slice_cols(q, h * dh, dh), ag::slice_cols(k, h * dh, dh), false, true),
        1.0 / std::sqrt(static_cast<double>(dh)));
    out.push_back((mask ? ag::masked_softmax(s, mask->keep) : ag::softmax(s)).value());
  }
  return out;
}

Mode parse_mode(std::string_view name) {
  if (name == "train") return Mode::train;
  if (name == "infer") return Mode::infer;
  throw ConfigError("unknown mmrl mode '" + std::string(name) + "'; expected train or infer");
}

MmrlOutput mmrl_forward(ag::Tape& tape, const ag::Var& tumor, const ag::Var& nodes,
                        const MmrlParams& p, Mode mode, double ratio, Rng& rng) {
  const ag::Var tumor_tokens = tumor.value().rank() == 1 ? ag::tile_rows(tumor, p.tumor_tiles) : tumor;
  if (nodes.value().rank() != 2) throw ConfigError("node tokens must be an n x d matrix");

  const ag::Var node_s = multi_head_self_attention(tape, nodes, p.intra_node);
  const ag::Var tumor_s = multi_head_self_attention(tape, tumor_tokens, p.intra_tumor);
  const ag::Var node_cu = multi_head_attention(tape, node_s, tumor_s, p.cross_node);
  const ag::Var tumor_cu = multi_head_attention(tape, tumor_s, node_s, p.cross_tumor);

  MmrlOutput out;
  if (mode == Mode::infer) {
    out.z_node = ag::mean_rows(ag::add(node_s, node_cu));
    out.z_tumor = ag::mean_rows(ag::add(tumor_s, tumor_cu));
    return out;
  }

  const std::size_t n_node = node_s.shape()[0], n_tumor = tumor_s.shape()[0];
  const RelationMask node_mask = sample_relation_mask(n_node, n_tumor, ratio, rng);
  const RelationMask tumor_mask = sample_relation_mask(n_tumor, n_node, ratio, rng);
  const ag::Var node_cm = multi_head_attention(tape, node_s, tumor_s, p.cross_node, &node_mask);
  const ag::Var tumor_cm = multi_head_attention(tape, tumor_s, node_s, p.cross_tumor, &tumor_mask);

  out.z_node = ag::mean_rows(ag::add(node_s, node_cm));
  out.z_tumor = ag::mean_rows(ag::add(tumor_s, tumor_cm));
  out.align_pairs.push_back({ag::mean_rows(node_cu), ag::mean_rows(node_cm)});
  out.align_pairs.push_back({ag::mean_rows(tumor_cu), ag::mean_rows(tumor_cm)});
  out.used_masked_path = true;
  return out;
}

ag::Var alignment_loss(const ag::Var& unmasked, const ag::Var& masked) {
  if (unmasked.shape() != masked.shape())
    throw ConfigError("alignment_loss: shape mismatch " + shape_str(unmasked.shape()) + " vs " +
                      shape_str(masked.shape()));
  return ag::mse(unmasked, masked);
}

}  // namespace mmfusion::mmrl
