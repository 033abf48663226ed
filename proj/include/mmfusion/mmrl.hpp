#pragma once

// Multi-tissue masked relational learning: intra-tissue self-attention,
// cross-tissue attention over a randomly masked relation matrix, and the
// alignment constraint between masked and unmasked cross representations.
//
// The relation matrix of a cross-tissue attention is its per-head
// pre-softmax score matrix (queries from the branch being updated, keys from
// the other tissue).  Masking sets scores to -inf; one mask is shared by all
// heads of a call.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/params.hpp"
#include "mmfusion/random.hpp"

namespace mmfusion::mmrl {

struct AttentionParams {
  std::size_t heads = 4;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // projections d x d, biases d
};

AttentionParams init_attention(std::size_t dim, std::size_t heads, Rng& rng);

struct MmrlParams {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t tumor_tiles = 3;  // copies of the tumour token fed to attention
  AttentionParams intra_node, intra_tumor, cross_node, cross_tumor;
};

MmrlParams init_mmrl(std::size_t dim, std::size_t heads, std::size_t tumor_tiles, std::uint64_t seed);
ParamList parameters(MmrlParams& params, const std::string& prefix = "mmrl.");

struct RelationMask {
  Tensor keep;  // n_q x n_k, 1 = kept, 0 = masked
  double ratio = 0.0;

  std::size_t masked_count() const;
};

// Masks exactly round(ratio * n_q * n_k) positions, uniformly without
// replacement.  Draws with a fully masked query row are resampled up to 100
// times when some other arrangement exists.
RelationMask sample_relation_mask(std::size_t n_q, std::size_t n_k, double ratio, Rng& rng);

// Scaled dot-product attention of `queries` over `keys` (both n x d).
ag::Var multi_head_attention(ag::Tape& tape, const ag::Var& queries, const ag::Var& keys,
                             const AttentionParams& params, const RelationMask* mask = nullptr);
ag::Var multi_head_self_attention(ag::Tape& tape, const ag::Var& tokens,
                                  const AttentionParams& params, const RelationMask* mask = nullptr);

// Per-head attention weights (n_q x n_k), for inspection.
std::vector<Tensor> attention_weights(const Tensor& queries, const Tensor& keys,
                                      const AttentionParams& params, const RelationMask* mask = nullptr);

enum class Mode { train, infer };
Mode parse_mode(std::string_view name);

struct AlignPair {
  ag::Var unmasked;  // pooled x^cu
  ag::Var masked;    // pooled x^cm
};

struct MmrlOutput {
  ag::Var z_tumor;
  ag::Var z_node;
  std::vector<AlignPair> align_pairs;  // {node, tumour} in train mode, empty in infer
  bool used_masked_path = false;
};

// tumor: rank-1 d (tiled to tumor_tiles rows) or n x d; nodes: 3 x d.
MmrlOutput mmrl_forward(ag::Tape& tape, const ag::Var& tumor, const ag::Var& nodes,
                        const MmrlParams& params, Mode mode, double ratio, Rng& rng);

ag::Var alignment_loss(const ag::Var& unmasked, const ag::Var& masked);

}  // namespace mmfusion::mmrl
